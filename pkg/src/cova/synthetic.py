"""Synthetic scenes with known ground truth, for tests, demos and the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .capture import write_image, write_raw_video
from .geometry import BoundingBox, GroundTruthObject


def background(width: int = 640, height: int = 480, seed: int = 0) -> np.ndarray:
    """A static, mildly textured RGB background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    base = 70 + 40 * xx / max(width - 1, 1) + 20 * yy / max(height - 1, 1)
    texture = rng.integers(-6, 7, size=(height, width))
    g = np.clip(base + texture, 0, 255).astype(np.uint8)
    return np.stack([g, g, (g * 0.9).astype(np.uint8)], axis=2)


def draw_box(img: np.ndarray, box: BoundingBox, color: Sequence[int]) -> None:
    x0, y0, x1, y1 = (int(round(v)) for v in box.as_tuple())
    img[y0:y1, x0:x1] = color


@dataclass
class Scene:
    frames: list[np.ndarray]
    boxes: list[list[BoundingBox]]  # true object boxes per frame

    def write_raw(self, path: str | Path) -> Path:
        write_raw_video(path, self.frames)
        return Path(path)

    def write_dir(self, path: str | Path, suffix: str = ".png") -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(self.frames):
            write_image(path / f"{i:06d}{suffix}", f)
        return path


def moving_square(
    n: int = 60, width: int = 640, height: int = 480, size: int = 20, step: int = 5,
    color: Sequence[int] = (240, 240, 240), seed: int = 0, lead_in: int = 5, contrast: int | None = None,
) -> Scene:
    """A square bouncing around the frame at ``step`` pixels per frame on
    each axis. Each pixel is covered for at most ``size / step + 1`` frames.
    The first ``lead_in`` frames show the empty background. With
    ``contrast`` the square is the background brightened by that much
    instead of a solid ``color``."""
    bg = background(width, height, seed)
    x, y, dx, dy = width // 4, height // 3, step, step
    frames, boxes = [bg.copy() for _ in range(lead_in)], [[] for _ in range(lead_in)]
    for _ in range(n - lead_in):
        box = BoundingBox(x, y, x + size, y + size)
        f = bg.copy()
        if contrast is None:
            draw_box(f, box, color)
        else:
            sl = np.s_[int(box.y_min):int(box.y_max), int(box.x_min):int(box.x_max)]
            f[sl] = np.clip(f[sl].astype(int) + contrast, 0, 255).astype(np.uint8)
        frames.append(f)
        boxes.append([box])
        if not 0 <= x + dx <= width - size:
            dx = -dx
        if not 0 <= y + dy <= height - size:
            dy = -dy
        x, y = x + dx, y + dy
    return Scene(frames, boxes)


def constant(n: int = 30, width: int = 640, height: int = 480, seed: int = 0) -> Scene:
    bg = background(width, height, seed)
    return Scene([bg.copy() for _ in range(n)], [[] for _ in range(n)])


def teleporting_box(
    n: int = 60, width: int = 640, height: int = 480, area_fraction: float = 0.10,
    color: Sequence[int] = (240, 240, 240), seed: int = 0, lead_in: int = 5,
) -> Scene:
    """A box covering ``area_fraction`` of the frame that jumps between the
    cells of a 3x3 grid every frame, so the background model never absorbs
    it. The first ``lead_in`` frames show the empty background."""
    bg = background(width, height, seed)
    bw = int(round(width * np.sqrt(area_fraction)))
    bh = int(round(height * np.sqrt(area_fraction)))
    cells = [(c * width // 3 + (width // 3 - bw) // 2, r * height // 3 + (height // 3 - bh) // 2)
             for r in range(3) for c in range(3)]
    order = [0, 4, 8, 2, 6, 1, 5, 7, 3]
    frames, boxes = [bg.copy() for _ in range(lead_in)], [[] for _ in range(lead_in)]
    for i in range(n - lead_in):
        x, y = cells[order[i % 9]]
        box = BoundingBox(x, y, x + bw, y + bh)
        f = bg.copy()
        draw_box(f, box, color)
        frames.append(f)
        boxes.append([box])
    return Scene(frames, boxes)


def lighting_shift(
    n: int = 80, width: int = 320, height: int = 240, shift_at: int = 10, delta: int = 60, seed: int = 0,
) -> Scene:
    """Static scene whose left half brightens by ``delta`` at ``shift_at``
    and stays that way."""
    bg = background(width, height, seed)
    lit = bg.copy()
    lit[:, : width // 2] = np.clip(lit[:, : width // 2].astype(int) + delta, 0, 255).astype(np.uint8)
    frames = [(bg if i < shift_at else lit).copy() for i in range(n)]
    return Scene(frames, [[] for _ in range(n)])


def object_scene(
    n_images: int = 50, width: int = 320, height: int = 240,
    labels: Sequence[str] = ("person", "car"), max_objects: int = 3,
    min_size: int = 12, max_size: int = 80, seed: int = 0,
) -> tuple[list[np.ndarray], list[list[GroundTruthObject]]]:
    """Random non-overlapping labelled rectangles on a background."""
    rng = np.random.default_rng(seed)
    bg = background(width, height, seed)
    palette = {lab: tuple(int(v) for v in rng.integers(0, 256, 3)) for lab in labels}
    images, gts = [], []
    for _ in range(n_images):
        img = bg.copy()
        objs: list[GroundTruthObject] = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _attempt in range(20):
                w, h = (int(v) for v in rng.integers(min_size, max_size + 1, 2))
                x, y = int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1))
                box = BoundingBox(x, y, x + w, y + h)
                if all(box.intersection(o.box) is None for o in objs):
                    lab = labels[int(rng.integers(len(labels)))]
                    draw_box(img, box, palette[lab])
                    objs.append(GroundTruthObject(box, lab))
                    break
        images.append(img)
        gts.append(objs)
    return images, gts


def ground_truth_doc(
    file_names: Sequence[str], sizes: Sequence[tuple[int, int]],
    objects: Sequence[Sequence[GroundTruthObject]], labels: Sequence[str],
) -> dict:
    cat = {lab: i for i, lab in enumerate(labels, start=1)}
    images, anns = [], []
    for img_id, (name, (w, h), objs) in enumerate(zip(file_names, sizes, objects), start=1):
        images.append({"id": img_id, "file_name": name, "width": w, "height": h})
        for o in objs:
            bw, bh = o.box.width, o.box.height
            anns.append({"id": len(anns) + 1, "image_id": img_id, "category_id": cat[o.label],
                         "bbox": [o.box.x_min, o.box.y_min, bw, bh], "area": bw * bh, "iscrowd": 0})
    return {"images": images, "annotations": anns,
            "categories": [{"id": i, "name": lab} for lab, i in cat.items()]}


def write_object_scene(out_dir: str | Path, labels: Sequence[str] = ("person", "car"), **kw) -> tuple[Path, Path]:
    """Write images and their ground truth; returns (image dir, GT path)."""
    out_dir = Path(out_dir)
    images, gts = object_scene(labels=labels, **kw)
    img_dir = out_dir / "frames"
    img_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"{i:06d}.png"
        write_image(img_dir / name, img)
        names.append(name)
    doc = ground_truth_doc(names, [(im.shape[1], im.shape[0]) for im in images], gts, labels)
    gt_path = out_dir / "ground_truth.json"
    gt_path.write_text(json.dumps(doc, indent=1))
    return img_dir, gt_path


def scene_ground_truth(scene: Scene, frame_ids: Sequence[str], label: str | Sequence[str]) -> dict:
    """COCO ground truth for ``scene``; ``label`` is one class name or one per frame."""
    h, w = scene.frames[0].shape[:2]
    per_frame = [label] * len(scene.frames) if isinstance(label, str) else list(label)
    objs = [[GroundTruthObject(b, lab) for b in bs] for bs, lab in zip(scene.boxes, per_frame)]
    labels = list(dict.fromkeys(per_frame))
    return ground_truth_doc(frame_ids, [(w, h)] * len(frame_ids), objs, labels)
