from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import pytest

from cova import synthetic

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter) -> None:
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


def write_square_video(
    root: Path, n: int = 60, name: str = "sq", label: str | Sequence[str] = "car", **kw: Any
) -> tuple[Path, Path, synthetic.Scene]:
    """Moving-square raw video plus matching ground truth in ``root``."""
    scene = synthetic.moving_square(n, **kw)
    video = scene.write_raw(root / f"{name}.cvr")
    ids = [f"{name}_{i:06d}" for i in range(n)]
    gt = root / f"{name}_gt.json"
    gt.write_text(json.dumps(synthetic.scene_ground_truth(scene, ids, label)))
    return video, gt, scene


def pipeline_doc(
    capture: dict[str, Any],
    annotate: dict[str, Any],
    filter_: dict[str, Any] | None = None,
    output_dir: str = "out",
    train: dict[str, Any] | None = None,
    label_map: Sequence[str] = ("person", "car"),
    target_classes: Sequence[str] = ("car",),
    **extra: Any,
) -> dict[str, Any]:
    return {
        "pipeline": [
            {"stage": "capture", "plugin": "raw_video", "params": capture},
            filter_ or {"stage": "filter", "plugin": "moving_objects_only", "params": {"warmup_frames": 5}},
            {"stage": "annotate", **annotate},
            {"stage": "dataset", "plugin": "default", "params": {"output_dir": output_dir}},
            train or {"stage": "train", "plugin": "none"},
        ],
        "label_map": list(label_map),
        "target_classes": list(target_classes),
        **extra,
    }


def oracle_annotate(gt: Path | str, **params: Any) -> dict[str, Any]:
    return {"plugin": "oracle_file", "params": {"ground_truth": str(gt), **params}}


@pytest.fixture
def square_video(tmp_path):
    return write_square_video(tmp_path)
