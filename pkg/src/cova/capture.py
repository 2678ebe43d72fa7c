"""Frame ingestion from disk: image directories (PNG, PPM) and raw CVR1 video.

CVR1 layout, little-endian: magic ``b"CVR1"``, u32 width, u32 height,
u32 frame count, then ``count`` frames of packed RGB24 (``width*height*3``
bytes each, row-major, top row first).
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .geometry import Frame

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")
CVR_MAGIC = b"CVR1"
_CVR_HEADER = struct.Struct("<4sIII")

IMAGE_DIRECTORY = "image_directory"
RAW_VIDEO = "raw_video"


@dataclass
class ItemError:
    path: str
    reason: str


def decode_image(data: bytes) -> np.ndarray:
    """Decode PNG or PPM bytes into an HxWx3 uint8 array."""
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def encode_png(pixels: np.ndarray) -> bytes:
    # fast zlib level: frames are mostly sensor texture and barely compress anyway
    buf = io.BytesIO()
    mode = "L" if pixels.ndim == 2 else "RGB"
    Image.fromarray(np.ascontiguousarray(pixels), mode=mode).save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def read_image(path: str | Path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        h, w = pixels.shape[:2]
        path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, np.uint8).tobytes())
    else:
        path.write_bytes(encode_png(pixels))


def write_raw_video(path: str | Path, frames: Iterable[np.ndarray]) -> int:
    """Write RGB frames to a CVR1 file; returns the frame count."""
    frames = [np.ascontiguousarray(f, dtype=np.uint8) for f in frames]
    if not frames:
        raise ValueError("cannot write a video with no frames")
    h, w = frames[0].shape[:2]
    with open(path, "wb") as fh:
        fh.write(_CVR_HEADER.pack(CVR_MAGIC, w, h, len(frames)))
        for f in frames:
            if f.shape != (h, w, 3):
                raise ValueError(f"frame shape {f.shape} differs from {(h, w, 3)}")
            fh.write(f.tobytes())
    return len(frames)


def read_raw_header(path: str | Path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_CVR_HEADER.size)
    if len(head) != _CVR_HEADER.size:
        raise ValueError(f"{path}: truncated CVR1 header")
    magic, w, h, n = _CVR_HEADER.unpack(head)
    if magic != CVR_MAGIC:
        raise ValueError(f"{path}: not a CVR1 file")
    return w, h, n


@dataclass
class FrameSource:
    """An ordered, optionally looping stream of frames from disk.

    Unreadable items are skipped, logged, and kept in ``errors``.
    """

    kind: str
    path: Path
    frame_rate: float = 25.0
    loop: bool = False
    stream_id: str = ""
    errors: list[ItemError] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.path = Path(self.path)
        if self.kind not in (IMAGE_DIRECTORY, RAW_VIDEO):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if not self.path.exists():
            raise FileNotFoundError(f"source path does not exist: {self.path}")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be > 0")
        if self.kind == RAW_VIDEO:
            read_raw_header(self.path)
        if not self.stream_id:
            self.stream_id = self.path.stem
        self._cursor: Iterator[Frame] | None = None

    def next_frame(self) -> Frame | None:
        """Next frame in order, or None at end of stream."""
        if self._cursor is None:
            self._cursor = iter(self)
        return next(self._cursor, None)

    def __iter__(self) -> Iterator[Frame]:
        index = 0
        while True:
            produced = 0
            for frame_id, pixels in self._items():
                yield Frame(
                    stream_id=self.stream_id,
                    index=index,
                    timestamp_ms=int(round(index * 1000.0 / self.frame_rate)),
                    pixels=pixels,
                    frame_id=frame_id,
                )
                index += 1
                produced += 1
            if not self.loop or produced == 0:
                return

    def _items(self) -> Iterator[tuple[str, np.ndarray]]:
        if self.kind == IMAGE_DIRECTORY:
            yield from self._directory_items()
        else:
            yield from self._raw_items()

    def _error(self, path: str, reason: str) -> None:
        log.warning("skipping unreadable frame %s: %s", path, reason)
        self.errors.append(ItemError(path, reason))

    def _directory_items(self) -> Iterator[tuple[str, np.ndarray]]:
        files = sorted(p for p in self.path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        for p in files:
            try:
                pixels = read_image(p)
            except Exception as exc:  # any decoder failure is an item-level error
                self._error(str(p), str(exc) or type(exc).__name__)
                continue
            yield p.name, pixels

    def _raw_items(self) -> Iterator[tuple[str, np.ndarray]]:
        w, h, n = read_raw_header(self.path)
        size = w * h * 3
        stem = self.path.stem
        with open(self.path, "rb") as fh:
            fh.seek(_CVR_HEADER.size)
            for i in range(n):
                buf = fh.read(size)
                if len(buf) != size:
                    self._error(f"{self.path}#{i}", "truncated frame")
                    return
                yield f"{stem}_{i:06d}", np.frombuffer(buf, np.uint8).reshape(h, w, 3).copy()


def open_source(path: str | Path, frame_rate: float = 25.0, loop: bool = False) -> FrameSource:
    """Pick the source kind from the path: directories are image
    directories, files are CVR1 videos."""
    path = Path(path)
    kind = IMAGE_DIRECTORY if path.is_dir() else RAW_VIDEO
    return FrameSource(kind, path, frame_rate=frame_rate, loop=loop)
