"""Captioned clip data: synthetic generation, disk corpus, augmentation.

A synthetic clip is a colored shape moving over a plain background with
the exact per-frame displacement field as ground-truth flow and a
templated caption ("a red square is moving right on a black background").
Corpora live on disk as ``<root>/<clip_id>/frames/%06d.png`` plus
``flow.cff`` and ``caption.txt``; flow frame t maps frame t to t+1 and
the final flow frame is zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    EmptyDataset,
    IOFailure,
    MalformedClip,
    ShapeOutOfBounds,
    TooShort,
    TooSmall,
)
from .serialization import read_flow, write_flow

logger = logging.getLogger(__name__)

COLORS = {
    "red": (200, 30, 30),
    "green": (30, 180, 30),
    "blue": (40, 60, 210),
    "yellow": (230, 210, 40),
    "black": (0, 0, 0),
    "white": (255, 255, 255),
}
SHAPES = ("square", "circle", "bar")
MOTIONS = ("right", "left", "up", "down", "bounce", "grow")
SHAPE_COLORS = ("red", "green", "blue", "yellow")
BG_COLORS = ("black", "white")
GRID_MOTIONS = ("right", "left", "up", "down")


@dataclass
class SyntheticSpec:
    canvas: int
    frames: int
    shape: str
    shape_color: str
    bg_color: str
    motion: str
    speed: float = 1.0
    origin: tuple[int, int] | None = None  # (x, y) top-left; None = random

    def caption(self) -> str:
        verb = {"bounce": "bouncing", "grow": "growing"}.get(
            self.motion, f"moving {self.motion}")
        return (f"a {self.shape_color} {self.shape} is {verb} "
                f"on a {self.bg_color} background")


@dataclass
class ClipSample:
    video: np.ndarray   # [3, T, H, W] float32 in [-1, 1]
    flow: np.ndarray    # [2, T, H, W] float32, px/frame
    caption: str


def video_to_uint8(video: np.ndarray) -> np.ndarray:
    """[3, T, H, W] in [-1, 1] -> [T, H, W, 3] uint8."""
    frames = np.clip((np.asarray(video) + 1.0) * 127.5, 0.0, 255.0)
    return np.rint(frames).astype(np.uint8).transpose(1, 2, 3, 0)


def uint8_to_video(frames: np.ndarray) -> np.ndarray:
    """[T, H, W, 3] uint8 -> [3, T, H, W] float32 in [-1, 1]."""
    return (frames.astype(np.float32) / 127.5 - 1.0).transpose(3, 0, 1, 2)


def shape_bbox(shape: str, canvas: int) -> tuple[int, int]:
    """Bounding-box (width, height) of a shape on the given canvas."""
    side = max(3, round(canvas * 0.32))
    if shape == "square" or shape == "circle":
        return side, side
    if shape == "bar":
        return side + side // 2, max(2, side // 2)
    raise ValueError(f"unknown shape {shape!r}")


def _support(shape: str, x: int, y: int, bw: int, bh: int, canvas: int) -> np.ndarray:
    mask = np.zeros((canvas, canvas), dtype=bool)
    if shape == "circle":
        cy, cx = y + (bh - 1) / 2.0, x + (bw - 1) / 2.0
        yy, xx = np.mgrid[0:canvas, 0:canvas]
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= (bw / 2.0) ** 2] = True
    else:
        mask[y:y + bh, x:x + bw] = True
    return mask


def _positions(spec: SyntheticSpec, bw: int, bh: int,
               rng: np.random.Generator) -> list[tuple[int, int]]:
    """Integer top-left positions per frame; raises if the shape exits."""
    c, t, s = spec.canvas, spec.frames, spec.speed
    travel = int(round(s * (t - 1)))

    def start(span: int, extent: int, moving_positive: bool | None) -> int:
        if moving_positive is None:
            lo, hi = 0, span - extent
        elif moving_positive:
            lo, hi = 0, span - extent - travel
        else:
            lo, hi = travel, span - extent
        if hi < lo:
            raise ShapeOutOfBounds(
                f"{spec.shape} ({extent}px, travel {travel}px) cannot fit "
                f"canvas {span} over {t} frames")
        return int(rng.integers(lo, hi + 1))

    if spec.origin is not None:
        x0, y0 = spec.origin
    else:
        if spec.motion == "right":
            x0, y0 = start(c, bw, True), start(c, bh, None)
        elif spec.motion == "left":
            x0, y0 = start(c, bw, False), start(c, bh, None)
        elif spec.motion == "down":
            x0, y0 = start(c, bw, None), start(c, bh, True)
        elif spec.motion == "up":
            x0, y0 = start(c, bw, None), start(c, bh, False)
        else:
            x0, y0 = start(c, bw, None), start(c, bh, None)

    positions = []
    vx = {"right": s, "left": -s}.get(spec.motion, 0.0)
    vy = {"down": s, "up": -s}.get(spec.motion, 0.0)
    if spec.motion == "bounce":
        vy = s
    fx, fy = float(x0), float(y0)
    for _ in range(t):
        xi, yi = int(round(fx)), int(round(fy))
        if xi < 0 or yi < 0 or xi + bw > c or yi + bh > c:
            raise ShapeOutOfBounds(
                f"{spec.shape} leaves the {c}px canvas at ({xi}, {yi})")
        positions.append((xi, yi))
        if spec.motion == "bounce":
            if vy > 0 and fy + vy + bh > c:
                vy = -vy
            elif vy < 0 and fy + vy < 0:
                vy = -vy
        fx += vx
        fy += vy
    return positions


def generate_synthetic_sample(spec: SyntheticSpec,
                              rng: np.random.Generator) -> ClipSample:
    """Render a clip and its exact displacement field.

    Inside the shape's support at frame t the flow equals the shape's
    integer displacement from t to t+1; everywhere else (and on the final
    frame) it is zero. The grow motion instead dilates the shape around
    its center and carries the corresponding radial field.
    """
    if spec.shape not in SHAPES:
        raise ValueError(f"unknown shape {spec.shape!r}")
    if spec.motion not in MOTIONS:
        raise ValueError(f"unknown motion {spec.motion!r}")
    if spec.speed < 0:
        raise ValueError("speed must be >= 0")
    c, t = spec.canvas, spec.frames
    bw, bh = shape_bbox(spec.shape, c)
    fg = np.array(COLORS[spec.shape_color], dtype=np.uint8)
    bg = np.array(COLORS[spec.bg_color], dtype=np.uint8)

    frames = np.empty((t, c, c, 3), dtype=np.uint8)
    flow = np.zeros((2, t, c, c), dtype=np.float32)

    if spec.motion == "grow":
        growth = max(1, int(round(spec.speed)))
        if bw + growth * (t - 1) > c or bh + growth * (t - 1) > c:
            raise ShapeOutOfBounds(f"grown {spec.shape} exceeds canvas {c}")
        x0 = int(rng.integers(0, c - bw - growth * (t - 1) + 1)) \
            if spec.origin is None else spec.origin[0]
        y0 = int(rng.integers(0, c - bh - growth * (t - 1) + 1)) \
            if spec.origin is None else spec.origin[1]
        cx, cy = x0 + (bw - 1) / 2.0, y0 + (bh - 1) / 2.0
        for i in range(t):
            w_i, h_i = bw + growth * i, bh + growth * i
            xi, yi = int(round(cx - (w_i - 1) / 2.0)), int(round(cy - (h_i - 1) / 2.0))
            xi, yi = max(0, min(xi, c - w_i)), max(0, min(yi, c - h_i))
            sup = _support(spec.shape, xi, yi, w_i, h_i, c)
            frames[i] = np.where(sup[..., None], fg, bg)
            if i < t - 1:
                ratio = (w_i + growth) / w_i - 1.0
                yy, xx = np.mgrid[0:c, 0:c]
                flow[0, i][sup] = ((xx - cx) * ratio)[sup]
                flow[1, i][sup] = ((yy - cy) * ratio)[sup]
    else:
        positions = _positions(spec, bw, bh, rng)
        for i, (xi, yi) in enumerate(positions):
            sup = _support(spec.shape, xi, yi, bw, bh, c)
            frames[i] = np.where(sup[..., None], fg, bg)
            if i < t - 1:
                dx = positions[i + 1][0] - xi
                dy = positions[i + 1][1] - yi
                flow[0, i][sup] = dx
                flow[1, i][sup] = dy

    return ClipSample(video=uint8_to_video(frames), flow=flow,
                      caption=spec.caption())


def default_corpus_specs(canvas: int, frames: int, speed: float = 1.0) -> list[SyntheticSpec]:
    """The deterministic 3x4x4x2 spec grid (96 clips)."""
    specs = []
    for shape in SHAPES:
        for color in SHAPE_COLORS:
            for motion in GRID_MOTIONS:
                for bg in BG_COLORS:
                    specs.append(SyntheticSpec(canvas, frames, shape, color,
                                               bg, motion, speed))
    return specs


def write_clip(sample: ClipSample, clip_dir: str | Path) -> Path:
    clip_dir = Path(clip_dir)
    frames_dir = clip_dir / "frames"
    try:
        frames_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(video_to_uint8(sample.video)):
            Image.fromarray(frame, mode="RGB").save(frames_dir / f"{i:06d}.png")
        write_flow(clip_dir / "flow.cff", sample.flow)
        (clip_dir / "caption.txt").write_text(sample.caption + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write clip to {clip_dir}: {exc}") from exc
    return clip_dir


def load_clip(clip_dir: str | Path) -> ClipSample:
    clip_dir = Path(clip_dir)
    frames_dir = clip_dir / "frames"
    caption_file = clip_dir / "caption.txt"
    flow_file = clip_dir / "flow.cff"
    if not (frames_dir.is_dir() and caption_file.is_file() and flow_file.is_file()):
        raise MalformedClip(f"{clip_dir}: missing frames/, flow.cff, or caption.txt")
    frame_files = sorted(frames_dir.glob("*.png"))
    if not frame_files:
        raise MalformedClip(f"{clip_dir}: no frames")
    try:
        frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in frame_files])
        flow = read_flow(flow_file)
        caption = caption_file.read_text(encoding="utf-8").strip()
    except Exception as exc:
        raise MalformedClip(f"{clip_dir}: {exc}") from exc
    if flow.shape[1:] != frames.shape[:3]:
        raise MalformedClip(f"{clip_dir}: flow {flow.shape} does not match "
                            f"{frames.shape[0]} frames of {frames.shape[1:3]}")
    if not caption:
        raise MalformedClip(f"{clip_dir}: empty caption")
    return ClipSample(video=uint8_to_video(frames), flow=flow, caption=caption)


@dataclass
class ClipEntry:
    path: Path
    caption: str
    frames: int


@dataclass
class DatasetIndex:
    root: Path
    entries: list[ClipEntry]
    split: str = "train"
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def captions(self) -> list[str]:
        return [e.caption for e in self.entries]

    def load(self, i: int) -> ClipSample:
        return load_clip(self.entries[i].path)

    def by_caption(self, caption: str) -> int:
        for i, e in enumerate(self.entries):
            if e.caption == caption:
                return i
        raise KeyError(caption)


def write_corpus(root: str | Path, specs: list[SyntheticSpec], seed: int = 0) -> int:
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i, spec in enumerate(specs):
        write_clip(generate_synthetic_sample(spec, rng), root / f"clip_{i:05d}")
    return len(specs)


def load_dataset(root: str | Path, split: str = "train") -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    entries: list[ClipEntry] = []
    skipped = 0
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            sample = load_clip(clip_dir)
        except MalformedClip as exc:
            logger.warning("skipping malformed clip: %s", exc)
            skipped += 1
            continue
        entries.append(ClipEntry(path=clip_dir, caption=sample.caption,
                                 frames=sample.video.shape[1]))
    if not entries:
        raise EmptyDataset(f"no loadable clips under {root}")
    return DatasetIndex(root=root, entries=entries, split=split, skipped=skipped)


def flip_horizontal(video: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror video and flow; the horizontal flow component negates."""
    video_f = video[..., ::-1].copy()
    flow_f = flow[..., ::-1].copy()
    flow_f[0] = -flow_f[0]
    return video_f, flow_f


def augment_clip(sample: ClipSample, rng: np.random.Generator, *,
                 out_size: int, out_len: int) -> ClipSample:
    """Shared random crop, contiguous frame cut, and coin-flip mirror.

    The spatial offset is identical for every frame and for the flow, so
    video/flow alignment is preserved; the final flow frame of the cut is
    re-zeroed because its target frame was cut away.
    """
    _, t, h, w = sample.video.shape
    if h < out_size or w < out_size:
        raise TooSmall(f"clip is {h}x{w}, need at least {out_size}x{out_size}")
    if t < out_len:
        raise TooShort(f"clip has {t} frames, need at least {out_len}")

    y0 = int(rng.integers(0, h - out_size + 1))
    x0 = int(rng.integers(0, w - out_size + 1))
    t0 = int(rng.integers(0, t - out_len + 1))
    flip = bool(rng.random() < 0.5)

    video = sample.video[:, t0:t0 + out_len, y0:y0 + out_size, x0:x0 + out_size]
    flow = sample.flow[:, t0:t0 + out_len, y0:y0 + out_size, x0:x0 + out_size].copy()
    flow[:, -1] = 0.0
    if flip:
        video, flow = flip_horizontal(video, flow)
    return ClipSample(video=np.ascontiguousarray(video), flow=flow,
                      caption=sample.caption)


def resize_flow(flow: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear flow resize with displacement rescaled by the size ratio."""
    _, t, h, w = flow.shape
    out = np.empty((2, t, out_h, out_w), dtype=np.float32)
    for ch in range(2):
        for i in range(t):
            img = Image.fromarray(flow[ch, i].astype(np.float32), mode="F")
            out[ch, i] = np.asarray(img.resize((out_w, out_h), Image.BILINEAR))
    out[0] *= out_w / w
    out[1] *= out_h / h
    return out
