"""Video distance metric, ablation harness, and sample export.

The root-mean-square distance between two videos is computed in 0-255
RGB space after aligning durations (the longer video is subsampled
uniformly, endpoints included) and resolutions (the larger video is
box-downscaled). The ablation harness trains one model per caption-
encoding configuration under a shared iteration budget and reports the
mean/std distance between generated videos and the dataset clips
bearing the same captions.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig
from .data import DatasetIndex, video_to_uint8
from .errors import BudgetExceeded, EmptyVideo, IOFailure, MissingModel
from .training import (
    AblationFlags,
    encode_captions,
    ensure_caption_encoder,
    generate_sample,
    run_training,
    load_checkpoint,
)

ABLATION_CONFIGS: dict[str, tuple[str, AblationFlags]] = {
    "a": ("cftgan", AblationFlags()),
    "b": ("cftgan", AblationFlags(zero_caption_tex_fg=True, zero_caption_tex_bg=True)),
    "c": ("cftgan", AblationFlags(zero_caption_tex_fg=True)),
    "d": ("cftgan", AblationFlags(zero_caption_tex_bg=True)),
    "e": ("cftgan", AblationFlags(zero_caption_flow=True)),
    "f": ("cvgan", AblationFlags()),
}

REPORT_CSV_HEADER = "config,mean_rmsd,std_rmsd,n_captions,n_repeats"


def subsample_indices(longer: int, shorter: int) -> np.ndarray:
    """Evenly spaced frame indices including both endpoints."""
    return np.round(np.linspace(0, longer - 1, shorter)).astype(int)


def _box_resize(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = plane.shape
    if h % out_h == 0 and w % out_w == 0:
        # integer ratio: exact block averaging in float64
        return plane.reshape(out_h, h // out_h, out_w, w // out_w).mean(axis=(1, 3))
    img = Image.fromarray(plane.astype(np.float32), mode="F")
    return np.asarray(img.resize((out_w, out_h), Image.BOX), dtype=np.float64)


def _align_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ta, tb = a.shape[1], b.shape[1]
    if ta > tb:
        a = a[:, subsample_indices(ta, tb)]
    elif tb > ta:
        b = b[:, subsample_indices(tb, ta)]

    h = min(a.shape[2], b.shape[2])
    w = min(a.shape[3], b.shape[3])

    def shrink(v):
        if v.shape[2] == h and v.shape[3] == w:
            return v
        out = np.empty((v.shape[0], v.shape[1], h, w))
        for ch in range(v.shape[0]):
            for t in range(v.shape[1]):
                out[ch, t] = _box_resize(v[ch, t], h, w)
        return out

    return shrink(a), shrink(b)


def rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """Root of the mean squared per-pixel-per-channel RGB difference.

    Inputs are [3, T, H, W] volumes in [-1, 1]; the comparison happens
    on the 0-255 scale after duration/resolution alignment.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for name, v in (("a", a), ("b", b)):
        if v.ndim != 4 or v.shape[0] != 3 or 0 in v.shape:
            raise EmptyVideo(f"{name}: expected non-empty [3, T, H, W], got {v.shape}")
    a, b = _align_pair((a + 1.0) * 127.5, (b + 1.0) * 127.5)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class AblationRow:
    tag: str
    mean_rmsd: float
    std_rmsd: float
    n_captions: int
    n_repeats: int


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def to_csv(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(REPORT_CSV_HEADER + "\n")
                for r in self.rows:
                    fh.write(f"{r.tag},{r.mean_rmsd:.6f},{r.std_rmsd:.6f},"
                             f"{r.n_captions},{r.n_repeats}\n")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc
        return path


def run_ablation(tags, dataset: DatasetIndex, cfg: RunConfig, out_dir, *,
                 n_captions: int | None = None, n_repeats: int | None = None,
                 budget: int | None = None, seed: int | None = None,
                 checkpoints: dict[str, str] | None = None) -> AblationReport:
    """Train and score each caption-encoding configuration.

    Every configuration trains for ``budget`` iterations of the
    cfg.total_iters blending schedule (BudgetExceeded if the budget asks
    for more than the schedule has). With ``budget=0`` a pre-trained
    checkpoint per tag must be supplied instead. Scoring samples
    ``n_captions`` captions, generates one video per caption, and
    averages the distance to the dataset clip bearing that caption over
    ``n_repeats`` repeats; the reported std is across repeat means.
    """
    n_captions = cfg.n_captions if n_captions is None else n_captions
    n_repeats = cfg.n_repeats if n_repeats is None else n_repeats
    budget = cfg.ablation_budget if budget is None else budget
    seed = cfg.seed if seed is None else seed
    if budget > cfg.total_iters:
        raise BudgetExceeded(
            f"budget {budget} exceeds the {cfg.total_iters}-iteration schedule")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    encoder = ensure_caption_encoder(dataset.captions(), cfg,
                                     out_dir / "captions.cftc")
    phi_map = encode_captions(encoder, dataset.captions())

    rows = []
    for tag_index, tag in enumerate(tags):
        model, flags = ABLATION_CONFIGS[tag]
        if budget > 0:
            state, _ = run_training(dataset, cfg, out_dir / f"config_{tag}",
                                    model=model, iters=budget, ablation=flags,
                                    encoder=encoder)
        else:
            if not checkpoints or tag not in checkpoints:
                raise MissingModel(f"no trained model for configuration {tag!r}")
            state = load_checkpoint(checkpoints[tag], cfg)

        repeat_means = []
        for r in range(n_repeats):
            pick_rng = np.random.default_rng((seed, tag_index, r))
            idx = pick_rng.choice(len(dataset), size=n_captions,
                                  replace=len(dataset) < n_captions)
            distances = []
            for j, i in enumerate(idx):
                entry = dataset.entries[int(i)]
                gen_rng = torch.Generator().manual_seed(
                    (seed * 1_000_003 + tag_index * 10_007 + r * 101 + j) % 2**63)
                video, _ = generate_sample(state, phi_map[entry.caption], cfg, gen_rng)
                distances.append(rmsd(video, dataset.load(int(i)).video))
            repeat_means.append(float(np.mean(distances)))
        rows.append(AblationRow(tag=tag, mean_rmsd=float(np.mean(repeat_means)),
                                std_rmsd=float(np.std(repeat_means)),
                                n_captions=n_captions, n_repeats=n_repeats))
    report = AblationReport(rows)
    report.to_csv(out_dir / "ablation_report.csv")
    return report


def export_samples(videos, captions, out_dir, frame_stride: int = 4) -> list[Path]:
    """Write one horizontal frame strip per video plus a captions sidecar.

    Strips take every ``frame_stride``-th frame. An empty video list
    writes nothing and succeeds.
    """
    videos = list(videos)
    captions = list(captions)
    if len(videos) != len(captions):
        raise ValueError("videos and captions must pair up")
    if not videos:
        return []
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for i, video in enumerate(videos):
            frames = video_to_uint8(video)[::frame_stride]
            strip = np.concatenate(list(frames), axis=1)
            path = out_dir / f"sample_{i:03d}.png"
            Image.fromarray(strip, mode="RGB").save(path)
            written.append(path)
        sidecar = out_dir / "captions.txt"
        sidecar.write_text("\n".join(captions) + "\n", encoding="utf-8")
        written.append(sidecar)
    except OSError as exc:
        raise IOFailure(f"cannot write samples to {out_dir}: {exc}") from exc
    return written
