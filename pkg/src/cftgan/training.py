"""Blended adversarial training for the two-stage model and the baseline.

Per iteration the four networks update in the order flow discriminator,
texture discriminator, flow generator, texture generator. The texture
losses mix a real-flow term weighted (1 - k/K) with a generated-flow
term weighted k/K, and the flow generator receives the k/K-weighted
feedback of the texture discriminator through the (frozen) texture
generator. Discriminator objectives are ascended by minimizing their
negation; generator objectives are minimized as written, with an
optional non-saturating variant behind a config flag.
"""
from __future__ import annotations

import base64
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .baseline_cvgan import CvganDiscriminator, CvganGenerator
from .captions import CaptionEncoder, ConditionAugmenter
from .config import RunConfig
from .data import ClipSample, DatasetIndex, augment_clip
from .errors import CorruptCheckpoint, InvalidIteration, NonFiniteLoss
from .flow_gan import FlowDiscriminator, FlowGenerator
from .serialization import CHECKPOINT_MAGIC, read_container, write_container
from .texture_gan import TextureDiscriminator, TextureGenerator

LOSS_CSV_HEADER = "iter,ld_flow,lg_flow,ld_tex,lg_tex,lr"


def schedule_weight(k: int, total: int) -> float:
    """Linear blend weight k/K of the generated-flow training terms."""
    if total <= 0:
        raise InvalidIteration(f"total iterations must be positive, got {total}")
    if k < 0 or k > total:
        raise InvalidIteration(f"iteration {k} outside [0, {total}]")
    return k / total


def lr_at(iteration: int, cfg: RunConfig) -> float:
    """Learning rate halved every ``lr_halving_period`` iterations."""
    if iteration < 0:
        raise InvalidIteration(f"iteration must be >= 0, got {iteration}")
    return cfg.lr0 * 0.5 ** (iteration // cfg.lr_halving_period)


def _log(p: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.log(p.clamp(min=eps))


def loss_d_flow(p_real: torch.Tensor, p_fake: torch.Tensor,
                eps: float = 1e-7) -> torch.Tensor:
    """Flow-discriminator objective (to ascend)."""
    return _log(p_real, eps).mean() + _log(1.0 - p_fake, eps).mean()


def loss_g_flow(p_fake: torch.Tensor, p_tex_feedback: torch.Tensor | None,
                k: int, total: int, eps: float = 1e-7,
                non_saturating: bool = False) -> torch.Tensor:
    """Flow-generator objective (to minimize)."""
    w = schedule_weight(k, total)

    def term(p):
        return -_log(p, eps).mean() if non_saturating else _log(1.0 - p, eps).mean()

    value = term(p_fake)
    if w > 0.0:
        if p_tex_feedback is None:
            raise ValueError("k > 0 requires the texture feedback term")
        value = value + w * term(p_tex_feedback)
    return value


def loss_d_tex(p_real: torch.Tensor, p_fake_real_flow: torch.Tensor | None,
               p_fake_gen_flow: torch.Tensor | None, k: int, total: int,
               eps: float = 1e-7) -> torch.Tensor:
    """Texture-discriminator objective (to ascend)."""
    w = schedule_weight(k, total)
    value = _log(p_real, eps).mean()
    if w < 1.0:
        if p_fake_real_flow is None:
            raise ValueError("k < K requires the real-flow term")
        value = value + (1.0 - w) * _log(1.0 - p_fake_real_flow, eps).mean()
    if w > 0.0:
        if p_fake_gen_flow is None:
            raise ValueError("k > 0 requires the generated-flow term")
        value = value + w * _log(1.0 - p_fake_gen_flow, eps).mean()
    return value


def loss_g_tex(p_fake_real_flow: torch.Tensor | None,
               p_fake_gen_flow: torch.Tensor | None, k: int, total: int,
               eps: float = 1e-7, non_saturating: bool = False) -> torch.Tensor:
    """Texture-generator objective (to minimize)."""
    w = schedule_weight(k, total)

    def term(p):
        return -_log(p, eps).mean() if non_saturating else _log(1.0 - p, eps).mean()

    value = torch.zeros(())
    if w < 1.0:
        if p_fake_real_flow is None:
            raise ValueError("k < K requires the real-flow term")
        value = value + (1.0 - w) * term(p_fake_real_flow)
    if w > 0.0:
        if p_fake_gen_flow is None:
            raise ValueError("k > 0 requires the generated-flow term")
        value = value + w * term(p_fake_gen_flow)
    return value


@dataclass(frozen=True)
class AblationFlags:
    """Which generator streams have their caption condition zeroed."""

    zero_caption_flow: bool = False
    zero_caption_tex_fg: bool = False
    zero_caption_tex_bg: bool = False


@dataclass
class Batch:
    video: torch.Tensor  # [B, 3, T, H, W]
    flow: torch.Tensor   # [B, 2, T, H, W]
    phi: torch.Tensor    # [B, E]


@dataclass
class LossRecord:
    iteration: int
    ld_flow: float | None
    lg_flow: float | None
    ld_tex: float
    lg_tex: float
    lr: float
    aux: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        def fmt(v):
            return "nan" if v is None else f"{v:.10g}"

        return (f"{self.iteration},{fmt(self.ld_flow)},{fmt(self.lg_flow)},"
                f"{fmt(self.ld_tex)},{fmt(self.lg_tex)},{fmt(self.lr)}")


@dataclass
class TrainState:
    model: str  # "cftgan" | "cvgan"
    k: int
    modules: dict[str, nn.Module]
    optimizers: dict[str, torch.optim.Adam]
    torch_rng: torch.Generator
    data_rng: np.random.Generator
    ablation: AblationFlags = AblationFlags()


_OPT_GROUPS = {
    "cftgan": {
        "d_flow": ("d_flow",),
        "d_tex": ("d_tex",),
        "g_flow": ("g_flow", "ca_flow"),
        "g_tex": ("g_tex", "ca_tex"),
    },
    "cvgan": {
        "d": ("d",),
        "g": ("g", "ca"),
    },
}


def _group_params(state: TrainState, group: str) -> list[torch.Tensor]:
    params: list[torch.Tensor] = []
    for name in _OPT_GROUPS[state.model][group]:
        params.extend(state.modules[name].parameters())
    return params


def make_state(cfg: RunConfig, model: str = "cftgan",
               ablation: AblationFlags = AblationFlags()) -> TrainState:
    if model not in _OPT_GROUPS:
        raise ValueError(f"unknown model {model!r}")
    torch.manual_seed(cfg.seed)
    if model == "cftgan":
        modules = {
            "g_flow": FlowGenerator(cfg),
            "d_flow": FlowDiscriminator(cfg),
            "g_tex": TextureGenerator(cfg),
            "d_tex": TextureDiscriminator(cfg),
            "ca_flow": ConditionAugmenter(cfg.embed_dim, cfg.cond_dim),
            "ca_tex": ConditionAugmenter(cfg.embed_dim, cfg.cond_dim),
        }
    else:
        modules = {
            "g": CvganGenerator(cfg),
            "d": CvganDiscriminator(cfg),
            "ca": ConditionAugmenter(cfg.embed_dim, cfg.cond_dim),
        }
    state = TrainState(
        model=model,
        k=0,
        modules=modules,
        optimizers={},
        torch_rng=torch.Generator().manual_seed(cfg.seed * 7919 + 13),
        data_rng=np.random.default_rng((cfg.seed, 0xDA7A)),
        ablation=ablation,
    )
    for group in _OPT_GROUPS[model]:
        state.optimizers[group] = torch.optim.Adam(
            _group_params(state, group), lr=cfg.lr0,
            betas=(cfg.beta1, cfg.beta2))
    return state


def _randn(state: TrainState, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=state.torch_rng)


def _condition(state: TrainState, ca_name: str, phi: torch.Tensor,
               zero: bool) -> torch.Tensor:
    c = state.modules[ca_name](phi, _randn(state, phi.shape[0], state.modules[ca_name].mu_map.out_features))
    return torch.zeros_like(c) if zero else c


def _check_finite(value: torch.Tensor, name: str) -> float:
    scalar = float(value.detach())
    if not math.isfinite(scalar):
        raise NonFiniteLoss(f"{name} is {scalar}")
    return scalar


def _zero_grads(state: TrainState) -> None:
    for module in state.modules.values():
        module.zero_grad(set_to_none=True)


def _apply(state: TrainState, group: str, loss: torch.Tensor, lr: float,
           coverage_out: dict | None = None) -> None:
    _zero_grads(state)
    loss.backward()
    if coverage_out is not None:
        coverage_out[group] = gradient_coverage(
            *[state.modules[n] for n in _OPT_GROUPS[state.model][group]])
    opt = state.optimizers[group]
    for pg in opt.param_groups:
        pg["lr"] = lr
    opt.step()


def gradient_coverage(*modules: nn.Module) -> float:
    """Fraction of leading-dim parameter slices carrying nonzero grad."""
    covered = 0
    total = 0
    for module in modules:
        for p in module.parameters():
            n = p.shape[0] if p.ndim > 0 else 1
            total += n
            if p.grad is None:
                continue
            g = p.grad.reshape(n, -1)
            covered += int((g.abs().sum(dim=1) > 0).sum())
    return covered / total if total else 1.0


def _mask_l1(cfg: RunConfig, masks: list[torch.Tensor]) -> torch.Tensor:
    if not (cfg.mask_l1 and masks):
        return torch.zeros(())
    return cfg.lambda_mask * sum(m.abs().mean() for m in masks) / len(masks)


def _phase_d_flow(state, batch, cfg, lr, coverage_out=None) -> float:
    d_flow = state.modules["d_flow"]
    with torch.no_grad():
        c = _condition(state, "ca_flow", batch.phi, state.ablation.zero_caption_flow)
        fake = state.modules["g_flow"](_randn(state, batch.phi.shape[0], cfg.noise_dim), c).flow
    value = loss_d_flow(d_flow(batch.flow, batch.phi), d_flow(fake, batch.phi),
                        cfg.log_clamp_eps)
    scalar = _check_finite(value, "ld_flow")
    _apply(state, "d_flow", -value, lr, coverage_out)
    return scalar


def _phase_d_tex(state, batch, cfg, lr, coverage_out=None) -> float:
    w = schedule_weight(state.k, cfg.total_iters)
    d_tex = state.modules["d_tex"]
    b = batch.phi.shape[0]
    p_rf = p_gf = None
    with torch.no_grad():
        if w < 1.0:
            c1 = _condition(state, "ca_tex", batch.phi, state.ablation.zero_caption_tex_fg)
            v_rf = state.modules["g_tex"](
                _randn(state, b, cfg.noise_dim), c1, batch.flow,
                zero_caption_fg=state.ablation.zero_caption_tex_fg,
                zero_caption_bg=state.ablation.zero_caption_tex_bg).video
        if w > 0.0:
            cf = _condition(state, "ca_flow", batch.phi, state.ablation.zero_caption_flow)
            fake_flow = state.modules["g_flow"](_randn(state, b, cfg.noise_dim), cf).flow
            c2 = _condition(state, "ca_tex", batch.phi, state.ablation.zero_caption_tex_fg)
            v_gf = state.modules["g_tex"](
                _randn(state, b, cfg.noise_dim), c2, fake_flow,
                zero_caption_fg=state.ablation.zero_caption_tex_fg,
                zero_caption_bg=state.ablation.zero_caption_tex_bg).video
    p_real = d_tex(batch.video, batch.flow, batch.phi)
    if w < 1.0:
        p_rf = d_tex(v_rf, batch.flow, batch.phi)
    if w > 0.0:
        p_gf = d_tex(v_gf, fake_flow, batch.phi)
    value = loss_d_tex(p_real, p_rf, p_gf, state.k, cfg.total_iters, cfg.log_clamp_eps)
    scalar = _check_finite(value, "ld_tex")
    _apply(state, "d_tex", -value, lr, coverage_out)
    return scalar


def _phase_g_flow(state, batch, cfg, lr, coverage_out=None) -> tuple[float, dict]:
    w = schedule_weight(state.k, cfg.total_iters)
    b = batch.phi.shape[0]
    c = _condition(state, "ca_flow", batch.phi, state.ablation.zero_caption_flow)
    gen = state.modules["g_flow"](_randn(state, b, cfg.noise_dim), c)
    p_fake = state.modules["d_flow"](gen.flow, batch.phi)
    p_feedback = None
    if w > 0.0:
        # texture stage stays frozen here: gradients flow through it into
        # the generated flow but only the flow generator's optimizer steps
        ct = _condition(state, "ca_tex", batch.phi, state.ablation.zero_caption_tex_fg)
        video = state.modules["g_tex"](
            _randn(state, b, cfg.noise_dim), ct, gen.flow,
            zero_caption_fg=state.ablation.zero_caption_tex_fg,
            zero_caption_bg=state.ablation.zero_caption_tex_bg).video
        p_feedback = state.modules["d_tex"](video, gen.flow, batch.phi)
    value = loss_g_flow(p_fake, p_feedback, state.k, cfg.total_iters,
                        cfg.log_clamp_eps, cfg.non_saturating)
    scalar = _check_finite(value, "lg_flow")
    l1 = _mask_l1(cfg, [gen.mask])
    aux = {"mask_l1_flow": float(l1.detach())}
    total = value + l1
    if cfg.ca_kl_weight > 0.0 and not state.ablation.zero_caption_flow:
        kl = state.modules["ca_flow"].kl_to_standard(batch.phi)
        aux["kl_flow"] = float(kl.detach())
        total = total + cfg.ca_kl_weight * kl
    _apply(state, "g_flow", total, lr, coverage_out)
    return scalar, aux


def _phase_g_tex(state, batch, cfg, lr, coverage_out=None) -> tuple[float, dict]:
    w = schedule_weight(state.k, cfg.total_iters)
    b = batch.phi.shape[0]
    masks: list[torch.Tensor] = []
    p_rf = p_gf = None
    if w < 1.0:
        c1 = _condition(state, "ca_tex", batch.phi, state.ablation.zero_caption_tex_fg)
        out1 = state.modules["g_tex"](
            _randn(state, b, cfg.noise_dim), c1, batch.flow,
            zero_caption_fg=state.ablation.zero_caption_tex_fg,
            zero_caption_bg=state.ablation.zero_caption_tex_bg)
        masks.append(out1.mask)
        p_rf = state.modules["d_tex"](out1.video, batch.flow, batch.phi)
    if w > 0.0:
        with torch.no_grad():
            cf = _condition(state, "ca_flow", batch.phi, state.ablation.zero_caption_flow)
            fake_flow = state.modules["g_flow"](_randn(state, b, cfg.noise_dim), cf).flow
        c2 = _condition(state, "ca_tex", batch.phi, state.ablation.zero_caption_tex_fg)
        out2 = state.modules["g_tex"](
            _randn(state, b, cfg.noise_dim), c2, fake_flow,
            zero_caption_fg=state.ablation.zero_caption_tex_fg,
            zero_caption_bg=state.ablation.zero_caption_tex_bg)
        masks.append(out2.mask)
        p_gf = state.modules["d_tex"](out2.video, fake_flow, batch.phi)
    value = loss_g_tex(p_rf, p_gf, state.k, cfg.total_iters,
                       cfg.log_clamp_eps, cfg.non_saturating)
    scalar = _check_finite(value, "lg_tex")
    l1 = _mask_l1(cfg, masks)
    aux = {"mask_l1_tex": float(l1.detach())}
    total = value + l1
    if cfg.ca_kl_weight > 0.0 and not state.ablation.zero_caption_tex_fg:
        kl = state.modules["ca_tex"].kl_to_standard(batch.phi)
        aux["kl_tex"] = float(kl.detach())
        total = total + cfg.ca_kl_weight * kl
    _apply(state, "g_tex", total, lr, coverage_out)
    return scalar, aux


def _phase_d_cvgan(state, batch, cfg, lr, coverage_out=None) -> float:
    d = state.modules["d"]
    with torch.no_grad():
        c = _condition(state, "ca", batch.phi, False)
        fake = state.modules["g"](_randn(state, batch.phi.shape[0], cfg.noise_dim), c).video
    value = loss_d_flow(d(batch.video, batch.phi), d(fake, batch.phi),
                        cfg.log_clamp_eps)
    scalar = _check_finite(value, "ld_cvgan")
    _apply(state, "d", -value, lr, coverage_out)
    return scalar


def _phase_g_cvgan(state, batch, cfg, lr, coverage_out=None) -> tuple[float, dict]:
    c = _condition(state, "ca", batch.phi, False)
    out = state.modules["g"](_randn(state, batch.phi.shape[0], cfg.noise_dim), c)
    p = state.modules["d"](out.video, batch.phi)
    if cfg.non_saturating:
        value = -_log(p, cfg.log_clamp_eps).mean()
    else:
        value = _log(1.0 - p, cfg.log_clamp_eps).mean()
    scalar = _check_finite(value, "lg_cvgan")
    l1 = _mask_l1(cfg, [out.mask])
    aux = {"mask_l1": float(l1.detach())}
    total = value + l1
    if cfg.ca_kl_weight > 0.0:
        kl = state.modules["ca"].kl_to_standard(batch.phi)
        aux["kl"] = float(kl.detach())
        total = total + cfg.ca_kl_weight * kl
    _apply(state, "g", total, lr, coverage_out)
    return scalar, aux


def _snapshot(state: TrainState) -> dict:
    return {
        "modules": {n: {k: v.detach().clone() for k, v in m.state_dict().items()}
                    for n, m in state.modules.items()},
        "optim": {n: {i: {k: (v.detach().clone() if torch.is_tensor(v) else v)
                          for k, v in opt.state[p].items()}
                      for i, p in enumerate(_group_params(state, n)) if p in opt.state}
                  for n, opt in state.optimizers.items()},
        "torch_rng": state.torch_rng.get_state().clone(),
    }


def _restore(state: TrainState, snap: dict) -> None:
    for name, module in state.modules.items():
        module.load_state_dict(snap["modules"][name])
    for name, opt in state.optimizers.items():
        params = _group_params(state, name)
        opt.state.clear()
        for i, entry in snap["optim"][name].items():
            opt.state[params[i]] = {k: (v.clone() if torch.is_tensor(v) else v)
                                    for k, v in entry.items()}
    state.torch_rng.set_state(snap["torch_rng"])


def train_step(batch: Batch, state: TrainState, cfg: RunConfig,
               coverage_out: dict | None = None) -> LossRecord:
    """One full update cycle; on a non-finite loss the state is rolled back."""
    if state.k >= cfg.total_iters:
        raise InvalidIteration(f"iteration {state.k} >= total {cfg.total_iters}")
    lr = lr_at(state.k, cfg)
    snap = _snapshot(state)
    try:
        if state.model == "cftgan":
            ld_flow = _phase_d_flow(state, batch, cfg, lr, coverage_out)
            ld_tex = _phase_d_tex(state, batch, cfg, lr, coverage_out)
            lg_flow, aux_f = _phase_g_flow(state, batch, cfg, lr, coverage_out)
            lg_tex, aux_t = _phase_g_tex(state, batch, cfg, lr, coverage_out)
            record = LossRecord(state.k, ld_flow, lg_flow, ld_tex, lg_tex, lr,
                                {**aux_f, **aux_t})
        else:
            ld = _phase_d_cvgan(state, batch, cfg, lr, coverage_out)
            lg, aux = _phase_g_cvgan(state, batch, cfg, lr, coverage_out)
            record = LossRecord(state.k, None, None, ld, lg, lr, aux)
    except NonFiniteLoss:
        _restore(state, snap)
        raise
    state.k += 1
    return record


def make_batch(clips: list[ClipSample], phi_map: dict[str, np.ndarray]) -> Batch:
    return Batch(
        video=torch.from_numpy(np.stack([c.video for c in clips])),
        flow=torch.from_numpy(np.stack([c.flow for c in clips])),
        phi=torch.from_numpy(np.stack([phi_map[c.caption] for c in clips])),
    )


def sample_training_batch(clips: list[ClipSample], phi_map: dict[str, np.ndarray],
                          state: TrainState, cfg: RunConfig) -> Batch:
    idx = state.data_rng.integers(0, len(clips), size=cfg.batch_size)
    augmented = [augment_clip(clips[i], state.data_rng, out_size=cfg.height,
                              out_len=cfg.frames) for i in idx]
    return make_batch(augmented, phi_map)


def save_checkpoint(state: TrainState, path, cfg: RunConfig) -> Path:
    # float32 tensors go in the payload; integer counters (batch-norm
    # batch counts, optimizer steps) and rng states go in the manifest
    arrays: dict[str, np.ndarray] = {}
    int_entries: dict[str, int] = {}
    steps: dict[str, list[float]] = {}
    for name, module in state.modules.items():
        for key, value in module.state_dict().items():
            tensor = value.detach().cpu()
            if tensor.dtype == torch.int64:
                int_entries[f"net.{name}.{key}"] = int(tensor)
            else:
                arrays[f"net.{name}.{key}"] = tensor.numpy()
    for name, opt in state.optimizers.items():
        steps[name] = []
        for i, p in enumerate(_group_params(state, name)):
            st = opt.state.get(p)
            if st is None:
                steps[name].append(-1.0)
                continue
            steps[name].append(float(st["step"]))
            arrays[f"opt.{name}.{i}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
            arrays[f"opt.{name}.{i}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
    meta = {
        "model": state.model,
        "k": state.k,
        "arch_hash": cfg.arch_hash(),
        "steps": steps,
        "int_entries": int_entries,
        "torch_rng": base64.b64encode(
            state.torch_rng.get_state().numpy().tobytes()).decode("ascii"),
        "data_rng": state.data_rng.bit_generator.state,
        "ablation": dataclasses.asdict(state.ablation),
    }
    return write_container(path, CHECKPOINT_MAGIC, arrays, meta)


def load_checkpoint(path, cfg: RunConfig) -> TrainState:
    arrays, meta, _ = read_container(path, CHECKPOINT_MAGIC)
    if meta.get("arch_hash") != cfg.arch_hash():
        raise CorruptCheckpoint(f"{path}: config hash mismatch")
    state = make_state(cfg, meta["model"], AblationFlags(**meta.get("ablation", {})))
    state.k = int(meta["k"])
    try:
        int_entries = meta.get("int_entries", {})
        for name, module in state.modules.items():
            prefix = f"net.{name}."
            sd = {key[len(prefix):]: torch.from_numpy(arr.copy())
                  for key, arr in arrays.items() if key.startswith(prefix)}
            sd.update({key[len(prefix):]: torch.tensor(value, dtype=torch.int64)
                       for key, value in int_entries.items()
                       if key.startswith(prefix)})
            module.load_state_dict(sd, strict=True)
        for name, opt in state.optimizers.items():
            params = _group_params(state, name)
            if len(meta["steps"][name]) != len(params):
                raise CorruptCheckpoint(f"{path}: optimizer {name} size mismatch")
            for i, p in enumerate(params):
                step = meta["steps"][name][i]
                if step < 0:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(float(step)),
                    "exp_avg": torch.from_numpy(arrays[f"opt.{name}.{i}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.{i}.exp_avg_sq"].copy()),
                }
        rng_bytes = np.frombuffer(base64.b64decode(meta["torch_rng"]), dtype=np.uint8)
        state.torch_rng.set_state(torch.from_numpy(rng_bytes.copy()))
        state.data_rng.bit_generator.state = meta["data_rng"]
    except (KeyError, RuntimeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    return state


def ensure_caption_encoder(captions: list[str], cfg: RunConfig, path) -> CaptionEncoder:
    """Fit-or-load the caption artifacts, always reading back from disk.

    The artifact file is the single source of truth: a fresh fit is saved
    and reloaded so resumed runs see bit-identical mixture/PCA values.
    """
    path = Path(path)
    if not path.exists():
        CaptionEncoder.fit_from_config(sorted(set(captions)), cfg).save(path)
    return CaptionEncoder.load(path)


def encode_captions(encoder: CaptionEncoder, captions: list[str]) -> dict[str, np.ndarray]:
    return {c: encoder.encode(c).astype(np.float32) for c in set(captions)}


def run_training(dataset: DatasetIndex, cfg: RunConfig, out_dir,
                 model: str = "cftgan", resume=None, iters: int | None = None,
                 ablation: AblationFlags = AblationFlags(),
                 encoder: CaptionEncoder | None = None) -> tuple[TrainState, Path]:
    """Train for ``iters`` (default: up to cfg.total_iters) iterations.

    Appends one CSV row per iteration to ``loss_log.csv`` and writes
    ``checkpoint.cftk`` every ``cfg.checkpoint_every`` iterations and at
    the end. ``resume`` may name a checkpoint file to continue from.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if encoder is None:
        encoder = ensure_caption_encoder(dataset.captions(), cfg,
                                         out_dir / "captions.cftc")
    phi_map = encode_captions(encoder, dataset.captions())
    clips = [dataset.load(i) for i in range(len(dataset))]

    if resume is not None:
        state = load_checkpoint(resume, cfg)
    else:
        state = make_state(cfg, model, ablation)

    target = cfg.total_iters if iters is None else min(state.k + iters, cfg.total_iters)
    csv_path = out_dir / "loss_log.csv"
    ckpt_path = out_dir / "checkpoint.cftk"
    new_log = not csv_path.exists()
    with open(csv_path, "a", encoding="utf-8") as log:
        if new_log:
            log.write(LOSS_CSV_HEADER + "\n")
        while state.k < target:
            batch = sample_training_batch(clips, phi_map, state, cfg)
            record = train_step(batch, state, cfg)
            log.write(record.csv_row() + "\n")
            if state.k % cfg.checkpoint_every == 0 or state.k == target:
                save_checkpoint(state, ckpt_path, cfg)
    save_checkpoint(state, ckpt_path, cfg)
    return state, csv_path


def generate_sample(state: TrainState, phi: np.ndarray, cfg: RunConfig,
                    rng: torch.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Run the full generation path in eval mode; returns (video, flow).

    For the baseline model the returned flow is all zeros (it has no flow
    stage).
    """
    modes = {n: m.training for n, m in state.modules.items()}
    for m in state.modules.values():
        m.eval()
    try:
        with torch.no_grad():
            phi_t = torch.from_numpy(np.asarray(phi, dtype=np.float32)).unsqueeze(0)
            if state.model == "cftgan":
                eps_f = torch.randn(1, cfg.cond_dim, generator=rng)
                c_f = state.modules["ca_flow"](phi_t, eps_f)
                if state.ablation.zero_caption_flow:
                    c_f = torch.zeros_like(c_f)
                z_f = torch.randn(1, cfg.noise_dim, generator=rng)
                flow = state.modules["g_flow"](z_f, c_f).flow
                eps_t = torch.randn(1, cfg.cond_dim, generator=rng)
                c_t = state.modules["ca_tex"](phi_t, eps_t)
                z_t = torch.randn(1, cfg.noise_dim, generator=rng)
                video = state.modules["g_tex"](
                    z_t, c_t, flow,
                    zero_caption_fg=state.ablation.zero_caption_tex_fg,
                    zero_caption_bg=state.ablation.zero_caption_tex_bg).video
            else:
                eps = torch.randn(1, cfg.cond_dim, generator=rng)
                c = state.modules["ca"](phi_t, eps)
                z = torch.randn(1, cfg.noise_dim, generator=rng)
                video = state.modules["g"](z, c).video
                flow = torch.zeros(1, 2, cfg.frames, cfg.height, cfg.width)
        return (video.squeeze(0).numpy().astype(np.float32),
                flow.squeeze(0).numpy().astype(np.float32))
    finally:
        for n, m in state.modules.items():
            m.train(modes[n])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def is_finite_record(record: LossRecord) -> bool:
    values = [record.ld_tex, record.lg_tex, record.lr]
    if record.ld_flow is not None:
        values += [record.ld_flow, record.lg_flow]
    return all(math.isfinite(v) for v in values)
