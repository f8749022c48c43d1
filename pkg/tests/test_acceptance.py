"""Acceptance suite: one test per criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the PASS/FAIL
lines as the criteria execute. The conditioning-sanity and ablation
criteria train real (toy-scale) models and dominate the runtime.
"""
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from cftgan import config, data, evaluation, training
from cftgan.blocks import composite, frames_identical
from cftgan.captions import (
    GAUSSIAN,
    CaptionEncoder,
    ConditionAugmenter,
    HybridMixture,
    fisher_vector,
    fit_hybrid_mixture,
    pca_fit,
    pca_project,
)
from cftgan.cli import main as cli_main
from cftgan.flow_gan import FlowGenerator
from cftgan.texture_gan import TextureGenerator
from cftgan.training import (
    load_checkpoint,
    loss_d_flow,
    loss_d_tex,
    loss_g_flow,
    loss_g_tex,
    lr_at,
    make_state,
    save_checkpoint,
    schedule_weight,
    train_step,
)
from conftest import mini_config, spread_specs

torch.set_num_threads(1)

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(number: int, name: str):
    try:
        yield
    except BaseException:
        print(f"\n[acceptance] criterion {number} ({name}): FAIL")
        raise
    print(f"\n[acceptance] criterion {number} ({name}): PASS")


def _conditioning_clips(cfg):
    rng = np.random.default_rng(1234)
    return [data.generate_synthetic_sample(s, rng) for s in spread_specs(cfg)]


def _conditioning_seed_run(seed: int) -> bool:
    """Train the toy two-stage model on 8 captioned clips for one seed and
    report whether same-caption distance beats other-caption distance."""
    torch.set_num_threads(1)
    iters = 500
    cfg = dataclasses.replace(config.preset("toy"), embed_dim=6, batch_size=8,
                              total_iters=iters, seed=seed)
    clips = _conditioning_clips(cfg)
    encoder = CaptionEncoder.fit_from_config([c.caption for c in clips], cfg)
    phi_map = training.encode_captions(encoder, [c.caption for c in clips])
    state = make_state(cfg, "cftgan")
    for _ in range(iters):
        batch = training.sample_training_batch(clips, phi_map, state, cfg)
        train_step(batch, state, cfg)
    self_d, cross_d = [], []
    for i, clip in enumerate(clips):
        gen_rng = torch.Generator().manual_seed(seed * 100 + i)
        video, _ = training.generate_sample(state, phi_map[clip.caption], cfg, gen_rng)
        for j, other in enumerate(clips):
            (self_d if i == j else cross_d).append(evaluation.rmsd(video, other.video))
    return float(np.mean(self_d)) < float(np.mean(cross_d))


def test_criterion_1_compositing_oracles():
    with criterion(1, "compositing oracles"):
        rng = np.random.default_rng(0)
        for case in range(100):
            shape = (1, 1, 2, 3, 3)
            m = rng.random(shape).astype(np.float32)
            ch = 2 if case % 2 == 0 else 3
            f = rng.normal(size=(1, ch, 2, 3, 3)).astype(np.float32)
            b = rng.normal(size=(1, ch, 2, 3, 3)).astype(np.float32)
            mt, ft, bt = map(torch.from_numpy, (m, f, b))

            flow_style = composite(mt, ft).numpy()        # zero background
            full_style = composite(mt, ft, bt).numpy()    # foreground over background
            for idx in np.ndindex(1, ch, 2, 3, 3):
                _, c, t, y, x = idx
                mv = m[0, 0, t, y, x]
                assert abs(flow_style[idx] - mv * f[idx]) < 1e-7
                assert abs(full_style[idx] - (mv * f[idx] + (1 - mv) * b[idx])) < 1e-7

            ones, zeros = torch.ones_like(mt), torch.zeros_like(mt)
            assert torch.equal(composite(ones, ft, bt), ft)
            assert torch.equal(composite(zeros, ft, bt), bt)
            assert torch.equal(composite(zeros, ft), torch.zeros_like(ft))


def test_criterion_2_structural_invariants():
    with criterion(2, "structural invariants"):
        cfg = mini_config()
        torch.manual_seed(0)
        flow_gen = FlowGenerator(cfg).eval()
        tex_gen = TextureGenerator(cfg).eval()
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for _ in range(100):
                z = torch.randn(1, cfg.noise_dim, generator=g)
                c = torch.randn(1, cfg.cond_dim, generator=g)
                fout = flow_gen(z, c)
                assert fout.mask.min() >= 0.0 and fout.mask.max() <= 1.0
                assert torch.all(fout.flow[fout.mask.expand_as(fout.flow) == 0.0] == 0.0)
                tout = tex_gen(z, c, fout.flow)
                assert tout.mask.min() >= 0.0 and tout.mask.max() <= 1.0
                assert tout.video.min() >= -1.0 and tout.video.max() <= 1.0
                assert frames_identical(tout.background)


def test_criterion_3_caption_pipeline():
    with criterion(3, "caption pipeline"):
        # Fisher vector dimensionality at the reference configuration
        rng = np.random.default_rng(0)
        w = rng.random(30) + 0.5
        mix300 = HybridMixture(weights=w / w.sum(),
                               means=rng.normal(size=(30, 300)),
                               scales=rng.random((30, 300)) + 0.5,
                               families=np.full(30, GAUSSIAN, dtype=np.int64))
        fv = fisher_vector(rng.normal(size=(5, 300)), mix300)
        assert fv.shape == (2 * 300 * 30,) == (18000,)

        # token exactly at a center: that center's mean block vanishes
        fv_at_center = fisher_vector(mix300.means[0:1], mix300)
        assert np.allclose(fv_at_center[:300], 0.0, atol=1e-12)

        # EM log-likelihood monotone
        corpus = [rng.normal(size=(40, 6)) + i for i in range(3)]
        mix = fit_hybrid_mixture(corpus, 3, seed=0)
        assert np.all(np.diff(mix.history) >= -1e-9)

        # PCA against the covariance eigenvector oracle
        x = rng.normal(size=(12, 3))
        proj = pca_fit(x, 2)
        centered = x - x.mean(axis=0)
        evals, evecs = np.linalg.eigh(centered.T @ centered / len(x))
        order = np.argsort(evals)[::-1]
        for row, col in enumerate(order[:2]):
            oracle = evecs[:, col]
            err = min(np.abs(proj.components[row] - oracle).max(),
                      np.abs(proj.components[row] + oracle).max())
            assert err < 1e-8
        coords = pca_project(x[0], proj)
        assert coords.shape == (2,)

        # conditioning augmentation: zero-noise identity and MC moments
        torch.manual_seed(0)
        ca = ConditionAugmenter(6, 8)
        phi = torch.randn(1, 6)
        mu, sigma = ca.moments(phi)
        assert torch.equal(ca(phi, torch.zeros(1, 8)), mu)
        gen = torch.Generator().manual_seed(7)
        eps = torch.randn(10_000, 8, generator=gen)
        samples = ca(phi.expand(10_000, -1), eps)
        se = sigma[0] / math.sqrt(10_000)
        assert torch.all((samples.mean(0) - mu[0]).abs() <= 4.0 * se)
        assert torch.all((samples.std(0) - sigma[0]).abs() / sigma[0] <= 0.05)


def test_criterion_4_loss_and_schedule_arithmetic():
    with criterion(4, "loss/schedule arithmetic"):
        t = torch.tensor
        k, total = 30, 100
        w = k / total
        pr, pf = [0.8, 0.6], [0.3, 0.2]
        pt_real, pt_rf, pt_gf = [0.7, 0.5], [0.45, 0.35], [0.25, 0.15]

        def mlog(vals):
            return sum(math.log(v) for v in vals) / len(vals)

        assert float(loss_d_flow(t(pr), t(pf))) == pytest.approx(
            mlog(pr) + mlog([1 - v for v in pf]), abs=1e-6)
        assert float(loss_g_flow(t(pf), t(pt_gf), k, total)) == pytest.approx(
            mlog([1 - v for v in pf]) + w * mlog([1 - v for v in pt_gf]), abs=1e-6)
        assert float(loss_d_tex(t(pt_real), t(pt_rf), t(pt_gf), k, total)) == pytest.approx(
            mlog(pt_real) + (1 - w) * mlog([1 - v for v in pt_rf])
            + w * mlog([1 - v for v in pt_gf]), abs=1e-6)
        assert float(loss_g_tex(t(pt_rf), t(pt_gf), k, total)) == pytest.approx(
            (1 - w) * mlog([1 - v for v in pt_rf])
            + w * mlog([1 - v for v in pt_gf]), abs=1e-6)

        half = torch.full((4,), 0.5)
        assert float(loss_d_flow(half, half)) == pytest.approx(2 * math.log(0.5), abs=1e-6)

        assert schedule_weight(0, 60000) == 0.0
        assert schedule_weight(60000, 60000) == 1.0
        assert schedule_weight(30000, 60000) == 0.5
        paper = config.preset("paper")
        assert lr_at(0, paper) == pytest.approx(0.0002)
        assert lr_at(10000, paper) == pytest.approx(0.0001)
        assert lr_at(25000, paper) == pytest.approx(0.00005)


def test_criterion_5_gradient_coverage():
    with criterion(5, "gradient coverage"):
        cfg = dataclasses.replace(config.preset("toy"), embed_dim=6,
                                  batch_size=4, total_iters=100)
        clips = _conditioning_clips(cfg)
        encoder = CaptionEncoder.fit_from_config([c.caption for c in clips], cfg)
        phi_map = training.encode_captions(encoder, [c.caption for c in clips])
        state = make_state(cfg, "cftgan")
        coverage = {}
        batch = training.sample_training_batch(clips, phi_map, state, cfg)
        record = train_step(batch, state, cfg, coverage_out=coverage)
        assert training.is_finite_record(record)
        for group in ("d_flow", "d_tex", "g_flow", "g_tex"):
            assert coverage[group] >= 0.99, f"{group}: {coverage[group]:.4f}"


def test_criterion_6_determinism_and_resume(tmp_path):
    with criterion(6, "determinism and resume"):
        cfg = dataclasses.replace(config.preset("toy"), embed_dim=6,
                                  batch_size=4, total_iters=50)
        clips = _conditioning_clips(cfg)
        encoder = CaptionEncoder.fit_from_config([c.caption for c in clips], cfg)
        phi_map = training.encode_captions(encoder, [c.caption for c in clips])

        def ten_steps():
            state = make_state(cfg, "cftgan")
            rows = []
            for _ in range(10):
                batch = training.sample_training_batch(clips, phi_map, state, cfg)
                rows.append(train_step(batch, state, cfg).csv_row())
            return state, rows

        state_a, rows_a = ten_steps()
        _, rows_b = ten_steps()
        assert rows_a == rows_b

        state_c = make_state(cfg, "cftgan")
        rows_c = []
        for _ in range(5):
            batch = training.sample_training_batch(clips, phi_map, state_c, cfg)
            rows_c.append(train_step(batch, state_c, cfg).csv_row())
        path = tmp_path / "mid.cftk"
        save_checkpoint(state_c, path, cfg)
        resumed = load_checkpoint(path, cfg)
        for _ in range(5):
            batch = training.sample_training_batch(clips, phi_map, resumed, cfg)
            rows_c.append(train_step(batch, resumed, cfg).csv_row())
        assert rows_c == rows_a
        for name, module in state_a.modules.items():
            for key, value in module.state_dict().items():
                assert torch.equal(resumed.modules[name].state_dict()[key], value)


@pytest.mark.slow
def test_criterion_7_conditioning_sanity():
    with criterion(7, "conditioning sanity"):
        with ProcessPoolExecutor(max_workers=2) as pool:
            outcomes = list(pool.map(_conditioning_seed_run, range(5)))
        passed = sum(outcomes)
        print(f"\n[acceptance] conditioning separation per seed: {outcomes}")
        assert passed >= 4, f"only {passed}/5 seeds separate self from cross"


@pytest.mark.slow
def test_criterion_8_ablation_protocol_shape(tmp_path):
    with criterion(8, "ablation protocol shape"):
        # metric verified against a brute-force oracle and the analytic case
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, size=(3, 2, 2, 2))
        b = rng.uniform(-1, 1, size=(3, 2, 2, 2))
        total = sum(((a[c, t, y, x] + 1) * 127.5 - (b[c, t, y, x] + 1) * 127.5) ** 2
                    for c in range(3) for t in range(2)
                    for y in range(2) for x in range(2))
        assert evaluation.rmsd(a, b) == pytest.approx(math.sqrt(total / 24), abs=1e-9)
        lo = np.full((3, 4, 6, 6), 100 / 127.5 - 1.0)
        hi = np.full((3, 4, 6, 6), 110 / 127.5 - 1.0)
        assert evaluation.rmsd(lo, hi) == pytest.approx(10.0, abs=1e-9)

        # the six-configuration grid through the CLI at toy scale,
        # 50-caption x 5-repeat protocol scaled down by flags
        corpus = tmp_path / "corpus"
        cfg = config.preset("toy")
        data.write_corpus(corpus, spread_specs(cfg), seed=1234)
        out = tmp_path / "ablation"
        rc = cli_main([
            "ablate", "--configs", "a,b,c,d,e,f", "--data", str(corpus),
            "--out", str(out), "--budget", "40", "--captions", "8",
            "--repeats", "2", "--seed", "0",
            "--set", "embed_dim=6", "--set", "total_iters=40",
            "--set", "batch_size=4", "--set", "checkpoint_every=40",
        ])
        assert rc == 0
        lines = (out / "ablation_report.csv").read_text().strip().splitlines()
        assert lines[0] == "config,mean_rmsd,std_rmsd,n_captions,n_repeats"
        assert len(lines) == 7
        tags = []
        for line in lines[1:]:
            tag, mean, std, ncap, nrep = line.split(",")
            tags.append(tag)
            assert math.isfinite(float(mean)) and float(mean) >= 0
            assert math.isfinite(float(std))
            assert (int(ncap), int(nrep)) == (8, 2)
        assert tags == list("abcdef")


def test_criterion_9_data_pipeline():
    with criterion(9, "data pipeline"):
        from test_data import warp_error

        rng = np.random.default_rng(4)
        paper_clip = data.generate_synthetic_sample(
            data.SyntheticSpec(canvas=76, frames=40, shape="square",
                               shape_color="red", bg_color="black",
                               motion="right"), rng)
        out = data.augment_clip(paper_clip, np.random.default_rng(0),
                                out_size=64, out_len=32)
        assert out.video.shape == (3, 32, 64, 64)
        assert out.flow.shape == (2, 32, 64, 64)

        v1, f1 = data.flip_horizontal(paper_clip.video, paper_clip.flow)
        v2, f2 = data.flip_horizontal(v1, f1)
        assert np.array_equal(v2, paper_clip.video)
        assert np.array_equal(f2, paper_clip.flow)

        canvas = 19
        bw, _ = data.shape_bbox("square", canvas)
        x0, y0 = 2, 5
        right = data.generate_synthetic_sample(
            data.SyntheticSpec(canvas, 10, "square", "red", "black", "right",
                               origin=(x0, y0)), np.random.default_rng(0))
        mirrored = data.generate_synthetic_sample(
            data.SyntheticSpec(canvas, 10, "square", "red", "black", "left",
                               origin=(canvas - bw - x0, y0)),
            np.random.default_rng(0))
        fv, ff = data.flip_horizontal(right.video, right.flow)
        assert np.array_equal(fv, mirrored.video)
        assert np.array_equal(ff, mirrored.flow)
        sup = ff[0, 0] != 0
        assert np.all(ff[0, 0][sup] == -1.0)

        for motion in data.GRID_MOTIONS:
            clip = data.generate_synthetic_sample(
                data.SyntheticSpec(canvas, 10, "square", "red", "black", motion),
                np.random.default_rng(1))
            assert warp_error(clip.video, clip.flow, exclude_radius=2) < 0.02
