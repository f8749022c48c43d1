import logging

import numpy as np
import pytest
from scipy.ndimage import binary_dilation, binary_erosion

from cftgan import data
from cftgan.errors import (
    EmptyDataset,
    ShapeOutOfBounds,
    TooShort,
    TooSmall,
)


def _spec(**overrides):
    base = dict(canvas=19, frames=10, shape="square", shape_color="red",
                bg_color="black", motion="right", speed=1.0)
    base.update(overrides)
    return data.SyntheticSpec(**base)


def warp_error(video, flow, exclude_radius):
    """Backward-warp reconstruction error, skipping the moving boundary band."""
    _, t, h, w = video.shape
    errors = []
    for i in range(t - 1):
        u, v = flow[0, i], flow[1, i]
        moving = (np.abs(u) + np.abs(v)) > 0
        band = np.zeros_like(moving) if not moving.any() else (
            binary_dilation(moving, iterations=exclude_radius)
            & ~binary_erosion(moving, iterations=exclude_radius))
        recon = np.empty_like(video[:, i])
        for y in range(h):
            for x in range(w):
                sy = int(round(y - v[y, x]))
                sx = int(round(x - u[y, x]))
                sy = min(max(sy, 0), h - 1)
                sx = min(max(sx, 0), w - 1)
                recon[:, y, x] = video[:, i, sy, sx]
        keep = ~band
        errors.append(np.abs(recon - video[:, i + 1])[:, keep].mean())
    return float(np.mean(errors))


class TestSyntheticSample:
    def test_rigid_translation_flow(self):
        rng = np.random.default_rng(0)
        sample = data.generate_synthetic_sample(_spec(), rng)
        u, v = sample.flow[0], sample.flow[1]
        assert sample.video.shape == (3, 10, 19, 19)
        for t in range(9):
            support = u[t] != 0
            assert support.any()
            assert np.all(u[t][support] == 1.0)
            assert np.all(v[t] == 0.0)
        assert np.all(sample.flow[:, -1] == 0.0)

    def test_zero_speed_zero_flow(self):
        rng = np.random.default_rng(0)
        sample = data.generate_synthetic_sample(_spec(speed=0.0), rng)
        assert np.all(sample.flow == 0.0)
        assert np.array_equal(sample.video[:, 0], sample.video[:, -1])

    def test_caption_template(self):
        rng = np.random.default_rng(0)
        s = data.generate_synthetic_sample(
            _spec(shape="circle", shape_color="blue", bg_color="white",
                  motion="up"), rng)
        assert s.caption == "a blue circle is moving up on a white background"
        s = data.generate_synthetic_sample(_spec(motion="bounce"), rng)
        assert s.caption == "a red square is bouncing on a black background"

    @pytest.mark.parametrize("motion", data.GRID_MOTIONS)
    @pytest.mark.parametrize("shape", data.SHAPES)
    def test_warp_reconstruction(self, motion, shape):
        rng = np.random.default_rng(1)
        sample = data.generate_synthetic_sample(_spec(motion=motion, shape=shape), rng)
        assert warp_error(sample.video, sample.flow, exclude_radius=2) < 0.02

    def test_bounce_stays_inside(self):
        rng = np.random.default_rng(2)
        sample = data.generate_synthetic_sample(
            _spec(motion="bounce", frames=24, speed=2.0, canvas=20), rng)
        assert sample.video.shape[1] == 24

    def test_grow_flow_is_radial(self):
        rng = np.random.default_rng(3)
        sample = data.generate_synthetic_sample(
            _spec(motion="grow", canvas=24, frames=5), rng)
        u0 = sample.flow[0, 0]
        support = u0 != 0
        assert support.any()
        # horizontal component is positive right of center, negative left
        xs = np.where(support.any(axis=0))[0]
        assert u0[:, xs.max()].max() > 0
        assert u0[:, xs.min()].min() < 0

    def test_shape_out_of_bounds(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeOutOfBounds):
            data.generate_synthetic_sample(_spec(speed=5.0), rng)
        with pytest.raises(ShapeOutOfBounds):
            data.generate_synthetic_sample(_spec(origin=(14, 2)), rng)


class TestCorpus:
    def test_default_grid_size(self):
        assert len(data.default_corpus_specs(19, 10)) == 96
        captions = {s.caption() for s in data.default_corpus_specs(19, 10)}
        assert len(captions) == 96  # one caption names one clip

    def test_write_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        sample = data.generate_synthetic_sample(_spec(), rng)
        data.write_clip(sample, tmp_path / "clip")
        loaded = data.load_clip(tmp_path / "clip")
        assert np.array_equal(loaded.video, sample.video)
        assert np.array_equal(loaded.flow, sample.flow)
        assert loaded.caption == sample.caption

    def test_load_dataset(self, mini_corpus_dir):
        index = data.load_dataset(mini_corpus_dir)
        assert len(index) == 8
        assert index.skipped == 0
        sample = index.load(0)
        assert sample.caption == index.entries[0].caption

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(EmptyDataset):
            data.load_dataset(tmp_path)
        with pytest.raises(EmptyDataset):
            data.load_dataset(tmp_path / "missing")

    def test_malformed_clip_skipped_with_warning(self, tmp_path, caplog):
        rng = np.random.default_rng(0)
        for i in range(3):
            data.write_clip(data.generate_synthetic_sample(_spec(), rng),
                            tmp_path / f"clip_{i}")
        (tmp_path / "clip_1" / "caption.txt").unlink()
        with caplog.at_level(logging.WARNING):
            index = data.load_dataset(tmp_path)
        assert len(index) == 2
        assert index.skipped == 1
        assert any("clip_1" in r.message for r in caplog.records)


class TestAugment:
    def _paper_sample(self):
        rng = np.random.default_rng(4)
        return data.generate_synthetic_sample(
            _spec(canvas=76, frames=40, speed=1.0), rng)

    def test_paper_geometry(self):
        sample = self._paper_sample()
        rng = np.random.default_rng(0)
        out = data.augment_clip(sample, rng, out_size=64, out_len=32)
        assert out.video.shape == (3, 32, 64, 64)
        assert out.flow.shape == (2, 32, 64, 64)
        assert np.all(out.flow[:, -1] == 0.0)

    def test_flip_involution(self):
        sample = self._paper_sample()
        v1, f1 = data.flip_horizontal(sample.video, sample.flow)
        v2, f2 = data.flip_horizontal(v1, f1)
        assert np.array_equal(v2, sample.video)
        assert np.array_equal(f2, sample.flow)

    def test_flip_matches_rerendered_mirror(self):
        canvas, frames = 19, 10
        bw, _ = data.shape_bbox("square", canvas)
        x0, y0 = 2, 5
        rng = np.random.default_rng(0)
        right = data.generate_synthetic_sample(
            _spec(motion="right", origin=(x0, y0)), rng)
        mirrored = data.generate_synthetic_sample(
            _spec(motion="left", origin=(canvas - bw - x0, y0)), rng)
        flipped_video, flipped_flow = data.flip_horizontal(right.video, right.flow)
        assert np.array_equal(flipped_video, mirrored.video)
        assert np.array_equal(flipped_flow, mirrored.flow)
        # u negates under mirroring, v is untouched
        sup = right.flow[0, 0] != 0
        assert np.all(right.flow[0, 0][sup] == 1.0)
        assert np.all(flipped_flow[0, 0][flipped_flow[0, 0] != 0] == -1.0)

    def test_crop_alignment_shared_offsets(self):
        # encode pixel coordinates in both video and flow; after augmentation
        # they must still agree pixel-for-pixel
        t, h, w = 6, 20, 20
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        video = np.stack([np.stack([xx] * t), np.stack([yy] * t),
                          np.zeros((t, h, w), np.float32)])
        video = video / max(h, w)  # keep inside [-1, 1]
        flow = np.stack([np.stack([xx] * t), np.stack([yy] * t)])
        sample = data.ClipSample(video=video, flow=flow, caption="grid")
        rng = np.random.default_rng(3)
        out = data.augment_clip(sample, rng, out_size=8, out_len=4)
        flipped = out.video[0, 0, 0, 0] > out.video[0, 0, 0, -1]
        if flipped:
            assert np.array_equal(-out.flow[0, :-1], out.video[0, :-1] * max(h, w))
        else:
            assert np.array_equal(out.flow[0, :-1], out.video[0, :-1] * max(h, w))
        assert np.array_equal(out.flow[1, :-1], out.video[1, :-1] * max(h, w))

    def test_too_small_too_short(self):
        sample = self._paper_sample()
        rng = np.random.default_rng(0)
        with pytest.raises(TooSmall):
            data.augment_clip(sample, rng, out_size=80, out_len=8)
        with pytest.raises(TooShort):
            data.augment_clip(sample, rng, out_size=64, out_len=48)


def test_resize_flow_rescales_magnitudes():
    flow = np.zeros((2, 2, 8, 8), dtype=np.float32)
    flow[0] = 2.0
    flow[1] = 4.0
    out = data.resize_flow(flow, 4, 4)
    assert out.shape == (2, 2, 4, 4)
    assert np.allclose(out[0], 1.0)
    assert np.allclose(out[1], 2.0)


def test_video_uint8_roundtrip():
    rng = np.random.default_rng(0)
    frames = rng.integers(0, 256, size=(3, 5, 5, 3), dtype=np.uint8)
    video = data.uint8_to_video(frames)
    assert video.min() >= -1.0 and video.max() <= 1.0
    assert np.array_equal(data.video_to_uint8(video), frames)
