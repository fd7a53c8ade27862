import json

import numpy as np
import pytest

from soda.domain import ImageBuffer
from soda.encoders import AttentionTrace
from soda.imaging import load_image
from soda.saliency import (
    DimensionError,
    EmptyTrace,
    HeatmapOverlay,
    IoError,
    SaliencyMap,
    class_patch_attribution,
    export_heatmap,
    quadrant_mass,
    render_overlay,
    rollout,
    rollout_matrix,
    upsample,
)


def uniform_trace(t=5, heads=2, layers=1):
    attn = np.full((heads, t, t), 1.0 / t, dtype=np.float32)
    return AttentionTrace(layers=tuple(attn.copy() for _ in range(layers)))


def identity_trace(t=5, heads=1, layers=2):
    attn = np.stack([np.eye(t, dtype=np.float32)] * heads)
    return AttentionTrace(layers=tuple(attn.copy() for _ in range(layers)))


class TestRollout:
    def test_uniform_rows_give_constant_zero_grid(self):
        result = rollout(uniform_trace())
        assert np.array_equal(result.grid, np.zeros((2, 2)))

    def test_indicator_class_row(self):
        # class-token row attends only to patch j=2 (token index 3)
        t = 5
        attn = np.full((1, t, t), 1.0 / t, dtype=np.float32)
        attn[0, 0, :] = 0.0
        attn[0, 0, 3] = 1.0
        trace = AttentionTrace(layers=(attn,))
        result = rollout(trace)
        expected = np.zeros((2, 2))
        expected[1, 0] = 1.0  # patch index 2 in row-major 2x2
        assert np.allclose(result.grid, expected)

    def test_identity_attention_never_reaches_patches(self):
        result = rollout(identity_trace())
        assert np.array_equal(result.grid, np.zeros((2, 2)))

    def test_rollout_rows_stay_stochastic(self):
        rng = np.random.default_rng(0)
        layers = []
        for _ in range(3):
            raw = rng.random((2, 10, 10))
            layers.append((raw / raw.sum(axis=-1, keepdims=True)).astype(np.float32))
        trace = AttentionTrace(layers=tuple(layers))
        matrix = rollout_matrix(trace)
        assert np.allclose(matrix.sum(axis=1), 1.0, atol=1e-5)
        assert np.all(matrix >= 0)

    def test_head_order_invariance(self):
        rng = np.random.default_rng(1)
        raw = rng.random((3, 5, 5))
        attn = (raw / raw.sum(axis=-1, keepdims=True)).astype(np.float32)
        permuted = attn[[2, 0, 1]]
        a = rollout(AttentionTrace(layers=(attn,)))
        b = rollout(AttentionTrace(layers=(permuted,)))
        assert np.allclose(a.grid, b.grid)

    def test_normalized_range(self):
        rng = np.random.default_rng(2)
        raw = rng.random((2, 17, 17))
        attn = (raw / raw.sum(axis=-1, keepdims=True)).astype(np.float32)
        result = rollout(AttentionTrace(layers=(attn, attn)))
        assert result.grid.min() == 0.0 and result.grid.max() == 1.0

    def test_empty_trace(self):
        class Hollow:
            layers = ()

        with pytest.raises(EmptyTrace):
            rollout_matrix(Hollow())

    def test_quadrant_mass(self):
        grid = np.zeros((4, 4))
        grid[:2, :2] = 1.0
        assert quadrant_mass(grid, "top-left") == 1.0
        assert quadrant_mass(np.ones((4, 4)), "top-left") == pytest.approx(0.25)
        assert quadrant_mass(np.zeros((4, 4))) == 0.25

    def test_attribution_is_pre_normalization(self):
        trace = uniform_trace()
        raw = class_patch_attribution(trace)
        assert raw.shape == (2, 2)
        assert np.all(raw > 0)  # constant but non-zero before min-max


class TestUpsample:
    def test_constant_grid(self):
        field = upsample(SaliencyMap(grid=np.full((4, 4), 0.6)), 32, 32)
        assert field.shape == (32, 32)
        assert np.allclose(field, 0.6)

    def test_extrema_bounded(self):
        rng = np.random.default_rng(3)
        grid = rng.random((8, 8))
        field = upsample(SaliencyMap(grid=grid), 64, 64)
        assert field.min() >= grid.min() - 1e-12
        assert field.max() <= grid.max() + 1e-12

    def test_identity_at_grid_size(self):
        rng = np.random.default_rng(4)
        grid = rng.random((8, 8))
        field = upsample(SaliencyMap(grid=grid), 8, 8)
        assert np.allclose(field, grid)

    def test_too_small_target(self):
        with pytest.raises(DimensionError):
            upsample(SaliencyMap(grid=np.zeros((8, 8))), 4, 64)


class TestRenderOverlay:
    def _banner(self, seed=0, size=16):
        rng = np.random.default_rng(seed)
        return ImageBuffer.from_array(rng.integers(0, 256, (size, size, 3)).astype(np.uint8))

    def test_alpha_zero_identity(self):
        banner = self._banner()
        field = np.random.default_rng(1).random((16, 16))
        overlay = render_overlay(banner, field, alpha=0.0)
        assert np.array_equal(overlay.image.pixels, banner.pixels)

    def test_alpha_one_pure_colormap(self):
        banner = self._banner()
        field = np.zeros((16, 16))
        overlay = render_overlay(banner, field, alpha=1.0)
        assert np.all(overlay.image.pixels[:, :, 2] == 255)  # blue at saliency 0
        assert np.all(overlay.image.pixels[:, :, 0] == 0)
        field = np.ones((16, 16))
        overlay = render_overlay(banner, field, alpha=1.0)
        assert np.all(overlay.image.pixels[:, :, 0] == 255)  # red at saliency 1

    def test_dimensions_preserved(self):
        banner = self._banner(size=24)
        overlay = render_overlay(banner, np.zeros((24, 24)), alpha=0.5)
        assert overlay.image.height == 24 and overlay.image.width == 24

    def test_rounding_blend(self):
        banner = ImageBuffer.from_array(np.full((2, 2, 3), 100, dtype=np.uint8))
        overlay = render_overlay(banner, np.full((2, 2), 0.5), alpha=0.5)
        # blend: 0.5*100 + 0.5*cmap(0.5) = 50 + 0.5*(127.5, 0, 127.5)
        assert overlay.image.pixels[0, 0].tolist() == [114, 50, 114]

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            render_overlay(self._banner(), np.zeros((16, 16)), alpha=1.5)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            render_overlay(self._banner(), np.zeros((8, 8)), alpha=0.5)

    def test_unknown_colormap(self):
        with pytest.raises(ValueError):
            render_overlay(self._banner(), np.zeros((16, 16)), alpha=0.5, colormap="jet")


class TestExportHeatmap:
    def _overlay_and_map(self):
        rng = np.random.default_rng(5)
        banner = ImageBuffer.from_array(rng.integers(0, 256, (16, 16, 3)).astype(np.uint8))
        grid = rng.random((2, 2))
        saliency = SaliencyMap(grid=grid)
        field = upsample(saliency, 16, 16)
        return render_overlay(banner, field, alpha=0.4), saliency

    def test_roundtrip_grid_exact(self, tmp_path):
        overlay, saliency = self._overlay_and_map()
        png_path, json_path = export_heatmap(
            overlay, saliency, str(tmp_path / "hm"), model_id="m1", ad_id="a1"
        )
        sidecar = json.loads(open(json_path).read())
        assert np.array_equal(np.array(sidecar["grid"]), saliency.grid)
        assert sidecar["alpha"] == 0.4
        assert sidecar["model_id"] == "m1" and sidecar["ad_id"] == "a1"
        decoded = load_image(png_path)
        assert decoded.height == 16 and decoded.width == 16
        assert np.array_equal(decoded.pixels, overlay.image.pixels)

    def test_missing_directory_is_io_error(self, tmp_path):
        overlay, saliency = self._overlay_and_map()
        missing = str(tmp_path / "not" / "there" / "hm")
        with pytest.raises(IoError) as err:
            export_heatmap(overlay, saliency, missing)
        assert "not" in str(err.value)
