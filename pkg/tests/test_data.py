import numpy as np
import pytest

from bimac.data import (decimate, gaussian_blur, gaussian_kernel, load_dataset, make_dataset,
                        save_dataset, synth_scene, wald_degrade)
from bimac.errors import DataError, DimensionError
from bimac.net import upsample_bicubic
from bimac.region import radial_power_spectrum


class TestSynthScene:
    def test_empty_scene(self):
        np.testing.assert_array_equal(synth_scene(0, 3, 16, 16, n_blobs=0, n_shapes=0), 0.0)

    def test_deterministic(self):
        a = synth_scene(42, 4, 32, 32)
        b = synth_scene(42, 4, 32, 32)
        assert a.tobytes() == b.tobytes()
        assert synth_scene(43, 4, 32, 32).tobytes() != a.tobytes()

    def test_range(self):
        s = synth_scene(3, 8, 32, 32)
        assert s.shape == (8, 32, 32) and s.min() >= 0.0 and s.max() <= 1.0

    def test_shapes_add_high_frequency_power(self):
        def hf_power(k2):
            vals = []
            for seed in range(10):
                img = synth_scene(seed, 4, 32, 32, n_blobs=4, n_shapes=k2).mean(axis=0)
                spec = radial_power_spectrum(img)
                vals.append(spec[len(spec) // 2:].mean())
            return np.mean(vals)

        assert hf_power(8) > hf_power(0)


class TestWald:
    def test_constant_scene(self):
        s = wald_degrade(np.full((3, 16, 16), 0.4))
        np.testing.assert_allclose(s.lrms, 0.4, atol=1e-15)
        np.testing.assert_allclose(s.pan, 0.4, atol=1e-15)
        assert s.lrms.shape == (3, 4, 4) and s.pan.shape == (1, 16, 16)

    def test_impulse_gives_sampled_gaussian(self):
        sigma = 1.7
        gt = np.zeros((1, 32, 32))
        gt[0, 14, 17] = 1.0
        lrms = wald_degrade(gt, blur_sigma=sigma, pan_weights=[1.0]).lrms[0]
        # low-res pixel j covers high-res 4j..4j+3 and sits at its centre 4j+1.5
        radius = int(np.ceil(3 * sigma))
        norm = np.exp(-(np.arange(-radius, radius) + 0.5) ** 2 / (2 * sigma**2)).sum()
        centres = 4 * np.arange(8) + 1.5
        gy = np.exp(-(14 - centres) ** 2 / (2 * sigma**2)) / norm
        gx = np.exp(-(17 - centres) ** 2 / (2 * sigma**2)) / norm
        gy[np.abs(14 - centres) > radius] = 0.0
        gx[np.abs(17 - centres) > radius] = 0.0
        np.testing.assert_allclose(lrms, np.outer(gy, gx), atol=1e-15)

    def test_energy_on_aligned_grid(self, rng):
        gt = rng.random((2, 32, 32))
        s = wald_degrade(gt)
        blurred = gaussian_blur(gt, 1.7, half=True)
        assert abs(s.lrms.mean() - decimate(blurred).mean()) < 1e-10

    def test_bicubic_registration(self):
        """A smooth scene upsampled back from its LRMS lands on the scene, not half a pixel off."""
        yy, xx = np.mgrid[0:64, 0:64]
        gt = (0.5 + 0.4 * np.sin(2 * np.pi * xx / 64) * np.cos(2 * np.pi * yy / 64))[None]
        up = upsample_bicubic(wald_degrade(gt, blur_sigma=0.5, pan_weights=[1.0]).lrms)
        inner = (slice(None), slice(8, -8), slice(8, -8))
        err = np.abs(up - gt)[inner].max()
        shifted = np.abs(up[:, :, 1:] - gt[:, :, :-1])[inner].max()
        assert err < 0.01 and err < shifted

    def test_pan_weights(self, rng):
        gt = rng.random((3, 8, 8))
        s = wald_degrade(gt, pan_weights=[0.2, 0.3, 0.5])
        np.testing.assert_allclose(s.pan[0], 0.2 * gt[0] + 0.3 * gt[1] + 0.5 * gt[2], atol=1e-15)
        with pytest.raises(ValueError):
            wald_degrade(gt, pan_weights=[0.5, 0.5, 0.5])
        with pytest.raises(ValueError):
            wald_degrade(gt, pan_weights=[1.5, -0.5, 0.0])

    def test_divisibility(self):
        with pytest.raises(DimensionError):
            wald_degrade(np.zeros((1, 10, 12)))

    def test_kernels_normalised(self):
        for half in (False, True):
            g = gaussian_kernel(1.7, half=half)
            assert abs(g.sum() - 1) < 1e-15
            np.testing.assert_array_equal(g, g[::-1])
        assert len(gaussian_kernel(1.7)) == 13 and len(gaussian_kernel(1.7, half=True)) == 12


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        samples = make_dataset(3, 4, 16, 16, seed=2)
        save_dataset(samples, tmp_path)
        back = load_dataset(tmp_path)
        assert len(back) == 3
        for a, b in zip(samples, back):
            # stored as f32
            np.testing.assert_array_equal(a.gt.astype(np.float32), b.gt)
            np.testing.assert_array_equal(a.lrms.astype(np.float32), b.lrms)
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        assert lines[0] == "count 3" and lines[1] == "0 gt_0.bmt pan_0.bmt lrms_0.bmt"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_count_mismatch(self, tmp_path):
        save_dataset(make_dataset(2, 4, 8, 8), tmp_path)
        text = (tmp_path / "manifest.txt").read_text().replace("count 2", "count 5")
        (tmp_path / "manifest.txt").write_text(text)
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_dataset_seeds_are_per_sample(self):
        a = make_dataset(3, 4, 16, 16, seed=1)
        b = make_dataset(2, 4, 16, 16, seed=1)
        np.testing.assert_array_equal(a[1].gt, b[1].gt)
