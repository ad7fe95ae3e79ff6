import numpy as np
import pytest
import torch

import oracles
from defreg import (DeformationField, ImageGrid, MaskGrid, identity_field,
                    jacobian_stats, warp, warp_tensor)


class TestContainers:
    def test_image_grid_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            ImageGrid(np.zeros((2, 3, 4)))
        with pytest.raises(ValueError):
            ImageGrid(np.zeros((0, 5)))

    def test_image_grid_rejects_non_finite(self):
        bad = np.zeros((4, 4))
        bad[1, 2] = np.nan
        with pytest.raises(ValueError):
            ImageGrid(bad)

    def test_field_requires_two_channels(self):
        with pytest.raises(ValueError):
            DeformationField(np.zeros((3, 4, 4)))
        with pytest.raises(ValueError):
            DeformationField(np.full((2, 4, 4), np.inf))

    def test_mask_requires_integer_labels(self):
        with pytest.raises(ValueError):
            MaskGrid(np.zeros((4, 4), dtype=np.float32))
        m = MaskGrid(np.array([[0, 1], [2, 2]]))
        assert m.labels_present() == [1, 2]

    def test_field_magnitude(self):
        d = np.zeros((2, 2, 2))
        d[0, 0, 0] = 3.0
        d[1, 0, 0] = 4.0
        assert DeformationField(d).magnitude()[0, 0] == pytest.approx(5.0)

    def test_identity_field_is_zero(self):
        f = identity_field(5, 7)
        assert f.displacements.shape == (2, 5, 7)
        assert not f.displacements.any()
        with pytest.raises(ValueError):
            identity_field(0, 3)


class TestWarpTensor:
    def test_zero_field_is_exact_identity(self, rng):
        for _ in range(5):
            img = torch.from_numpy(rng.standard_normal((2, 3, 12, 9)))
            out = warp_tensor(img, torch.zeros(2, 2, 12, 9, dtype=img.dtype))
            assert torch.equal(out, img)

    def test_bilinear_matches_sampling_oracle(self, rng):
        for _ in range(20):
            img = rng.standard_normal((16, 16))
            flow = rng.uniform(-4, 4, size=(2, 16, 16))
            expected = oracles.bilinear_sample_oracle(img, flow)
            got = warp_tensor(torch.from_numpy(img)[None, None],
                              torch.from_numpy(flow)[None])[0, 0].numpy()
            np.testing.assert_allclose(got, expected, rtol=0, atol=1e-6)

    def test_nearest_matches_sampling_oracle(self, rng):
        for _ in range(10):
            img = rng.integers(0, 5, size=(10, 10)).astype(np.float64)
            flow = rng.uniform(-3, 3, size=(2, 10, 10))
            expected = oracles.nearest_sample_oracle(img, flow)
            got = warp_tensor(torch.from_numpy(img)[None, None],
                              torch.from_numpy(flow)[None], mode="nearest")[0, 0].numpy()
            np.testing.assert_array_equal(got, expected)

    def test_border_clamp(self):
        img = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)
        flow = torch.full((1, 2, 4, 4), 100.0, dtype=torch.float64)
        out = warp_tensor(img, flow)
        assert torch.all(out == img[0, 0, 3, 3])

    def test_integer_shift(self):
        img = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
        img[0, 0, 2, 3] = 1.0
        flow = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
        flow[:, 0] = 1.0  # sample one row down: content appears one row up
        out = warp_tensor(img, flow)
        assert out[0, 0, 1, 3] == 1.0
        assert out[0, 0, 2, 3] == 0.0

    def test_gradients_flow_to_image_and_flow(self, rng):
        img = torch.from_numpy(rng.standard_normal((1, 1, 8, 8))).requires_grad_()
        flow = torch.from_numpy(rng.uniform(-1, 1, (1, 2, 8, 8))).requires_grad_()
        warp_tensor(img, flow).sum().backward()
        assert img.grad is not None and torch.isfinite(img.grad).all()
        assert flow.grad is not None and torch.isfinite(flow.grad).all()

    def test_rejects_bad_inputs(self):
        img = torch.zeros(1, 1, 8, 8)
        with pytest.raises(ValueError):
            warp_tensor(img, torch.zeros(1, 2, 4, 4))
        with pytest.raises(ValueError):
            warp_tensor(img, torch.zeros(1, 3, 8, 8))
        with pytest.raises(ValueError):
            warp_tensor(img, torch.full((1, 2, 8, 8), np.nan))
        with pytest.raises(ValueError):
            warp_tensor(img, torch.zeros(1, 2, 8, 8), mode="cubic")


class TestWarpPublic:
    def test_mask_warp_preserves_label_set(self, rng):
        for _ in range(10):
            labels = rng.integers(0, 4, size=(12, 12)).astype(np.int32)
            mask = MaskGrid(labels)
            flow = rng.uniform(-2, 2, size=(2, 12, 12)).astype(np.float32)
            out = warp(mask, DeformationField(flow), interpolation="nearest")
            assert set(np.unique(out.labels)) <= set(np.unique(labels))
            assert out.labels.dtype == labels.dtype

    def test_mask_warp_requires_nearest(self):
        mask = MaskGrid(np.ones((4, 4), dtype=np.int32))
        with pytest.raises(ValueError):
            warp(mask, identity_field(4, 4), interpolation="bilinear")

    def test_image_warp_round_trips_grid_type(self):
        img = ImageGrid(np.random.default_rng(0).standard_normal((8, 8)), modality_tag="ct")
        out = warp(img, identity_field(8, 8))
        assert isinstance(out, ImageGrid)
        assert out.modality_tag == "ct"
        np.testing.assert_array_equal(out.data, img.data)

    def test_shape_mismatch_rejected(self):
        img = ImageGrid(np.zeros((8, 8)))
        with pytest.raises(ValueError):
            warp(img, identity_field(4, 4))


class TestJacobianStats:
    def test_identity_field_has_unit_determinant(self):
        stats = jacobian_stats(identity_field(8, 8))
        assert stats["fraction_nonpositive"] == 0.0
        assert stats["min_det"] == pytest.approx(1.0)

    def test_uniform_contraction(self):
        # phi(v) = -0.5 v  => map v -> 0.5 v, det 0.25 everywhere
        h = w = 8
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        field = DeformationField(np.stack([-0.5 * rr, -0.5 * cc]))
        stats = jacobian_stats(field)
        assert stats["min_det"] == pytest.approx(0.25)
        assert stats["fraction_nonpositive"] == 0.0

    def test_folding_detected(self):
        # phi(v) = -2 v  => map v -> -v, det 1 everywhere... use one axis only:
        # phi_r = -2 r gives d(r + phi_r)/dr = -1 < 0
        h = w = 6
        rr = np.mgrid[0:h, 0:w][0].astype(np.float64)
        field = DeformationField(np.stack([-2.0 * rr, np.zeros((h, w))]))
        stats = jacobian_stats(field)
        assert stats["fraction_nonpositive"] == 1.0
        assert stats["min_det"] < 0

    def test_matches_oracle_on_random_fields(self, rng):
        for _ in range(10):
            flow = rng.uniform(-2, 2, size=(2, 7, 9))
            det = oracles.jacobian_det_oracle(flow)
            stats = jacobian_stats(DeformationField(flow))
            assert stats["fraction_nonpositive"] == pytest.approx(np.mean(det <= 0))
            assert stats["min_det"] == pytest.approx(det.min())
