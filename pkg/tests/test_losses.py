import numpy as np
import pytest
import torch

import oracles
from defreg import (LossWeights, NCEConfig, appearance_loss, global_alignment_loss,
                    info_nce, local_alignment_loss, patch_nce_loss, smoothness_loss,
                    total_loss)
from defreg.losses import _nce_rows

CFG16 = NCEConfig(tau=0.07, num_locations=8, layer_ids=(0, 1, 2, 3, 7))


def rel_err(a, n):
    scale = max(abs(a), abs(n))
    if scale < 1e-10:
        return abs(a - n)
    return abs(a - n) / scale


def check_fd(loss_fn, x: torch.Tensor, n_probes=10, eps=1e-6, tol=1e-4, seed=0):
    """Compare autograd gradients of loss_fn(x) against central differences."""
    x = x.detach().clone().double().requires_grad_()
    loss = loss_fn(x)
    loss.backward()
    grad = x.grad.reshape(-1).numpy()
    probes = np.random.default_rng(seed).choice(
        x.numel(), size=min(n_probes, x.numel()), replace=False)

    def eval_at(arr):
        return float(loss_fn(torch.from_numpy(arr).reshape(x.shape)))

    fd = oracles.finite_difference_grad(eval_at, x.detach().numpy().reshape(-1).copy(),
                                        probes, eps=eps)
    for idx, numeric in fd.items():
        assert rel_err(grad[idx], numeric) < tol, (
            f"probe {idx}: analytic {grad[idx]:.3e} vs numeric {numeric:.3e}")


class TestInfoNCE:
    def test_matched_query_orthogonal_negatives(self):
        k = 32
        z = torch.zeros(k, dtype=torch.float64)
        z[0] = 1.0
        negs = torch.zeros(255, k, dtype=torch.float64)
        negs[:, 1] = 1.0
        got = float(info_nce(z, z, negs, tau=0.07))
        expected = float(np.log1p(255.0 * np.exp(-1.0 / 0.07)))
        assert rel_err(got, expected) < 1e-6
        assert got == pytest.approx(1.594e-4, rel=1e-3)

    def test_all_equal_logits_give_log_of_count(self):
        k = 32
        z = torch.zeros(k, dtype=torch.float64)
        z[0] = 1.0
        z_pos = torch.zeros(k, dtype=torch.float64)
        z_pos[1] = 1.0
        negs = torch.zeros(255, k, dtype=torch.float64)
        negs[:, 2] = 1.0
        got = float(info_nce(z, z_pos, negs, tau=0.07))
        expected = float(np.log(256.0))
        assert rel_err(got, expected) < 1e-6
        assert got == pytest.approx(5.545, rel=1e-3)

    def test_matches_direct_formula_on_random_vectors(self, rng):
        for _ in range(20):
            k = 8
            z = rng.standard_normal(k)
            z /= np.linalg.norm(z)
            zp = rng.standard_normal(k)
            zp /= np.linalg.norm(zp)
            negs = rng.standard_normal((15, k))
            negs /= np.linalg.norm(negs, axis=1, keepdims=True)
            got = float(info_nce(torch.from_numpy(z), torch.from_numpy(zp),
                                 torch.from_numpy(negs), tau=0.07))
            expected = oracles.info_nce_oracle(z, zp, negs, 0.07)
            assert rel_err(got, expected) < 1e-9

    def test_negative_order_irrelevant(self, rng):
        k = 8
        z = torch.from_numpy(rng.standard_normal(k))
        zp = torch.from_numpy(rng.standard_normal(k))
        negs = torch.from_numpy(rng.standard_normal((10, k)))
        a = float(info_nce(z, zp, negs, 0.07))
        b = float(info_nce(z, zp, negs[torch.randperm(10)], 0.07))
        assert a == pytest.approx(b, rel=1e-12)

    def test_non_negative(self, rng):
        for _ in range(10):
            z = torch.from_numpy(rng.standard_normal(6))
            negs = torch.from_numpy(rng.standard_normal((5, 6)))
            assert float(info_nce(z, z, negs, 0.07)) >= 0.0

    def test_bad_arguments(self):
        z = torch.ones(4)
        with pytest.raises(ValueError):
            info_nce(z, z, torch.ones(3, 4), tau=0.0)
        with pytest.raises(ValueError):
            info_nce(z, z, torch.ones(0, 4), tau=0.07)

    def test_gradient_matches_fd(self, rng):
        k = 8
        z0 = torch.from_numpy(rng.standard_normal(k))
        zp0 = torch.from_numpy(rng.standard_normal(k))
        negs0 = torch.from_numpy(rng.standard_normal((12, k)))
        check_fd(lambda z: info_nce(z, zp0, negs0, 0.07), z0, seed=1)
        check_fd(lambda zp: info_nce(z0, zp, negs0, 0.07), zp0, seed=2)
        check_fd(lambda ng: info_nce(z0, zp0, ng, 0.07), negs0, seed=3)

    def test_row_formulation_equals_per_query_losses(self, rng):
        m, k = 6, 5
        q = torch.from_numpy(rng.standard_normal((m, k)))
        kk = torch.from_numpy(rng.standard_normal((m, k)))
        batched = float(_nce_rows(q, kk, 0.07))
        singles = []
        for i in range(m):
            negs = torch.cat([kk[:i], kk[i + 1:]])
            singles.append(float(info_nce(q[i], kk[i], negs, 0.07)))
        assert batched == pytest.approx(np.mean(singles), rel=1e-12)


class TestPatchNCE:
    def _image(self, rng, shape=(1, 1, 16, 16)):
        return torch.from_numpy(rng.uniform(-1, 1, shape))

    def test_non_negative_and_finite(self, tiny_nets, rng):
        for _ in range(5):
            x = self._image(rng)
            y = self._image(rng)
            v = patch_nce_loss(x, y, tiny_nets.translation.encoder, tiny_nets.heads,
                               CFG16, np.random.default_rng(0))
            assert float(v) >= 0.0 and np.isfinite(float(v))

    def test_deterministic_under_fixed_rng(self, tiny_nets, rng):
        x = self._image(rng)
        y = self._image(rng)
        a = patch_nce_loss(x, y, tiny_nets.translation.encoder, tiny_nets.heads,
                           CFG16, np.random.default_rng(42))
        b = patch_nce_loss(x, y, tiny_nets.translation.encoder, tiny_nets.heads,
                           CFG16, np.random.default_rng(42))
        assert float(a) == float(b)

    def test_identical_images_hit_query_equals_positive_floor(self, tiny_nets, rng):
        """With input == output the queries coincide with their positives, and
        perturbing any query only increases each row's loss."""
        x = self._image(rng)
        ids = list(CFG16.layer_ids)
        enc = tiny_nets.translation.encoder
        with torch.no_grad():
            feats = enc(x, layer_ids=ids)
            locs = [torch.arange(8) for _ in feats]
            z = tiny_nets.heads(feats, locs)
        base = [float(_nce_rows(zl[0], zl[0], CFG16.tau)) for zl in z]
        loss = patch_nce_loss(x, x, enc, tiny_nets.heads, CFG16, np.random.default_rng(3))
        # same-image loss equals the q == k closed form on the actual embeddings
        with torch.no_grad():
            feats_s = enc(x, layer_ids=ids)
            from defreg import sample_locations
            locs_s = sample_locations(feats_s, 8, np.random.default_rng(3))
            z_s = tiny_nets.heads(feats_s, locs_s)
        expected = np.mean([float(_nce_rows(zl[0], zl[0], CFG16.tau)) for zl in z_s])
        assert float(loss) == pytest.approx(expected, rel=1e-9)
        # 20 random query perturbations strictly increase the first layer's loss
        perturb_rng = np.random.default_rng(7)
        z0 = z[0][0]
        l0 = base[0]
        for _ in range(20):
            noise = torch.from_numpy(perturb_rng.standard_normal(z0.shape)) * 0.2
            q = torch.nn.functional.normalize(z0 + noise, dim=-1)
            assert float(_nce_rows(q, z0, CFG16.tau)) > l0

    def test_gradient_wrt_output_image_matches_fd(self, tiny_nets, rng):
        x0 = self._image(rng)
        y0 = self._image(rng)
        enc = tiny_nets.translation.encoder

        def loss_fn(y):
            return patch_nce_loss(x0, y, enc, tiny_nets.heads, CFG16,
                                  np.random.default_rng(11))

        check_fd(loss_fn, y0, n_probes=10, seed=4)

    def test_shape_mismatch_rejected(self, tiny_nets):
        with pytest.raises(ValueError):
            patch_nce_loss(torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 8, 8),
                           tiny_nets.translation.encoder, tiny_nets.heads,
                           CFG16, np.random.default_rng(0))


class TestLocalAlignment:
    def test_non_negative(self, tiny_nets, rng):
        x = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 16, 16)))
        y = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 16, 16)))
        v = local_alignment_loss(x, y, tiny_nets.translation.encoder, tiny_nets.heads,
                                 CFG16, np.random.default_rng(0))
        assert float(v) >= 0.0

    def test_identical_inputs_match_patch_nce_same_locations(self, tiny_nets, rng):
        x = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 16, 16)))
        a = local_alignment_loss(x, x, tiny_nets.translation.encoder, tiny_nets.heads,
                                 CFG16, np.random.default_rng(9))
        b = patch_nce_loss(x, x, tiny_nets.translation.encoder, tiny_nets.heads,
                           CFG16, np.random.default_rng(9))
        assert float(a) == pytest.approx(float(b), rel=1e-9)

    def test_stop_gradient_to_encoder_and_heads(self, tiny_nets, rng):
        x = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 16, 16))).requires_grad_()
        y = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 16, 16)))
        tiny_nets.zero_grad(set_to_none=True)
        v = local_alignment_loss(x, y, tiny_nets.translation.encoder, tiny_nets.heads,
                                 CFG16, np.random.default_rng(1))
        v.backward()
        for p in tiny_nets.translation.encoder.parameters():
            assert p.grad is None or not p.grad.abs().any()
        for p in tiny_nets.heads.parameters():
            assert p.grad is None or not p.grad.abs().any()
        assert x.grad is not None and x.grad.abs().max() > 0

    def test_gradient_wrt_warped_source_matches_fd(self, tiny_nets, rng):
        y0 = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 16, 16)))
        x0 = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 16, 16)))

        def loss_fn(x):
            return local_alignment_loss(x, y0, tiny_nets.translation.encoder,
                                        tiny_nets.heads, CFG16, np.random.default_rng(21))

        check_fd(loss_fn, x0, n_probes=10, seed=5)

    def test_shift_sweep_has_minimum_at_alignment(self, tiny_nets):
        """On a textured image, the loss is lowest when the query image sits at
        the true alignment: matched locations then carry identical content."""
        size = 16
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        base = np.sin(xx * 1.3) * np.cos(yy * 0.7)
        losses = []
        for shift in (0, 2, 4):
            shifted = np.roll(base, shift, axis=1)
            v = local_alignment_loss(
                torch.from_numpy(shifted)[None, None], torch.from_numpy(base)[None, None],
                tiny_nets.translation.encoder, tiny_nets.heads,
                NCEConfig(num_locations=16, layer_ids=(0, 1, 2, 3, 7)),
                np.random.default_rng(13))
            losses.append(float(v))
        assert losses[0] < losses[1]
        assert losses[0] < losses[2]


class TestL1Losses:
    def test_identical_images_zero(self):
        a = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        assert float(appearance_loss(a, a.clone())) == 0.0

    def test_constant_offset(self):
        a = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        assert float(appearance_loss(a, a + 0.5)) == pytest.approx(0.5)

    def test_matches_elementwise_oracle(self, rng):
        a = rng.standard_normal((1, 1, 9, 7))
        b = rng.standard_normal((1, 1, 9, 7))
        got = float(appearance_loss(torch.from_numpy(a), torch.from_numpy(b)))
        assert got == pytest.approx(np.abs(a - b).mean(), rel=1e-12)

    def test_global_equals_appearance_form(self, rng):
        a = torch.from_numpy(rng.standard_normal((1, 1, 6, 6)))
        b = torch.from_numpy(rng.standard_normal((1, 1, 6, 6)))
        assert float(global_alignment_loss(a, b)) == float(appearance_loss(a, b))
        assert float(global_alignment_loss(a, a.clone())) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            appearance_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 5, 5))

    def test_gradients_match_fd(self, rng):
        b0 = torch.from_numpy(rng.standard_normal((1, 1, 8, 8)))
        a0 = torch.from_numpy(rng.standard_normal((1, 1, 8, 8)))
        check_fd(lambda a: appearance_loss(a, b0), a0, seed=6)
        check_fd(lambda b: appearance_loss(a0, b), b0, seed=7)
        check_fd(lambda a: global_alignment_loss(a, b0), a0, seed=8)


class TestSmoothness:
    def test_constant_field_zero_value_and_zero_gradient(self):
        flow = torch.full((1, 2, 6, 6), 3.25, dtype=torch.float64, requires_grad=True)
        loss = smoothness_loss(flow)
        assert float(loss) == 0.0
        loss.backward()
        assert torch.isfinite(flow.grad).all()
        assert not flow.grad.abs().any()

    def test_hand_computed_row_gradient_field(self):
        # phi = (row, 0) on 4x4: interior pixels contribute 2, borders 1 -> mean 1.5
        flow = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        flow[0, 0] = torch.arange(4, dtype=torch.float64)[:, None]
        assert float(smoothness_loss(flow)) == pytest.approx(1.5, rel=1e-12)

    def test_homogeneity_in_scale(self, rng):
        flow = torch.from_numpy(rng.standard_normal((1, 2, 5, 7)))
        base = float(smoothness_loss(flow))
        for c in (2.0, -3.0, 0.5):
            assert float(smoothness_loss(c * flow)) == pytest.approx(abs(c) * base, rel=1e-9)

    def test_invariant_to_constant_offset(self, rng):
        flow = torch.from_numpy(rng.standard_normal((1, 2, 6, 6)))
        shifted = flow + torch.tensor([1.5, -2.0]).view(1, 2, 1, 1)
        assert float(smoothness_loss(shifted)) == pytest.approx(float(smoothness_loss(flow)),
                                                                rel=1e-9)

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(10):
            flow = rng.standard_normal((2, 5, 6))
            got = float(smoothness_loss(torch.from_numpy(flow)[None]))
            assert got == pytest.approx(oracles.smoothness_oracle(flow), rel=1e-9)

    def test_gradient_matches_fd(self, rng):
        flow0 = torch.from_numpy(rng.standard_normal((1, 2, 6, 6)))
        check_fd(smoothness_loss, flow0, n_probes=12, seed=9)

    def test_accepts_deformation_field(self):
        from defreg import DeformationField
        f = DeformationField(np.zeros((2, 4, 4), dtype=np.float32))
        assert float(smoothness_loss(f)) == 0.0


class TestTotalLoss:
    def test_paper_weights_composition(self):
        terms = {k: torch.tensor(1.0) for k in
                 ("patchnce_x", "patchnce_y", "appearance", "local", "global")}
        w = LossWeights(lambda_p=0.25, lambda_a=1.0, lambda_l=0.25, lambda_g=1.0, lambda_s=0.0)
        assert float(total_loss(terms, w)) == 2.75

    def test_all_zero_weights(self):
        terms = {"appearance": torch.tensor(5.0), "smooth": torch.tensor(2.0)}
        w = LossWeights(0.0, 0.0, 0.0, 0.0, 0.0)
        assert float(total_loss(terms, w)) == 0.0

    def test_linearity_in_each_term(self, rng):
        w = LossWeights()
        base = {k: float(rng.uniform(0.1, 2.0)) for k in
                ("patchnce_x", "patchnce_y", "appearance", "local", "global", "smooth")}
        t0 = float(total_loss(base, w))
        for key, weight in (("appearance", w.lambda_a), ("local", w.lambda_l),
                            ("smooth", w.lambda_s)):
            bumped = dict(base)
            bumped[key] = base[key] + 1.0
            assert float(total_loss(bumped, w)) == pytest.approx(t0 + weight, rel=1e-12)

    def test_gradient_is_the_weight_vector(self):
        w = LossWeights()
        vals = {k: torch.tensor(1.0, dtype=torch.float64, requires_grad=True) for k in
                ("patchnce_x", "appearance", "smooth")}
        total_loss(vals, w).backward()
        assert float(vals["patchnce_x"].grad) == w.lambda_p
        assert float(vals["appearance"].grad) == w.lambda_a
        assert float(vals["smooth"].grad) == w.lambda_s

    def test_non_finite_term_names_offender(self):
        with pytest.raises(RuntimeError, match="appearance"):
            total_loss({"appearance": torch.tensor(float("nan"))}, LossWeights())

    def test_unknown_term_rejected(self):
        with pytest.raises(ValueError):
            total_loss({"adversarial": torch.tensor(1.0)}, LossWeights())

    def test_empty_terms_give_zero(self):
        assert float(total_loss({}, LossWeights())) == 0.0


class TestConfigValidation:
    def test_nce_config(self):
        with pytest.raises(ValueError):
            NCEConfig(tau=-0.1)
        with pytest.raises(ValueError):
            NCEConfig(num_locations=1)
        cfg = NCEConfig()
        assert cfg.tau == 0.07
        assert cfg.num_locations == 256
        assert len(cfg.layer_ids) == 5

    def test_loss_weights(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_p=-0.1)
        w = LossWeights()
        assert (w.lambda_p, w.lambda_a, w.lambda_l, w.lambda_g) == (0.25, 1.0, 0.25, 1.0)
