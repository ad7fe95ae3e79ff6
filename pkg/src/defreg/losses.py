"""Loss terms for joint registration + translation training.

Five terms: multilayer patchwise InfoNCE on each modality (shape preservation
and reconstruction), L1 appearance between the warped translated source and the
target, patchwise InfoNCE local alignment (updates only the registration net),
L1 global alignment against the target reconstruction, and field smoothness.

All losses are means (over pixels, locations, and layers) so weights stay
resolution-independent. Patch embeddings use key vectors detached from the
graph: gradients reach the networks only through the query pathway.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .grids import DeformationField, ImageGrid
from .networks import DEFAULT_LAYER_IDS, sample_locations


@dataclass
class NCEConfig:
    tau: float = 0.07
    num_locations: int = 256
    layer_ids: tuple = DEFAULT_LAYER_IDS

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.num_locations < 2:
            raise ValueError("need at least 2 locations (1 positive + 1 negative)")
        self.layer_ids = tuple(self.layer_ids)


@dataclass
class LossWeights:
    lambda_p: float = 0.25
    lambda_a: float = 1.0
    lambda_l: float = 0.25
    lambda_g: float = 1.0
    lambda_s: float = 0.1

    def __post_init__(self):
        for name in ("lambda_p", "lambda_a", "lambda_l", "lambda_g", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _as_batched(img) -> torch.Tensor:
    """ImageGrid -> (1,1,H,W) tensor; 4D tensors pass through."""
    if isinstance(img, ImageGrid):
        return torch.from_numpy(img.data.astype(np.float64))[None, None]
    if isinstance(img, torch.Tensor):
        if img.ndim != 4:
            raise ValueError(f"expected (B,C,H,W) tensor, got shape {tuple(img.shape)}")
        return img
    raise TypeError(f"expected ImageGrid or tensor, got {type(img).__name__}")


def info_nce(z: torch.Tensor, z_pos: torch.Tensor, z_negs: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Single-query InfoNCE: -log of the positive's softmax weight over 1 + N logits."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if z_negs.ndim != 2 or z_negs.shape[0] < 1:
        raise ValueError(f"z_negs must be NxK with N >= 1, got shape {tuple(z_negs.shape)}")
    pos_logit = (z * z_pos).sum() / tau
    neg_logits = (z_negs @ z) / tau
    logits = torch.cat([pos_logit.reshape(1), neg_logits])
    return torch.logsumexp(logits, dim=0) - pos_logit


def _nce_rows(queries: torch.Tensor, keys: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean InfoNCE over rows: positive is the same-index key, negatives the rest.

    The full logit matrix with cross-entropy against the diagonal is exactly the
    per-row formula: the denominator holds the positive plus the N = M-1 others.
    """
    logits = queries @ keys.transpose(-1, -2) / tau
    target = torch.arange(logits.shape[-1], device=logits.device)
    return F.cross_entropy(logits, target)


def _frozen_call(module, args, kwargs=None):
    """Run a module with its parameters detached: inputs keep gradients, weights get none."""
    state = {k: v.detach() for k, v in module.named_parameters()}
    state.update(dict(module.named_buffers()))
    return torch.func.functional_call(module, state, args, kwargs or {})


def patch_nce_loss(input_img, output_img, encoder, heads, cfg: NCEConfig,
                   rng: np.random.Generator) -> torch.Tensor:
    """Multilayer patchwise InfoNCE tying each output patch to its input patch.

    Queries come from the output image, positives/negatives from the input image
    at shared per-layer locations; keys are detached. Mean over layers/locations.
    """
    inp = _as_batched(input_img)
    out = _as_batched(output_img)
    if inp.shape != out.shape:
        raise ValueError(f"shape mismatch: {tuple(inp.shape)} vs {tuple(out.shape)}")
    ids = list(cfg.layer_ids)
    feats_q = encoder(out, layer_ids=ids)
    locations = sample_locations(feats_q, cfg.num_locations, rng)
    z_q = heads(feats_q, locations)
    with torch.no_grad():
        feats_k = encoder(inp, layer_ids=ids)
        z_k = heads(feats_k, locations)
    per_layer = []
    for q, k in zip(z_q, z_k):
        rows = [_nce_rows(q[b], k[b], cfg.tau) for b in range(q.shape[0])]
        per_layer.append(torch.stack(rows).mean())
    return torch.stack(per_layer).mean()


def local_alignment_loss(x_warped, y, encoder, heads, cfg: NCEConfig,
                         rng: np.random.Generator) -> torch.Tensor:
    """Cross-modality patchwise InfoNCE between the warped source and the target.

    Queries from x(phi), positives/negatives from y at the same locations. The
    encoder and heads run with detached parameters, so this term's gradient
    reaches only the registration net (through x(phi)).
    """
    xq = _as_batched(x_warped)
    yk = _as_batched(y)
    if xq.shape != yk.shape:
        raise ValueError(f"shape mismatch: {tuple(xq.shape)} vs {tuple(yk.shape)}")
    ids = list(cfg.layer_ids)
    feats_q = _frozen_call(encoder, (xq,), {"layer_ids": ids})
    locations = sample_locations(feats_q, cfg.num_locations, rng)
    z_q = _frozen_call(heads, (feats_q, locations))
    with torch.no_grad():
        feats_k = encoder(yk, layer_ids=ids)
        z_k = heads(feats_k, locations)
    per_layer = []
    for q, k in zip(z_q, z_k):
        rows = [_nce_rows(q[b], k[b], cfg.tau) for b in range(q.shape[0])]
        per_layer.append(torch.stack(rows).mean())
    return torch.stack(per_layer).mean()


def appearance_loss(y_prime_warped, y) -> torch.Tensor:
    """Mean absolute difference between the warped translated source and the target."""
    a = _as_batched(y_prime_warped)
    b = _as_batched(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def global_alignment_loss(y_prime_warped, y_hat) -> torch.Tensor:
    """Mean absolute difference between the warped translated source and the
    target's reconstruction; same functional form as the appearance term."""
    return appearance_loss(y_prime_warped, y_hat)


def smoothness_loss(flow) -> torch.Tensor:
    """Mean over pixels of the summed L2 norms of field differences to 4-neighbors.

    Border pixels count only in-bounds neighbors. The norm uses a masked sqrt so
    the gradient at an exactly-constant field is zero rather than NaN.
    """
    if isinstance(flow, DeformationField):
        flow = torch.from_numpy(flow.displacements.astype(np.float64))[None]
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"expected (B,2,H,W) flow, got shape {tuple(flow.shape)}")
    b, _, h, w = flow.shape
    dv = flow[:, :, 1:, :] - flow[:, :, :-1, :]
    dh = flow[:, :, :, 1:] - flow[:, :, :, :-1]

    def _safe_norm(d):
        s = (d * d).sum(dim=1)
        positive = s > 0
        return torch.where(positive, torch.sqrt(torch.where(positive, s, torch.ones_like(s))),
                           torch.zeros_like(s))

    # Each unordered neighbor pair contributes to both endpoints' per-pixel sums.
    pair_sum = _safe_norm(dv).sum(dim=(1, 2)) + _safe_norm(dh).sum(dim=(1, 2))
    return (2.0 * pair_sum / (h * w)).mean()


TERM_WEIGHT_ATTR = {
    "patchnce_x": "lambda_p",
    "patchnce_y": "lambda_p",
    "appearance": "lambda_a",
    "local": "lambda_l",
    "global": "lambda_g",
    "smooth": "lambda_s",
}


def total_loss(batch_terms: dict, w: LossWeights):
    """Weighted sum of the provided terms; unknown keys and non-finite values abort."""
    total = None
    for name, value in batch_terms.items():
        if name not in TERM_WEIGHT_ATTR:
            raise ValueError(f"unknown loss term {name!r}")
        v = value if isinstance(value, torch.Tensor) else torch.as_tensor(float(value), dtype=torch.float64)
        if not torch.isfinite(v).all():
            raise RuntimeError(f"non-finite loss term {name!r}: {value}")
        contrib = getattr(w, TERM_WEIGHT_ATTR[name]) * v
        total = contrib if total is None else total + contrib
    if total is None:
        return torch.zeros(())
    return total
