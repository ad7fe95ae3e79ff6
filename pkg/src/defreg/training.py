"""Joint optimization of the registration net, translator, and projection heads.

One Adam optimizer over all parameters; constant learning rate through
`decay_start_epoch`, then a linear ramp to zero at the final epoch. Every
random choice derives from (seed, epoch, step, term), so disabled terms leave
the remaining terms' sampling untouched and checkpoint resume is exact.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import PairedDataset
from .grids import DeformationField, warp_tensor
from .losses import (LossWeights, NCEConfig, appearance_loss, global_alignment_loss,
                     local_alignment_loss, patch_nce_loss, smoothness_loss, total_loss)
from .metrics import evaluate_pair
from .networks import JointNetworks, build_networks

TERM_COLUMNS = ("patchnce_x", "patchnce_y", "appearance", "local", "global", "smooth")
HISTORY_COLUMNS = ("epoch", "step") + TERM_COLUMNS + ("total", "lr", "val_dsc", "val_hd95")

# Stable stream ids: 0 = data order, others = per-term location sampling.
_RNG_STREAMS = {"order": 0, "patchnce_x": 1, "patchnce_y": 2, "local": 3}


class TrainingDiverged(RuntimeError):
    """Raised when a loss or parameter goes non-finite; prior checkpoints are kept."""


@dataclass
class VariantFlags:
    use_local: bool = True
    use_global: bool = True


VARIANTS = {
    "full": VariantFlags(True, True),
    "no_local": VariantFlags(False, True),
    "no_global": VariantFlags(True, False),
    "no_local_global": VariantFlags(False, False),
}


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    decay_start_epoch: int = 200
    batch_size: int = 1
    seed: int = 0
    checkpoint_interval: int = 25
    weights: LossWeights = field(default_factory=LossWeights)
    nce: NCEConfig = field(default_factory=NCEConfig)
    flags: VariantFlags = field(default_factory=VariantFlags)
    ngf: int = 64
    reg_channels: tuple = (16, 32, 32, 64, 64)
    embed_dim: int = 256
    hidden_dim: int = 256

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay_start_epoch <= self.epochs:
            raise ValueError("need 0 < decay_start_epoch <= epochs")
        if self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ValueError("batch_size and checkpoint_interval must be >= 1")
        self.reg_channels = tuple(self.reg_channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["reg_channels"] = list(self.reg_channels)
        d["nce"]["layer_ids"] = list(self.nce.layer_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "nce" in d:
            nce = dict(d["nce"])
            if "layer_ids" in nce:
                nce["layer_ids"] = tuple(nce["layer_ids"])
            d["nce"] = NCEConfig(**nce)
        if "flags" in d:
            d["flags"] = VariantFlags(**d["flags"])
        if "reg_channels" in d:
            d["reg_channels"] = tuple(d["reg_channels"])
        return cls(**d)


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()


def make_variant(config: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return dataclasses.replace(config, flags=dataclasses.replace(VARIANTS[name]))


def lr_at_epoch(e: int, config: TrainConfig) -> float:
    """Constant lr through decay_start_epoch, then linear decay to 0 at the last epoch."""
    if not 1 <= e <= config.epochs:
        raise ValueError(f"epoch {e} out of range [1, {config.epochs}]")
    if e <= config.decay_start_epoch:
        return config.lr
    span = config.epochs - config.decay_start_epoch
    return config.lr * (1.0 - (e - config.decay_start_epoch) / span)


def term_rngs(seed: int, epoch: int, step: int) -> dict:
    """Independent generators per sampling consumer for one optimization step."""
    return {
        name: np.random.default_rng(np.random.SeedSequence((seed, epoch, step, sid)))
        for name, sid in _RNG_STREAMS.items()
        if name != "order"
    }


def _order_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, 0, _RNG_STREAMS["order"])))


def build_from_config(config: TrainConfig) -> JointNetworks:
    return build_networks(in_channels=1, ngf=config.ngf, reg_channels=config.reg_channels,
                          layer_ids=config.nce.layer_ids, embed_dim=config.embed_dim,
                          hidden_dim=config.hidden_dim, seed=config.seed)


def train_step(x: torch.Tensor, y: torch.Tensor, nets: JointNetworks,
               optimizer: torch.optim.Optimizer, config: TrainConfig,
               rngs: dict) -> dict:
    """One joint update. Terms with zero weight (or disabled flags) are skipped
    entirely, so their removal is bitwise equivalent to deleting the term."""
    w = config.weights
    flags = config.flags
    enc = nets.translation.encoder
    heads = nets.heads

    flow = nets.registration(x, y)
    y_prime = nets.translation(x)
    y_hat = nets.translation(y)
    yp_warp = warp_tensor(y_prime, flow)

    terms = {}
    if w.lambda_p > 0:
        terms["patchnce_x"] = patch_nce_loss(x, y_prime, enc, heads, config.nce, rngs["patchnce_x"])
        terms["patchnce_y"] = patch_nce_loss(y, y_hat, enc, heads, config.nce, rngs["patchnce_y"])
    if w.lambda_a > 0:
        terms["appearance"] = appearance_loss(yp_warp, y)
    if flags.use_local and w.lambda_l > 0:
        x_warp = warp_tensor(x, flow)
        terms["local"] = local_alignment_loss(x_warp, y, enc, heads, config.nce, rngs["local"])
    if flags.use_global and w.lambda_g > 0:
        terms["global"] = global_alignment_loss(yp_warp, y_hat)
    if w.lambda_s > 0:
        terms["smooth"] = smoothness_loss(flow)

    try:
        total = total_loss(terms, w)
    except RuntimeError as e:
        raise TrainingDiverged(str(e)) from e

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    grad_norms = {}
    for name, module in (("registration", nets.registration),
                         ("translation", nets.translation), ("heads", nets.heads)):
        sq = 0.0
        for p in module.parameters():
            if p.grad is not None:
                sq += float((p.grad.detach() ** 2).sum())
        grad_norms[name] = sq ** 0.5
    optimizer.step()

    return {
        "loss_terms": {k: float(v.detach()) for k, v in terms.items()},
        "total": float(total.detach()),
        "grad_norms": grad_norms,
    }


def save_checkpoint(path, nets: JointNetworks, optimizer, epoch: int,
                    config: TrainConfig, best_val_dsc: float | None = None):
    payload = {
        "model": nets.state_dict(),
        "optimizer": optimizer.state_dict(),
        "epoch": epoch,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "best_val_dsc": best_val_dsc,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def restore_networks(payload: dict) -> tuple:
    """(nets, config) rebuilt from a checkpoint payload."""
    config = TrainConfig.from_dict(payload["config"])
    nets = build_from_config(config)
    nets.load_state_dict(payload["model"])
    return nets, config


def _records_to_tensors(records) -> tuple:
    x = torch.stack([torch.from_numpy(r.source.data.astype(np.float32)) for r in records])[:, None]
    y = torch.stack([torch.from_numpy(r.target.data.astype(np.float32)) for r in records])[:, None]
    return x, y


def validate(nets: JointNetworks, dataset: PairedDataset) -> tuple:
    """(mean DSC, mean HD95) over pairs with masks; (nan, nan) when none have any."""
    dscs, hds = [], []
    for rec in dataset:
        if rec.source_mask is None or rec.target_mask is None:
            continue
        x, y = _records_to_tensors([rec])
        with torch.no_grad():
            flow = nets.registration(x, y)
        rep = evaluate_pair(rec.source_mask, rec.target_mask,
                            DeformationField(flow[0].numpy()),
                            spacing=float(rec.meta.get("spacing_mm", 1.0)))
        dvals = [e["dice"] for e in rep["labels"].values()]
        hvals = [e["hd95"] for e in rep["labels"].values() if not e["hd95_missing"]]
        if dvals:
            dscs.append(float(np.mean(dvals)))
        if hvals:
            hds.append(float(np.mean(hvals)))
    return (float(np.mean(dscs)) if dscs else float("nan"),
            float(np.mean(hds)) if hds else float("nan"))


def _to_u8(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().numpy()
    return np.round((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def _save_sample(path, nets: JointNetworks, record):
    """Montage of x, y, T(x), warped T(x), warped x for one training pair."""
    x, y = _records_to_tensors([record])
    with torch.no_grad():
        flow = nets.registration(x, y)
        y_prime = nets.translation(x)
        yp_warp = warp_tensor(y_prime, flow)
        x_warp = warp_tensor(x, flow)
    panels = [x, y, y_prime, yp_warp, x_warp]
    strip = np.concatenate([_to_u8(p[0, 0]) for p in panels], axis=1)
    Image.fromarray(strip, mode="L").save(path)


@dataclass
class FitResult:
    best_checkpoint: Path
    last_checkpoint: Path
    history: list
    best_val_dsc: float


def fit(train_ds: PairedDataset, val_ds: PairedDataset | None, config: TrainConfig,
        run_dir, resume=None, quiet: bool = True) -> FitResult:
    """Full training run with periodic validation, best/last checkpoints, CSV history."""
    if len(train_ds) == 0:
        raise ValueError("empty training split")
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    samples_dir = run_dir / "samples"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    samples_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    nets = build_from_config(config)
    optimizer = torch.optim.Adam(nets.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2))
    start_epoch = 1
    best_val = float("-inf")
    if resume is not None:
        payload = load_checkpoint(resume)
        if payload["config_hash"] != config_hash(config):
            raise ValueError("checkpoint config does not match the requested config")
        nets.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"] + 1
        if payload.get("best_val_dsc") is not None:
            best_val = payload["best_val_dsc"]

    history_path = run_dir / "history.csv"
    new_file = not history_path.exists()
    history = []
    best_path = ckpt_dir / "best.ckpt"
    last_path = ckpt_dir / "last.ckpt"

    with open(history_path, "a", newline="") as hist_file:
        writer = csv.DictWriter(hist_file, fieldnames=HISTORY_COLUMNS)
        if new_file:
            writer.writeheader()
        for epoch in range(start_epoch, config.epochs + 1):
            lr_e = lr_at_epoch(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr_e
            order = _order_rng(config.seed, epoch).permutation(len(train_ds))
            epoch_rows = []
            for step in range(0, len(order), config.batch_size):
                batch = [train_ds[int(i)] for i in order[step:step + config.batch_size]]
                x, y = _records_to_tensors(batch)
                out = train_step(x, y, nets, optimizer, config,
                                 term_rngs(config.seed, epoch, step // config.batch_size))
                row = {c: "" for c in HISTORY_COLUMNS}
                row.update({"epoch": epoch, "step": step // config.batch_size,
                            "total": f"{out['total']:.8f}", "lr": f"{lr_e:.8f}"})
                for k, v in out["loss_terms"].items():
                    row[k] = f"{v:.8f}"
                epoch_rows.append(row)

            for p in nets.parameters():
                if not torch.isfinite(p).all():
                    (run_dir / "DIVERGED.txt").write_text(
                        f"non-finite parameters after epoch {epoch}\n")
                    raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")

            at_checkpoint = epoch % config.checkpoint_interval == 0 or epoch == config.epochs
            if at_checkpoint:
                val_dsc, val_hd95 = (validate(nets, val_ds) if val_ds is not None
                                     else (float("nan"), float("nan")))
                if epoch_rows:
                    epoch_rows[-1]["val_dsc"] = "" if np.isnan(val_dsc) else f"{val_dsc:.6f}"
                    epoch_rows[-1]["val_hd95"] = "" if np.isnan(val_hd95) else f"{val_hd95:.6f}"
                save_checkpoint(last_path, nets, optimizer, epoch, config, best_val)
                if not np.isnan(val_dsc) and val_dsc >= best_val:
                    best_val = val_dsc
                    save_checkpoint(best_path, nets, optimizer, epoch, config, best_val)
                _save_sample(samples_dir / f"epoch_{epoch:03d}.png", nets, train_ds[0])
                if not quiet:
                    print(f"epoch {epoch}: lr={lr_e:.6f} val_dsc={val_dsc:.4f}")

            for row in epoch_rows:
                writer.writerow(row)
            hist_file.flush()
            history.extend(epoch_rows)

    if not best_path.exists():
        # No validation masks anywhere: fall back to the last state as "best".
        save_checkpoint(best_path, nets, optimizer, config.epochs, config, best_val)
    return FitResult(best_checkpoint=best_path, last_checkpoint=last_path,
                     history=history, best_val_dsc=best_val)
