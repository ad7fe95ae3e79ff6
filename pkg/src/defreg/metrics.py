"""Registration quality metrics: Dice overlap and 95th-percentile Hausdorff distance.

HD95 convention: boundary pixels (8-connectivity, out-of-image counts as
background), Euclidean point-to-set distances scaled by pixel spacing, max of
the two directed 95th percentiles with linear-interpolation percentiles.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree

from .grids import DeformationField, MaskGrid, jacobian_stats, warp


def _binary(mask: MaskGrid, label: int) -> np.ndarray:
    return mask.labels == label


def dice(a: MaskGrid, b: MaskGrid, label: int) -> float:
    """2|A&B| / (|A|+|B|); 1.0 when both sets are empty, 0.0 when exactly one is."""
    if a.labels.shape != b.labels.shape:
        raise ValueError(f"shape mismatch: {a.labels.shape} vs {b.labels.shape}")
    sa = _binary(a, label)
    sb = _binary(b, label)
    na, nb = int(sa.sum()), int(sb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(sa, sb).sum())
    return 2.0 * inter / (na + nb)


def boundary_pixels(binary: np.ndarray) -> np.ndarray:
    """N x 2 (row, col) coordinates of set pixels with any 8-neighbor outside the set."""
    binary = np.asarray(binary, dtype=bool)
    if not binary.any():
        return np.zeros((0, 2), dtype=np.int64)
    interior = binary_erosion(binary, structure=np.ones((3, 3), dtype=bool), border_value=0)
    return np.argwhere(binary & ~interior)


def hd95(a: MaskGrid, b: MaskGrid, label: int, spacing: float = 1.0) -> float:
    """Max of the directed 95th-percentile boundary distances, in spacing units."""
    if a.labels.shape != b.labels.shape:
        raise ValueError(f"shape mismatch: {a.labels.shape} vs {b.labels.shape}")
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    pa = boundary_pixels(_binary(a, label)).astype(np.float64) * spacing
    pb = boundary_pixels(_binary(b, label)).astype(np.float64) * spacing
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError(f"empty mask for label {label}")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def evaluate_pair(source_mask: MaskGrid, target_mask: MaskGrid,
                  deformation: DeformationField, spacing: float = 1.0) -> dict:
    """Warp the source mask (nearest) and score it against the target mask per label."""
    warped = warp(source_mask, deformation, interpolation="nearest")
    labels = sorted(set(source_mask.labels_present()) | set(target_mask.labels_present()))
    per_label = {}
    for lab in labels:
        entry = {"dice": dice(warped, target_mask, lab)}
        try:
            entry["hd95"] = hd95(warped, target_mask, lab, spacing)
            entry["hd95_missing"] = False
        except ValueError:
            entry["hd95"] = None
            entry["hd95_missing"] = True
        per_label[lab] = entry
    return {"labels": per_label, "jacobian": jacobian_stats(deformation)}


@dataclass
class EvalReport:
    dsc_mean: float
    dsc_std: float
    hd95_mean: float | None
    hd95_std: float | None
    per_label: dict = field(default_factory=dict)
    per_pair: list = field(default_factory=list)
    jacobian: dict = field(default_factory=dict)
    units: str = "px"

    def to_dict(self) -> dict:
        return {
            "dsc_mean": self.dsc_mean,
            "dsc_std": self.dsc_std,
            "hd95_mean": self.hd95_mean,
            "hd95_std": self.hd95_std,
            "per_label": self.per_label,
            "per_pair": self.per_pair,
            "jacobian": self.jacobian,
            "units": self.units,
        }


def _mean_std(values) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(reports: list, units: str = "px") -> EvalReport:
    """Mean and population std over pairs; per-pair metrics average their labels.

    Pairs whose hd95 is missing for every label are excluded from hd95 aggregates.
    """
    if not reports:
        raise ValueError("need at least one per-pair report")
    pair_dsc = []
    pair_hd = []
    label_dice: dict = {}
    label_hd: dict = {}
    for rep in reports:
        dvals = [e["dice"] for e in rep["labels"].values()]
        hvals = [e["hd95"] for e in rep["labels"].values() if not e["hd95_missing"]]
        pair_dsc.append(float(np.mean(dvals)) if dvals else 1.0)
        if hvals:
            pair_hd.append(float(np.mean(hvals)))
        for lab, e in rep["labels"].items():
            label_dice.setdefault(lab, []).append(e["dice"])
            if not e["hd95_missing"]:
                label_hd.setdefault(lab, []).append(e["hd95"])
    dsc_mean, dsc_std = _mean_std(pair_dsc)
    hd_mean, hd_std = _mean_std(pair_hd) if pair_hd else (None, None)
    per_label = {}
    for lab in sorted(label_dice):
        dm, ds = _mean_std(label_dice[lab])
        entry = {"dice_mean": dm, "dice_std": ds, "n": len(label_dice[lab])}
        if lab in label_hd:
            hm, hs = _mean_std(label_hd[lab])
            entry.update({"hd95_mean": hm, "hd95_std": hs})
        per_label[lab] = entry
    jac = {}
    fracs = [rep["jacobian"]["fraction_nonpositive"] for rep in reports if "jacobian" in rep]
    if fracs:
        jac = {
            "fraction_nonpositive_mean": float(np.mean(fracs)),
            "fraction_nonpositive_max": float(np.max(fracs)),
            "min_det": float(min(rep["jacobian"]["min_det"] for rep in reports)),
        }
    return EvalReport(dsc_mean, dsc_std, hd_mean, hd_std,
                      per_label=per_label, per_pair=reports, jacobian=jac, units=units)


def write_report(report: EvalReport, out_dir, pair_names: list | None = None) -> Path:
    """Persist report.json (full structure) and report.csv (one row per pair per label)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair", "label", "dice", "hd95", "hd95_missing", "units"])
        for i, rep in enumerate(report.per_pair):
            name = pair_names[i] if pair_names else f"pair_{i:04d}"
            for lab in sorted(rep["labels"]):
                e = rep["labels"][lab]
                writer.writerow([name, lab, f"{e['dice']:.6f}",
                                 "" if e["hd95"] is None else f"{e['hd95']:.6f}",
                                 int(e["hd95_missing"]), report.units])
    return out_dir / "report.json"
