"""Descriptor-similarity statistics and attention-map export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import FeatureMap
from .imageio import write_pnm

# 8-connected offsets, each unordered pair counted once
_HALF_NEIGHBORHOOD = ((0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class SimilarityMatrix:
    values: np.ndarray        # (r, r)
    zero_descriptors: np.ndarray  # (r,) bool; rows/cols of zero vectors are 0

    @property
    def has_zero(self) -> bool:
        return bool(self.zero_descriptors.any())


def _as_values(fmap) -> np.ndarray:
    values = fmap.values if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    if values.ndim != 3:
        raise ValueError(f"expected an (h, w, d) feature map, got shape {values.shape}")
    return values.astype(np.float64)


def _unit(desc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(desc, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    return desc / np.where(norms == 0, 1.0, norms), zero


def descriptor_cosine_matrix(fmap) -> SimilarityMatrix:
    v = _as_values(fmap)
    unit, zero = _unit(v.reshape(-1, v.shape[-1]))
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    diag = np.where(zero, 0.0, 1.0)
    np.fill_diagonal(sim, diag)
    return SimilarityMatrix(sim, zero)


def neighbor_consistency(fmap) -> float:
    """Mean cosine similarity over all 8-connected pairs of grid sites."""
    v = _as_values(fmap)
    h, w, _ = v.shape
    if h * w < 4:
        raise ValueError(f"need at least 4 descriptors, got {h * w}")
    unit, _ = _unit(v)
    total, count = 0.0, 0
    for dy, dx in _HALF_NEIGHBORHOOD:
        a = unit[:h - dy, max(0, -dx):w - max(0, dx)]
        b = unit[dy:, max(0, dx):w - max(0, -dx)]
        total += float(np.sum(a * b))
        count += a.shape[0] * a.shape[1]
    return total / count


def dataset_neighbor_consistency(maps: np.ndarray) -> float:
    """Mean of :func:`neighbor_consistency` over a ``(N, h, w, d)`` stack."""
    return float(np.mean([neighbor_consistency(m) for m in maps]))


def descriptor_norm_stats(fmap) -> dict:
    """Mean and population standard deviation of the r descriptor norms."""
    v = _as_values(fmap)
    norms = np.linalg.norm(v.reshape(-1, v.shape[-1]), axis=-1)
    return {"mean": float(norms.mean()), "std": float(norms.std())}


def dataset_norm_dispersion(maps: np.ndarray) -> float:
    """Mean over images of std/mean of descriptor norms (0 for all-zero maps)."""
    out = []
    for m in maps:
        s = descriptor_norm_stats(m)
        out.append(s["std"] / s["mean"] if s["mean"] > 0 else 0.0)
    return float(np.mean(out))


def attention_heatmap(alpha: np.ndarray, h: int, w: int, size: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the α grid to ``size x size`` uint8, max α -> 255."""
    grid = np.asarray(alpha, dtype=np.float64).reshape(h, w)
    if size % h or size % w:
        raise ValueError(f"image size {size} is not a multiple of the {h}x{w} grid")
    up = np.repeat(np.repeat(grid, size // h, axis=0), size // w, axis=1)
    peak = up.max()
    scaled = up / peak * 255 if peak > 0 else np.zeros_like(up)
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def export_attention_map(image: np.ndarray, raw: np.ndarray, alpha: np.ndarray, path, grid: tuple) -> tuple:
    """Write ``<path>.pgm`` (heat, image extent) and ``<path>.csv`` (site, row, col, raw, alpha)."""
    h, w = grid
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if len(alpha) != h * w or len(raw) != h * w:
        raise ValueError("attention scores do not match the grid")
    if abs(alpha.sum() - 1) > 1e-6:
        raise ValueError("attention coefficients must sum to 1")
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    pgm, table = base.with_suffix(".pgm"), base.with_suffix(".csv")
    heat = attention_heatmap(alpha, h, w, np.asarray(image).shape[0])
    write_pnm(pgm, heat, comment=f"attention alpha scaled per map: max alpha {alpha.max():.9g} -> 255")
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site", "row", "col", "raw", "alpha"])
        for j in range(h * w):
            writer.writerow([j, j // w, j % w, repr(float(raw[j])), repr(float(alpha[j]))])
    return pgm, table


def read_attention_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["raw"]) for r in rows]), np.array([float(r["alpha"]) for r in rows]))


def write_matrix_csv(matrix: SimilarityMatrix, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, matrix.values, delimiter=",", fmt="%.6f")
    return path
