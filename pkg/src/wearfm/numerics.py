"""Dense linear-algebra helpers and small statistical kernels.

Matrices are 2-D numpy arrays with row-major semantics. Weights are stored as
32-bit floats on disk; in-memory computation uses float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError, DimensionError, NumericError, ValidationError
from .seeding import as_rng

SYMMETRY_TOL = 1e-8


def column_norms(w: np.ndarray) -> np.ndarray:
    """L2 norm of each column of a 2-D matrix, returned as a 1-D vector."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise DimensionError(f"column_norms expects a non-empty 2-D matrix, got shape {w.shape}")
    return np.sqrt((w * w).sum(axis=0))


def sym_eig(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors as the corresponding columns (orthonormal).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValidationError(f"sym_eig expects a square matrix, got shape {s.shape}")
    if s.size == 0:
        raise ValidationError("sym_eig expects a non-empty matrix")
    asym = np.abs(s - s.T).max()
    if asym > SYMMETRY_TOL:
        raise ValidationError(f"matrix is not symmetric (max |S - S^T| = {asym:g})")
    vals, vecs = np.linalg.eigh((s + s.T) / 2.0)
    order = np.arange(vals.size)[::-1]  # eigh is ascending; reverse for descending
    return vals[order], vecs[:, order]


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = 100):
    n = points.shape[0]
    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        d = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d.argmin(axis=1)
        for c in range(centroids.shape[0]):
            if not (new_assign == c).any():
                # keep two live clusters: hand the empty one its farthest point
                far = d.min(axis=1).argmax()
                new_assign[far] = c
        if (new_assign == assign).all():
            break
        assign = new_assign
        for c in range(centroids.shape[0]):
            centroids[c] = points[assign == c].mean(axis=0)
    inertia = float(((points - centroids[assign]) ** 2).sum())
    return assign, centroids, inertia


def kmeans2(points, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two-means clustering of scalar or vector samples.

    Runs Lloyd's algorithm from two starts (the farthest point pair, and a
    seeded kmeans++ draw) and keeps the lower-inertia solution, so perfectly
    separated bimodal data is recovered for every seed. Returns (assignments,
    centroids) with centroids shaped (2, dim).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValidationError("kmeans2 needs at least two samples")
    if np.allclose(pts, pts[0], atol=0.0, rtol=0.0):
        raise DegeneracyError("all points are identical; no 2-clustering exists")

    # farthest-pair start
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    i, j = np.unravel_index(int(d2.argmax()), d2.shape)
    a1, c1, in1 = _lloyd(pts, np.stack([pts[i], pts[j]]).copy())

    # kmeans++ start
    rng = as_rng(seed)
    first = int(rng.integers(pts.shape[0]))
    w = d2[first].astype(np.float64)
    second = int(rng.choice(pts.shape[0], p=w / w.sum()))
    a2, c2, in2 = _lloyd(pts, np.stack([pts[first], pts[second]]).copy())

    if in2 < in1:
        return a2, c2
    return a1, c1


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
        )


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam step with bias correction; returns fresh params and state."""
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise DimensionError(f"adam_update shape mismatch for parameter {k!r}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


@dataclass
class GradCheckReport:
    """Worst-case agreement between analytic and numeric gradients."""

    max_relative_error: float
    worst_parameter: str
    probes: int = 0
    details: list[tuple[str, float]] = field(default_factory=list)


def finite_diff_grad_check(
    loss_and_grad,
    params: dict[str, np.ndarray],
    probes: int = 50,
    h: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad(params) -> (loss, grads)`` must be a pure function of the
    parameter dict. Probes are random coordinates of the flattened parameter
    space; relative error uses a 1e-6 floor so near-zero gradients do not
    explode the ratio.
    """
    rng = as_rng(seed)
    _, grads = loss_and_grad(params)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    if sizes.sum() == 0:
        raise ValidationError("no parameters to probe")

    worst = 0.0
    worst_id = ""
    details: list[tuple[str, float]] = []
    for _ in range(probes):
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        idx = int(rng.integers(params[name].size))
        perturbed = {k: v.copy() for k, v in params.items()}
        flat = perturbed[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        loss_plus, _ = loss_and_grad(perturbed)
        flat[idx] = orig - h
        loss_minus, _ = loss_and_grad(perturbed)
        if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
            raise NumericError(f"non-finite loss while probing {name}[{idx}]")
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[idx]) if name in grads else 0.0
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        details.append((f"{name}[{idx}]", rel))
        if rel > worst:
            worst = rel
            worst_id = f"{name}[{idx}]"
    return GradCheckReport(
        max_relative_error=worst, worst_parameter=worst_id, probes=probes, details=details
    )
