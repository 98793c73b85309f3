"""Spectral diagnostics of the aerial/ground feature covariance difference."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError


@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    cumulative_energy: np.ndarray
    top_k_energy: dict[int, float] = field(default_factory=dict)

    def energy_at(self, k: int) -> float:
        if k <= 0:
            return 0.0
        return float(self.cumulative_energy[min(k, len(self.cumulative_energy)) - 1])


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def covariance(features) -> np.ndarray:
    """Sample covariance (divisor M-1) of L2-normalized, mean-centered rows."""
    x = _as_array(features)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"need at least 2 rows, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InputError(f"row {int(np.flatnonzero(norms[:, 0] == 0)[0])} has zero norm")
    x = x / norms
    x = x - x.mean(axis=0)
    c = x.T @ x / (x.shape[0] - 1)
    return 0.5 * (c + c.T)


def jacobi_eigenvalues(a, tol: float = 1e-10, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm falls below
    ``tol * max(1, ||a||_F)``.
    """
    a = _as_array(a).copy()
    n = a.shape[0]
    if a.shape != (n, n):
        raise InputError(f"square matrix required, got {a.shape}")
    scale = max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = math.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 or abs(apq) < 1e-18 * (abs(a[p, p]) + abs(a[q, q])):
                    # negligible next to the diagonal; zeroing it cannot move an eigenvalue measurably
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p and q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
    return np.diag(a).copy()


def spectrum(sigma_a, sigma_g, ks=(8, 16), sym_tol: float = 1e-9) -> SpectrumReport:
    """Singular values of ``sigma_a - sigma_g`` with cumulative energy fractions."""
    a, g = _as_array(sigma_a), _as_array(sigma_g)
    if a.shape != g.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"covariances must be square and equal-sized: {a.shape} vs {g.shape}")
    for name, m in (("aerial", a), ("ground", g)):
        asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
        if asym > sym_tol * max(1.0, float(np.max(np.abs(m)))):
            raise InputError(f"{name} covariance is not symmetric (max asymmetry {asym:.3g})")
    diff = a - g
    diff = 0.5 * (diff + diff.T)
    sv = np.sort(np.abs(jacobi_eigenvalues(diff)))[::-1]
    energy = sv ** 2
    total = float(energy.sum())
    if total > 0:
        cum = np.cumsum(energy) / total
        cum[-1] = 1.0
    else:
        cum = np.zeros_like(sv)
    rep = SpectrumReport(singular_values=sv, cumulative_energy=cum)
    rep.top_k_energy = {int(k): rep.energy_at(int(k)) for k in ks}
    return rep


def write_spectrum_csv(rep: SpectrumReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "singular_value", "cumulative_energy"])
        for i, (s, c) in enumerate(zip(rep.singular_values, rep.cumulative_energy), 1):
            w.writerow([i, repr(float(s)), repr(float(c))])
