"""Non-resonance predicates and Monte-Carlo estimates of the excluded parameter set."""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binomtest

from .fourier import Lattice, ParameterPoint

Box = Sequence[tuple[float, float]]


def default_tau_gamma(d: int, eps: float, a: float = 0.5) -> tuple[float, float]:
    """tau = max(d, 2) + 1 and gamma = eps^(a / 2)."""
    return float(max(d, 2) + 1), float(eps ** (a / 2))


def default_index_bound(lat: Lattice) -> int:
    return lat.L * lat.d + 2 * lat.J


def default_box(d: int) -> list[tuple[float, float]]:
    return [(0.5, 1.5)] * (d + 2)


@lru_cache(maxsize=None)
def _indices(d: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero integer (l, j) with |l|_1 + |j|_1 <= K, and their 1-norms."""
    rng = range(-K, K + 1)
    ks = np.array([k for k in itertools.product(rng, repeat=d + 2)
                   if 0 < sum(abs(x) for x in k) <= K], dtype=np.int64)
    return ks, np.abs(ks).sum(1)


def diophantine_margin(lam: ParameterPoint, gamma: float, tau: float, K: int) -> tuple[float, tuple]:
    """min over 0 < |(l, j)| <= K of |omega.l + zeta.j| |(l, j)|^tau / gamma."""
    ks, kn = _indices(lam.d, int(K))
    vals = np.abs(ks @ lam.as_array()) * kn.astype(float) ** tau
    i = int(np.argmin(vals))
    if gamma == 0:
        return math.inf, tuple(int(x) for x in ks[i])
    return float(vals[i] / gamma), tuple(int(x) for x in ks[i])


def is_diophantine(lam: ParameterPoint, gamma: float, tau: float, K: int) -> tuple[bool, float]:
    m, _ = diophantine_margin(lam, gamma, tau, K)
    return m >= 1.0, m


def _lb(ell: np.ndarray) -> np.ndarray:
    return np.maximum(1.0, np.sqrt((ell ** 2).sum(-1)))


def melnikov1_values(mu: np.ndarray, xmodes: np.ndarray, omega: np.ndarray, L: int,
                     gamma: float, tau: float) -> np.ndarray:
    """|i omega.l + mu(j)| / (gamma / (<l>^tau |j|^tau)) over |l|_inf <= L and the x-modes."""
    d = len(omega)
    ells = np.array(list(itertools.product(range(-L, L + 1), repeat=d)), float)
    jn = np.sqrt((xmodes ** 2).sum(1))
    div = np.abs(1j * (ells @ omega)[:, None] + mu[None, :])
    thr = gamma / (_lb(ells)[:, None] ** tau * jn[None, :] ** tau)
    return div / thr


def is_melnikov1(mu: np.ndarray, lam: ParameterPoint, lat: Lattice, gamma: float,
                 tau: float) -> tuple[bool, float]:
    """First Melnikov conditions over the lattice range."""
    if gamma == 0:
        return True, math.inf
    v = melnikov1_values(mu, lat.xmodes, lam.as_array()[:lam.d], lat.L, gamma, tau)
    m = float(v.min())
    return m >= 1.0, m


def melnikov2_values(mu: np.ndarray, xmodes: np.ndarray, omega: np.ndarray, L: int,
                     gamma: float, tau: float, factor: float = 2.0) -> np.ndarray:
    """|i omega.l + mu(j) - mu(j')| over factor gamma / (<l>^tau |j|^tau |j'|^tau).

    The index (l = 0, j = j') is set to +inf.
    """
    d = len(omega)
    ells = np.array(list(itertools.product(range(-2 * L, 2 * L + 1), repeat=d)), float)
    jn = np.sqrt((xmodes ** 2).sum(1))
    dmu = mu[:, None] - mu[None, :]
    div = np.abs(1j * (ells @ omega)[:, None, None] + dmu[None])
    thr = factor * gamma / (_lb(ells)[:, None, None] ** tau
                            * (jn[:, None] * jn[None, :])[None] ** tau)
    out = div / thr
    zero = np.all(ells == 0, axis=1)
    out[zero] = np.where(np.eye(len(mu), dtype=bool), np.inf, out[zero])
    return out


def is_melnikov2(mu: np.ndarray, lam: ParameterPoint, lat: Lattice, gamma: float,
                 tau: float, factor: float = 2.0) -> tuple[bool, float]:
    """Second Melnikov conditions over |l| <= 2L and all pairs of lattice x-modes."""
    if gamma == 0:
        return True, math.inf
    v = melnikov2_values(mu, lat.xmodes, lam.as_array()[:lam.d], lat.L, gamma, tau, factor)
    m = float(v.min())
    return m >= 1.0, m


def unperturbed_mu(lam: ParameterPoint, lat: Lattice) -> np.ndarray:
    return 1j * (lat.xmodes @ np.asarray(lam.zeta, float))


# sampling ----------------------------------------------------------------------------------

class GoodSetPredicate:
    """Membership in the set of parameters passing all scans at threshold gamma.

    ``excluded_level`` returns the smallest gamma at which a point is excluded,
    so a single evaluation answers all gammas: a point is excluded at gamma iff
    gamma > level.  Eigenvalue corrections are taken as zero.
    """

    def __init__(self, lat: Lattice, tau: float, K: int | None = None,
                 melnikov: bool = True):
        self.lat = lat
        self.tau = tau
        self.K = default_index_bound(lat) if K is None else K
        self.melnikov = melnikov

    def excluded_level(self, lam: ParameterPoint) -> float:
        dm, _ = diophantine_margin(lam, 1.0, self.tau, self.K)
        level = dm
        if self.melnikov:
            mu = unperturbed_mu(lam, self.lat)
            om = lam.as_array()[:lam.d]
            m1 = float(melnikov1_values(mu, self.lat.xmodes, om, self.lat.L, 1.0, self.tau).min())
            m2 = float(melnikov2_values(mu, self.lat.xmodes, om, self.lat.L, 1.0, self.tau,
                                        2.0).min())
            level = min(level, m1, m2)
        return level

    def __call__(self, lam: ParameterPoint, gamma: float) -> bool:
        return gamma <= self.excluded_level(lam)


def sample_points(box: Box, d: int, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return lo + (hi - lo) * rng.random((n, d + 2))


@dataclass
class MeasureRow:
    gamma: float
    n_samples: int
    excluded: int
    excluded_fraction: float
    ci_low: float
    ci_high: float


def sample_measure(box: Box, gammas: Sequence[float], predicate: Callable[[ParameterPoint], float],
                   n_samples: int, seed: int, d: int = 1, threads: int = 1) -> list[MeasureRow]:
    """Excluded fraction per gamma with Wilson 95% intervals.

    ``predicate`` maps a parameter point to its exclusion level (see GoodSetPredicate).
    """
    pts = sample_points(box, d, n_samples, seed)
    lams = [ParameterPoint.from_array(p, d) for p in pts]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            levels = np.array(list(ex.map(predicate, lams)))
    else:
        levels = np.array([predicate(lam) for lam in lams])
    rows = []
    for g in gammas:
        k = int(np.sum(levels < g)) if g > 0 else 0
        if n_samples:
            ci = binomtest(k, n_samples).proportion_ci(0.95, method="wilson")
            lo, hi = float(ci.low), float(ci.high)
        else:
            lo, hi = 0.0, 1.0
        rows.append(MeasureRow(float(g), n_samples, k, k / n_samples if n_samples else 0.0, lo, hi))
    return rows


def fitted_constant(rows: Sequence[MeasureRow]) -> float:
    """C = max over gamma > 0 of excluded_fraction / gamma."""
    vals = [r.excluded_fraction / r.gamma for r in rows if r.gamma > 0]
    return max(vals) if vals else 0.0


def rows_to_csv(rows: Sequence[MeasureRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["gamma", "n_samples", "excluded_fraction", "ci_low", "ci_high"])
    for r in rows:
        w.writerow([repr(r.gamma), r.n_samples, repr(r.excluded_fraction), repr(r.ci_low),
                    repr(r.ci_high)])
    return buf.getvalue()


def strip_width(k: np.ndarray, lam: ParameterPoint, gamma: float, tau: float,
                half_range: float = 0.5, n_grid: int = 4001) -> float:
    """Length of {s : |k.(lam + s k/|k|)| < gamma / |k|_1^tau} along the k-direction.

    The linear form is monotone in s, so the exact width is 2 gamma / (|k|_1^tau |k|);
    the grid value is a sampled check of it.
    """
    k = np.asarray(k, float)
    kn = float(np.linalg.norm(k))
    thr = gamma / np.abs(k).sum() ** tau
    s = np.linspace(-half_range, half_range, n_grid)
    vals = np.abs(k @ lam.as_array() + s * kn)
    h = s[1] - s[0]
    return float(np.sum(vals < thr) * h)
