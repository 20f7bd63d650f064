"""Global Moran's I for residual vectors over a sparse neighbour graph."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _backend
from ._normal import norm_cdf, norm_sf
from .errors import ValidationError


class MoranNull(str, enum.Enum):
    RANDOMIZATION = "randomization"
    NORMALITY = "normality"


@dataclass(frozen=True)
class MoranResult:
    I: float
    expectation: float
    variance: float
    z: float
    p: float
    n: int
    S0: float
    S1: float
    S2: float
    null: str
    alternative: str

    def as_dict(self):
        out = asdict(self)
        out["statistic"] = out.pop("I")
        out["p_value"] = out.pop("p")
        return out


def moran_expectation(n: int) -> float:
    return -1.0 / (n - 1)


def weight_moments(graph):
    """(S0, S1, S2) with S1, S2 built from the symmetrised sums w_ij + w_ji."""
    w = graph.to_scipy()
    s0 = float(w.sum())
    sym = w + w.T
    s1 = 0.5 * float(sym.multiply(sym).sum())
    rows = np.asarray(w.sum(axis=1)).ravel()
    cols = np.asarray(w.sum(axis=0)).ravel()
    s2 = float(np.sum((rows + cols) ** 2))
    return s0, s1, s2


def morans_i(residuals, graph, null=MoranNull.RANDOMIZATION, alternative="two-sided"):
    """Moran's I of ``residuals`` on ``graph`` with Cliff-Ord moments.

    Residuals are mean-centred first. ``alternative`` is ``"two-sided"``,
    ``"greater"`` or ``"less"``.
    """
    null = MoranNull(null)
    x = np.ascontiguousarray(residuals, dtype=np.float64)
    n = x.shape[0]
    if n != graph.n:
        raise ValidationError(f"residual length {n} does not match graph size {graph.n}")
    if n < 3:
        raise ValidationError("Moran's I needs at least 3 observations")
    if graph.n_edges == 0:
        raise ValidationError("graph has no edges")
    if null is MoranNull.RANDOMIZATION and n < 4:
        raise ValidationError("the randomization variance needs at least 4 observations")
    z = x - x.mean()
    m2 = float(z @ z)
    if not m2 > 0 or np.all(x == x[0]):
        raise ValidationError("residuals are constant; Moran's I is undefined")

    s0, num = _backend.kernels.weighted_cross_sum(graph.indptr, graph.indices, graph.weights, z)
    den = 0.0
    for v in z.tolist():
        den = den + v * v
    stat = n / s0 * (num / den)

    _, s1, s2 = weight_moments(graph)
    e = moran_expectation(n)
    nn = float(n)
    if null is MoranNull.NORMALITY:
        e2 = (nn * nn * s1 - nn * s2 + 3.0 * s0 * s0) / ((nn * nn - 1.0) * s0 * s0)
    else:
        b2 = nn * float(np.sum(z ** 4)) / (m2 * m2)
        a = nn * ((nn * nn - 3.0 * nn + 3.0) * s1 - nn * s2 + 3.0 * s0 * s0)
        b = b2 * ((nn * nn - nn) * s1 - 2.0 * nn * s2 + 6.0 * s0 * s0)
        e2 = (a - b) / ((nn - 1.0) * (nn - 2.0) * (nn - 3.0) * s0 * s0)
    var = e2 - e * e
    zstat = (stat - e) / math.sqrt(var) if var > 0 else math.nan
    if alternative == "two-sided":
        p = 2.0 * norm_sf(abs(zstat))
    elif alternative == "greater":
        p = norm_sf(zstat)
    elif alternative == "less":
        p = norm_cdf(zstat)
    else:
        raise ValidationError(f"unknown alternative {alternative!r}")
    return MoranResult(stat, e, var, zstat, p, n, s0, s1, s2, null.value, alternative)


def permutation_statistics(residuals, graph, n_perm, seed=0, batch=2000):
    """Moran's I for ``n_perm`` random permutations of ``residuals`` (vectorised)."""
    rng = np.random.default_rng(seed)
    x = np.asarray(residuals, dtype=np.float64)
    z = x - x.mean()
    w = graph.to_scipy()
    n = len(z)
    scale = n / float(w.sum()) / float(z @ z)
    out = np.empty(n_perm)
    done = 0
    while done < n_perm:
        m = min(batch, n_perm - done)
        perm = rng.permuted(np.tile(z, (m, 1)), axis=1)
        wz = (w @ perm.T).T
        out[done:done + m] = scale * np.einsum("ij,ij->i", perm, wz)
        done += m
    return out
