"""
IID sources, n-block states, typical projectors and typical-mass curves.

The n-block spectrum of an IID source is the multiset of n-fold products of
the base eigenvalues, so every typicality quantity can be computed from
multinomial multiplicities without building a ``d**n`` matrix. The matrix
path exists for small n and as a cross-check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .exceptions import DimensionGuardError, InputError
from .tensor_core import MAX_DIM, DensityOperator, SystemLayout, eig_desc, kron_all, von_neumann_entropy

# slack on log2 comparisons at the window edges
LOG_SLACK = 1e-12
# base eigenvalues closer than this are grouped into one level
LEVEL_TOL = 1e-12


@dataclass
class IIDSource:
    base: DensityOperator
    entropy: float = field(init=False)

    def __post_init__(self):
        if self.base.norm_flag != "normalized":
            raise InputError("an IID source needs a normalized base state")
        self.entropy = von_neumann_entropy(self.base)

    @classmethod
    def from_matrix(cls, m, label: str = "x") -> "IIDSource":
        m = np.asarray(m, dtype=complex)
        return cls(DensityOperator(m, SystemLayout.of((label, m.shape[0]))))

    @property
    def dim(self) -> int:
        return self.base.layout.total_dim

    def levels(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct nonzero base eigenvalues and their multiplicities."""
        w = np.clip(eig_desc(self.base).values, 0, None)
        w = w[w > 0]
        vals, mult = [], []
        for x in w:
            if vals and abs(vals[-1] - x) <= LEVEL_TOL:
                mult[-1] += 1
            else:
                vals.append(float(x))
                mult.append(1)
        return np.array(vals), np.array(mult)


@dataclass
class TypicalReport:
    n: int
    epsilon: float
    window: tuple[float, float]
    typical_dim: int
    mass: float
    qaep_pass_at: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        return [self.n, self.epsilon, self.typical_dim, f"{self.mass:.15g}"]

    def to_json(self) -> dict:
        return {"n": self.n, "epsilon": self.epsilon, "window": list(self.window),
                "typical_dim": self.typical_dim, "mass": self.mass,
                "qaep_pass_at": {str(k): v for k, v in self.qaep_pass_at.items()}}


def block_state(src: IIDSource, n: int, max_dim: int = MAX_DIM) -> DensityOperator:
    if n < 1:
        raise InputError("n must be positive")
    D = src.dim ** n
    if D > max_dim:
        raise DimensionGuardError(f"{src.dim}^{n} = {D} exceeds the guard {max_dim}; use the spectral path")
    lab = src.base.layout.labels[0]
    layout = SystemLayout.of(*[(f"{lab}{i}", src.dim) for i in range(n)])
    return DensityOperator(kron_all([src.base.matrix] * n), layout)


def _window(src: IIDSource, n: int, eps: float) -> tuple[float, float]:
    return (-n * (src.entropy + eps), -n * (src.entropy - eps))


def _in_window(log2_vals, lo: float, hi: float):
    return (log2_vals >= lo - LOG_SLACK * max(1.0, abs(lo))) & (log2_vals <= hi + LOG_SLACK * max(1.0, abs(hi)))


def _compositions(n: int, parts: int):
    """All tuples of ``parts`` non-negative integers summing to ``n``."""
    for cut in itertools.combinations(range(n + parts - 1), parts - 1):
        prev = -1
        out = []
        for c in cut:
            out.append(c - prev - 1)
            prev = c
        out.append(n + parts - 1 - prev - 1)
        yield tuple(out)


def spectral_typical(src: IIDSource, n: int, eps: float) -> tuple[int, float]:
    """``(typical_dim, mass)`` from multinomial counts over distinct base eigenvalues."""
    vals, mult = src.levels()
    lv = np.log2(vals)
    lo, hi = _window(src, n, eps)
    if len(vals) == 1:
        comps = np.array([[n]])
    elif len(vals) == 2:
        j = np.arange(n + 1)
        comps = np.stack([n - j, j], axis=1)
    else:
        comps = np.array(list(_compositions(n, len(vals))))
    log2_eig = comps @ lv
    sel = _in_window(log2_eig, lo, hi)
    c = comps[sel]
    # number of eigenvectors at each eigenvalue: multinomial times level degeneracies
    dim_count = sum(_exact_count(n, row, mult) for row in c)
    log_count = gammaln(n + 1) - np.sum(gammaln(c + 1), axis=1) + c @ np.log(mult)
    mass = float(np.sum(np.exp(log_count + log2_eig[sel] * math.log(2))))
    return dim_count, min(mass, 1.0)


def _exact_count(n: int, comp, mult) -> int:
    """Multinomial coefficient of ``comp`` times the level degeneracies, as an exact integer."""
    out = 1
    left = n
    for c, m in zip(comp, mult):
        out *= math.comb(left, int(c)) * int(m) ** int(c)
        left -= int(c)
    return out


def matrix_typical(src: IIDSource, n: int, eps: float, max_dim: int = MAX_DIM):
    """Projector onto the typical eigenvectors of the dense n-block state."""
    rho = block_state(src, n, max_dim)
    spec = eig_desc(rho)
    w = np.clip(spec.values, 0, None)
    lo, hi = _window(src, n, eps)
    with np.errstate(divide="ignore"):
        lw = np.log2(w)
    # eigenvalues at numerical zero never enter the window
    sel = _in_window(lw, lo, hi) & (w > 0)
    V = spec.vectors[:, sel]
    return V @ V.conj().T, int(sel.sum()), float(np.sum(w[sel]))


def typical_projector(src: IIDSource, n: int, epsilon: float, path: str = "matrix",
                      max_dim: int = MAX_DIM):
    """Typical projector and report.

    ``path="matrix"`` diagonalizes the dense block state (guarded);
    ``path="spectral"`` returns ``None`` for the projector and fills the report
    from multiplicities only.
    """
    if epsilon < 0:
        raise InputError("epsilon must be non-negative")
    lo, hi = _window(src, n, epsilon)
    window = (2.0 ** lo, 2.0 ** hi)
    if path == "matrix":
        P, tdim, mass = matrix_typical(src, n, epsilon, max_dim)
    elif path == "spectral":
        P = None
        tdim, mass = spectral_typical(src, n, epsilon)
    else:
        raise InputError(f"unknown path {path!r}")
    return P, TypicalReport(n, float(epsilon), window, tdim, float(mass))


def qaep_mass_curve(src: IIDSource, epsilon: float, n_list: Sequence[int],
                    deltas: Sequence[float] = (0.01,)) -> list[TypicalReport]:
    """Typical mass for each ``n`` (spectral path); every report carries the
    smallest tested ``n`` at which the mass exceeds ``1 - delta``."""
    reps = []
    for n in n_list:
        tdim, mass = spectral_typical(src, int(n), epsilon)
        lo, hi = _window(src, int(n), epsilon)
        reps.append(TypicalReport(int(n), float(epsilon), (2.0 ** lo, 2.0 ** hi), tdim, float(mass)))
    crossing = {}
    for d in deltas:
        hit = [r.n for r in reps if r.mass > 1 - d]
        crossing[float(d)] = min(hit) if hit else None
    for r in reps:
        r.qaep_pass_at = dict(crossing)
    return reps


def product_source(a: IIDSource, b: IIDSource) -> IIDSource:
    """Joint IID source of two independent sources."""
    lay = a.base.layout.concat(b.base.layout)
    return IIDSource(DensityOperator(np.kron(a.base.matrix, b.base.matrix), lay))
