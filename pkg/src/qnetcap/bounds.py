"""
Constructive checkers for the fidelity inequalities the reductions rely on,
randomized sweep families for each of them, subspace carving, and the
uniform-source entanglement fidelity check.

Every checker returns a :class:`BoundReport`. ``passed`` is decided only by
``margin >= -TAU_BOUND``; nothing is clipped or rounded first.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .channels import KrausMap
from .exceptions import InputError, LayoutError
from .fidelity import (MinimizerConfig, Subspace, entanglement_fidelity, local_entanglement_fidelity,
                       min_subspace_fidelity)
from .tensor_core import (DensityOperator, PureState, SystemLayout, _eig_desc_array, eig_desc, kron_all,
                          permute, ptrace, purify, random_density, random_pure, von_neumann_entropy)

TAU_BOUND = 1e-9
DEGENERACY_GAP = 1e-10
LEMMA8_EPS_MAX = 1.0 / 72
FAMILY_VERSION = 1


def _cjson(x) -> dict:
    x = np.asarray(x)
    return {"re": np.real(x).tolist(), "im": np.imag(x).tolist()}


@dataclass
class BoundReport:
    """Outcome of one inequality check.

    ``margin`` is oriented so that non-negative means the inequality holds.
    ``extras`` carries auxiliary quantities (for example a sharper or
    corrected right-hand side) that do not affect ``passed``.
    """

    name: str
    lhs: float
    rhs: float
    margin: float
    witness: dict = field(default_factory=dict)
    inconclusive: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.margin >= -TAU_BOUND)

    def to_json(self, with_witness: bool = True) -> dict:
        out = {"name": self.name, "lhs": float(self.lhs), "rhs": float(self.rhs),
               "margin": float(self.margin), "pass": self.passed, "inconclusive": self.inconclusive}
        if self.extras:
            out["extras"] = self.extras
        if with_witness:
            out["witness"] = self.witness
        return out


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _as_vectors(states, dims=None) -> list[np.ndarray]:
    out = []
    for s in states:
        v = s.vector if isinstance(s, PureState) else np.asarray(s, dtype=complex).reshape(-1)
        n = np.linalg.norm(v)
        if abs(n - 1) > 1e-8:
            raise InputError(f"state has norm {n}, expected 1")
        out.append(v)
    if dims is not None:
        if len(out) != len(dims):
            raise LayoutError(f"{len(out)} states for {len(dims)} factors")
        for v, d in zip(out, dims):
            if v.size != d:
                raise LayoutError(f"state of dimension {v.size} on a factor of dimension {d}")
    return out


def _rho_matrix(rho) -> tuple[np.ndarray, list[int]]:
    if isinstance(rho, DensityOperator):
        return rho.matrix, rho.layout.dims
    m, dims = rho
    return np.asarray(m, dtype=complex), list(dims)


def _expect(m: np.ndarray, v: np.ndarray) -> float:
    return float(np.real(v.conj() @ m @ v))


# ---------------------------------------------------------------------------
# Inequality checkers
# ---------------------------------------------------------------------------


def check_local_from_global(rho, states) -> BoundReport:
    """Global overlap ``g`` forces every local overlap above ``g`` and the
    product of local states above ``1 - k(1-g)``."""
    m, dims = _rho_matrix(rho)
    vs = _as_vectors(states, dims)
    k = len(dims)
    g = _expect(m, kron_all(vs))
    eps = 1 - g
    locals_ = [_expect(ptrace(m, dims, [l]), vs[l]) for l in range(k)]
    p = float(np.prod(locals_))
    m_local = min(l - g for l in locals_)
    m_prod = p - (1 - k * eps)
    margin = min(m_local, m_prod)
    return BoundReport("lemma1", p, 1 - k * eps, margin,
                       {"dims": dims, "rho": _cjson(m), "states": [_cjson(v) for v in vs]},
                       extras={"global": g, "local": locals_, "product": p})


def check_global_from_local(rho, states, epsilons=None) -> BoundReport:
    """Local overlaps ``>= 1 - eps_i`` force the global overlap above ``1 - sum eps_i``.

    The precondition is checked with a ``TAU_BOUND`` allowance so that
    passing the exact local infidelities as ``epsilons`` is accepted.
    """
    m, dims = _rho_matrix(rho)
    vs = _as_vectors(states, dims)
    k = len(dims)
    locals_ = [_expect(ptrace(m, dims, [l]), vs[l]) for l in range(k)]
    if epsilons is None:
        epsilons = [1 - x for x in locals_]
    if len(epsilons) != k:
        raise LayoutError(f"{len(epsilons)} epsilons for {k} factors")
    for l, (x, e) in enumerate(zip(locals_, epsilons)):
        if x < 1 - e - TAU_BOUND:
            raise InputError(f"local overlap {x} on factor {l} is below 1 - eps = {1 - e}")
    g = _expect(m, kron_all(vs))
    rhs = 1 - float(sum(epsilons))
    return BoundReport("lemma2", g, rhs, g - rhs,
                       {"dims": dims, "rho": _cjson(m), "states": [_cjson(v) for v in vs],
                        "epsilons": list(map(float, epsilons))})


def overlap_triangle(phi1, phi2, psi) -> BoundReport:
    """Checks ``|<phi1|phi2>|^2 >= 1 - eta1 - eta2`` with ``eta_i = 1 - |<phi_i|psi>|^2``.

    This form is not a theorem: two vectors each at angle ``a`` from ``psi``
    on opposite sides can have ``cos^2(2a) < 1 - 2 sin^2 a``. The report
    therefore also carries the always-valid ``1 - 2 eta1 - 2 eta2`` in
    ``extras`` (from ``sin(a+b) <= sin a + sin b``); ``passed`` still refers
    to the form above.
    """
    a, b, c = _as_vectors([phi1, phi2, psi])
    if not (a.size == b.size == c.size):
        raise LayoutError("vectors must share a dimension")
    e1 = 1 - abs(np.vdot(a, c)) ** 2
    e2 = 1 - abs(np.vdot(b, c)) ** 2
    lhs = abs(np.vdot(a, b)) ** 2
    rhs = 1 - e1 - e2
    sound = 1 - 2 * e1 - 2 * e2
    return BoundReport("lemma5", lhs, rhs, lhs - rhs,
                       {"phi1": _cjson(a), "phi2": _cjson(b), "psi": _cjson(c)},
                       extras={"eta1": e1, "eta2": e2, "rhs_sound": sound, "margin_sound": lhs - sound})


def dominant_eigen_bounds(rho, phi) -> BoundReport:
    """Top eigenvalue ``>= 1 - eps`` and top eigenvector overlap ``>= 1 - 2 eps``
    where ``eps = 1 - <phi|rho|phi>``.

    Inside a degenerate top block the eigenvector with the largest overlap
    with ``phi`` is used; a degenerate block with ``eps >= 1/2`` is flagged
    inconclusive.
    """
    m, _ = _rho_matrix(rho)
    (v,) = _as_vectors([phi])
    eps = 1 - _expect(m, v)
    w, U = _eig_desc_array(m)
    block = np.flatnonzero(w >= w[0] - DEGENERACY_GAP)
    if len(block) > 1:
        # best vector inside the block: projection of phi onto it
        P = U[:, block]
        proj = P @ (P.conj().T @ v)
        nrm = np.linalg.norm(proj)
        top = proj / nrm if nrm > 1e-14 else U[:, 0]
    else:
        top = U[:, 0]
    ov = abs(np.vdot(top, v)) ** 2
    m1 = w[0] - (1 - eps)
    m2 = ov - (1 - 2 * eps)
    return BoundReport("lemma6", min(w[0], ov), 1 - eps, min(m1, m2),
                       {"rho": _cjson(m), "phi": _cjson(v)},
                       inconclusive=bool(len(block) > 1 and eps >= 0.5),
                       extras={"eps": eps, "lambda_max": float(w[0]), "overlap": float(ov)})


def dominant_purification(red: np.ndarray) -> np.ndarray:
    """Columns ``sqrt(lambda_j) phi_j`` in descending eigenvalue order.

    Read as a (system, purifier) matrix this purifies ``red`` with the
    dominant eigenvector on purifier state ``|0>``.
    """
    w, U = _eig_desc_array(red)
    return U * np.sqrt(np.clip(w, 0, None))


def product_purification(rho: DensityOperator, states: Sequence[PureState],
                         c_prefix: str = "C") -> tuple[PureState, BoundReport]:
    """Product of per-leg purifications built around each leg's dominant eigenvector.

    Each ``states[i]`` names the factors of one leg. For the leg reduction
    ``rho_i`` with spectrum ``lambda_0 >= lambda_1 >= ...`` and eigenvectors
    ``phi_j``, the leg purification is ``sum_j sqrt(lambda_j) |phi_j>|j_C>``,
    so the dominant term sits on ``|0_C>``. The report compares
    ``<Psi|rho x |0_C><0_C||Psi>`` with ``1 - (2k+4) eps``.

    Returns ``Psi`` with factor order ``[leg_0..., C_0, leg_1..., C_1, ...]``.
    """
    k = len(states)
    order = [lab for s in states for lab in s.layout.labels]
    if sorted(order) != sorted(rho.layout.labels):
        raise LayoutError("leg states must cover exactly the factors of rho")
    r = permute(rho, order)
    phi = kron_all([s.vector for s in states])
    eps = 1 - _expect(r.matrix, phi)
    leg_dims = [s.layout.total_dim for s in states]
    pieces = []
    layout = None
    top = []
    for i, s in enumerate(states):
        psi_i = dominant_purification(ptrace(r.matrix, leg_dims, [i]))
        d = psi_i.shape[1]
        pieces.append(psi_i.reshape(-1))
        top.append(psi_i[:, 0])
        leg_layout = s.layout.concat(SystemLayout.of((f"{c_prefix}{i}", d, "environment")))
        layout = leg_layout if layout is None else layout.concat(leg_layout)
    Psi = PureState(kron_all(pieces), layout)
    # projecting every C onto |0> leaves the product of sqrt(lambda_0) phi_0
    t = kron_all(top)
    lhs = _expect(r.matrix, t)
    rhs = 1 - (2 * k + 4) * eps
    rep = BoundReport("lemma7", lhs, rhs, lhs - rhs,
                      {"leg_dims": leg_dims, "rho": _cjson(r.matrix), "states": [_cjson(s.vector) for s in states]},
                      extras={"eps": eps, "k": k})
    return Psi, rep


def entropy_continuity_check(phi: PureState, rho: DensityOperator, a_labels: Sequence[str]) -> BoundReport:
    """``|S(tr_A phi) - S(tr_A rho)| <= 2 sqrt(2 eps) log2 dim(B) + 2`` for ``eps < 1/72``."""
    if phi.layout.labels != rho.layout.labels:
        rho = permute(rho, phi.layout.labels)
    eps = 1 - _expect(rho.matrix, phi.vector)
    if eps >= LEMMA8_EPS_MAX:
        raise InputError(f"eps = {eps} is not below 1/72")
    a_labels = list(a_labels)
    b_labels = [l for l in phi.layout.labels if l not in a_labels]
    if not b_labels:
        raise LayoutError("partition leaves no B factors")
    dB = phi.layout.select(b_labels).total_dim
    from .tensor_core import partial_trace
    s_phi = von_neumann_entropy(partial_trace(phi.density(), a_labels))
    s_rho = von_neumann_entropy(partial_trace(rho, a_labels))
    lhs = abs(s_phi - s_rho)
    rhs = 2 * math.sqrt(2 * max(eps, 0.0)) * math.log2(dB) + 2
    return BoundReport("lemma8", lhs, rhs, rhs - lhs,
                       {"phi": _cjson(phi.vector), "rho": _cjson(rho.matrix), "dims": phi.layout.dims,
                        "a_labels": a_labels},
                       extras={"eps": eps, "S_phi": s_phi, "S_rho": s_rho})


def alpha_inequality(weights: Sequence[float]) -> BoundReport:
    """``prod a_l + prod (1 - a_l) <= 1`` for weights in ``[0, 1]`` and at least two factors."""
    a = np.asarray(weights, dtype=float)
    if a.size < 2:
        raise InputError("need at least two weights")
    if np.any(a < 0) or np.any(a > 1):
        raise InputError("weights must lie in [0, 1]")
    lhs = float(np.prod(a) + np.prod(1 - a))
    return BoundReport("alpha", lhs, 1.0, 1.0 - lhs, {"weights": a.tolist()})


# ---------------------------------------------------------------------------
# Sweep families
# ---------------------------------------------------------------------------


def _near(dim: int, target: np.ndarray, rng, t_max: float) -> np.ndarray:
    t = rng.uniform(0, t_max)
    sigma = random_density(dim, rng, rank=int(rng.integers(1, dim + 1)))
    return (1 - t) * np.outer(target, target.conj()) + t * sigma


def _inst_lemma1(rng):
    k = int(rng.choice([2, 3]))
    dims = [2] * k
    vs = [random_pure(2, rng) for _ in range(k)]
    D = 2 ** k
    if rng.random() < 0.5:
        m = random_density(D, rng, rank=int(rng.integers(1, D + 1)))
    else:
        m = _near(D, kron_all(vs), rng, 0.3)
    return check_local_from_global((m, dims), vs)


def _inst_lemma2(rng):
    k = 3
    dims = [2] * k
    vs = [random_pure(2, rng) for _ in range(k)]
    D = 2 ** k
    if rng.random() < 0.5:
        m = random_density(D, rng, rank=int(rng.integers(1, D + 1)))
    else:
        m = _near(D, kron_all(vs), rng, 0.3)
    return check_global_from_local((m, dims), vs)


def _inst_lemma5(rng):
    d = int(rng.integers(2, 9))
    if rng.random() < 0.5:
        a, b, c = (random_pure(d, rng) for _ in range(3))
    else:
        c = random_pure(d, rng)
        s = rng.uniform(0, 0.3)
        a = c + s * random_pure(d, rng)
        b = c + s * random_pure(d, rng)
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    return overlap_triangle(a, b, c)


def _inst_lemma6(rng):
    d = int(rng.integers(2, 9))
    v = random_pure(d, rng)
    m = _near(d, v, rng, 0.6)
    return dominant_eigen_bounds((m, [d]), v)


def _lemma7_instance(rng, k: int | None = None, eps_max: float = 0.02, leg_dim: int = 4):
    """Near-product state on ``k`` legs of dimension ``leg_dim`` with planted overlap ``>= 1 - eps_max``."""
    k = k or int(rng.choice([2, 3]))
    states = []
    for i in range(k):
        lay = SystemLayout.of((f"A{i}", 2, "reference"), (f"B{i}", leg_dim // 2, "sender"))
        states.append(PureState(random_pure(leg_dim, rng), lay))
    D = leg_dim ** k
    target = kron_all([s.vector for s in states])
    sigma = random_density(D, rng, rank=int(rng.integers(1, 4)))
    t = rng.uniform(0, eps_max)
    m = (1 - t) * np.outer(target, target.conj()) + t * sigma
    layout = states[0].layout
    for s in states[1:]:
        layout = layout.concat(s.layout)
    return DensityOperator(m, layout), states


def _inst_lemma7(rng):
    rho, states = _lemma7_instance(rng)
    return product_purification(rho, states)[1]


def _inst_lemma8(rng):
    dA = int(rng.integers(2, 5))
    dB = int(rng.integers(2, 5))
    lay = SystemLayout.of(("A", dA, "reference"), ("B", dB, "sender"))
    phi = kron_all([random_pure(dA, rng), random_pure(dB, rng)])
    D = dA * dB
    sigma = random_density(D, rng, rank=int(rng.integers(1, D + 1)))
    t = rng.uniform(0, 0.99 * LEMMA8_EPS_MAX)
    m = (1 - t) * np.outer(phi, phi.conj()) + t * sigma
    return entropy_continuity_check(PureState(phi, lay), DensityOperator(m, lay), ["A"])


def _inst_alpha(rng):
    L = int(rng.integers(2, 7))
    return alpha_inequality(rng.uniform(0, 1, size=L))


SUITES: dict[str, Callable] = {
    "lemma1": _inst_lemma1,
    "lemma2": _inst_lemma2,
    "lemma5": _inst_lemma5,
    "lemma6": _inst_lemma6,
    "lemma7": _inst_lemma7,
    "lemma8": _inst_lemma8,
    "alpha": _inst_alpha,
}


@dataclass
class SweepSummary:
    suite: str
    instances: int
    min_margin: float
    violations: int
    seconds: float
    first_violation: BoundReport | None = None

    def csv_row(self) -> list:
        return [self.suite, self.instances, f"{self.min_margin:.6e}", self.violations, f"{self.seconds:.3f}"]


def sweep(suite: str, instances: int, seed: int, keep_reports: bool = False):
    """Run ``instances`` seeded instances of ``suite``.

    Instance ``i`` draws from its own generator spawned from ``seed``, so any
    single instance can be replayed. Returns ``(summary, reports)``;
    ``reports`` is empty unless ``keep_reports``.
    """
    if suite not in SUITES:
        raise InputError(f"unknown suite {suite!r}; known: {sorted(SUITES)}")
    gen = SUITES[suite]
    children = np.random.SeedSequence([seed, FAMILY_VERSION, list(SUITES).index(suite)]).spawn(instances)
    t0 = time.perf_counter()
    reports = []
    min_margin = math.inf
    violations = 0
    first = None
    for cs in children:
        rep = gen(np.random.default_rng(cs))
        min_margin = min(min_margin, rep.margin)
        if not rep.passed:
            violations += 1
            if first is None:
                first = rep
        if keep_reports:
            reports.append(rep)
    return SweepSummary(suite, instances, float(min_margin), violations, time.perf_counter() - t0, first), reports


# ---------------------------------------------------------------------------
# Subspace carving and the uniform-source check
# ---------------------------------------------------------------------------


@dataclass
class CarveResult:
    """Carved per-leg subspaces and the bound they certify.

    ``kept_weight`` is the kept eigenvalue mass ``beta_l`` of each leg and
    ``certified_bound`` is ``1 - sum(eta) / prod(beta)``.
    """

    kept_basis: list
    kept_weight: list
    removed_count: list
    certified_bound: float
    measured_Fs: float
    dims: list
    rates: list
    stop_reason: str
    history: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.measured_Fs >= self.certified_bound - 1e-6)

    def subspaces(self) -> list[Subspace]:
        return [Subspace(np.column_stack(b)) for b in self.kept_basis]

    def to_json(self) -> dict:
        return {"kept_weight": [float(b) for b in self.kept_weight], "removed_count": self.removed_count,
                "certified_bound": self.certified_bound, "measured_Fs": self.measured_Fs,
                "dims": self.dims, "rates": self.rates, "stop_reason": self.stop_reason,
                "pass": self.passed, "history": self.history}


def _leg_vector_fidelity(kmap: KrausMap, sources: Sequence[np.ndarray], leg: int, v: np.ndarray) -> float:
    """Local fidelity of ``v`` on ``leg`` when every other leg carries its full source."""
    mats = list(sources)
    mats[leg] = np.outer(v, v.conj())
    dims = [m.shape[0] for m in mats]
    out = kmap.act(kron_all(mats))
    return _expect(ptrace(out, dims, [leg]), v)


def carve_subspace(kmap: KrausMap, sources: Sequence[DensityOperator], local_eta: Sequence[float],
                   beta_min: float = 0.0, target: float | None = None,
                   config: MinimizerConfig | None = None) -> CarveResult:
    """Remove low-fidelity source eigenvectors until the measured product
    fidelity clears the certified bound.

    At each step the eigenvector (over all legs) with the lowest local
    pure-state fidelity is dropped, unless that would push its leg's kept
    weight below ``beta_min`` or empty the leg. The loop stops once the
    minimizer value on the carved subspaces reaches ``target`` (default:
    the current certified bound ``1 - sum(eta)/prod(beta)``), or when no
    removal is allowed.
    """
    k = len(sources)
    if len(local_eta) != k:
        raise InputError("need one eta per leg")
    cfg = config or MinimizerConfig(restarts=8)
    # precondition: local entanglement fidelities of the purified sources
    pur = [purify(s, f"R{i}", env_role="reference") for i, s in enumerate(sources)]
    for l in range(k):
        fe = local_entanglement_fidelity(pur, kmap, l).value
        if fe < 1 - local_eta[l] - 1e-9:
            raise InputError(f"leg {l}: local entanglement fidelity {fe} is below 1 - eta = {1 - local_eta[l]}")
    specs = [eig_desc(s) for s in sources]
    kept = [[j for j in range(len(sp.values)) if sp.values[j] > 1e-15] for sp in specs]
    if any(not kp for kp in kept):
        raise InputError("a source has no support")
    srcs = [s.matrix for s in sources]
    fid_cache = {}

    def fid(l, j):
        if (l, j) not in fid_cache:
            fid_cache[(l, j)] = _leg_vector_fidelity(kmap, srcs, l, specs[l].vectors[:, j])
        return fid_cache[(l, j)]

    sum_eta = float(sum(local_eta))
    history = []
    while True:
        beta = [float(sum(specs[l].values[j] for j in kept[l])) for l in range(k)]
        cert = 1 - sum_eta / float(np.prod(beta))
        subs = [Subspace(specs[l].vectors[:, kept[l]]) for l in range(k)]
        measured = min_subspace_fidelity(subs, kmap, cfg).value
        history.append({"kept": [len(kp) for kp in kept], "beta": beta, "certified": cert, "measured": measured})
        goal = cert if target is None else target
        if measured >= goal - 1e-12:
            reason = "target met"
            break
        cands = []
        for l in range(k):
            if len(kept[l]) < 2:
                continue
            for j in kept[l]:
                if beta[l] - specs[l].values[j] < beta_min - 1e-15:
                    continue
                cands.append((fid(l, j), l, j))
        if not cands:
            reason = "floor reached"
            break
        _, l, j = min(cands)
        kept[l].remove(j)
    dims_ = [len(kp) for kp in kept]
    return CarveResult(
        kept_basis=[[specs[l].vectors[:, j] for j in kept[l]] for l in range(k)],
        kept_weight=beta,
        removed_count=[len(specs[l].values[specs[l].values > 1e-15]) - dims_[l] for l in range(k)],
        certified_bound=float(cert),
        measured_Fs=float(measured),
        dims=dims_,
        rates=[math.log2(d) for d in dims_],
        stop_reason=reason,
        history=history,
    )


def uniform_leg_states(subspaces: Sequence[Subspace]) -> list[PureState]:
    """Purifications of the uniform density on each subspace, reference first."""
    out = []
    for i, s in enumerate(subspaces):
        V = s.basis
        psi = (V / math.sqrt(s.dim)).T.reshape(-1)  # sum_j |j>_R (x) V e_j / sqrt(s)
        lay = SystemLayout.of((f"R{i}", s.dim, "reference"), (f"B{i}", s.ambient_dim, "sender"))
        out.append(PureState(psi, lay))
    return out


def check_theorem1(subspaces: Sequence[Subspace], kmap: KrausMap, eta: float | None = None,
                   C: float = 10.0, config: MinimizerConfig | None = None) -> BoundReport:
    """Entanglement fidelity of uniform sources on subspaces with product fidelity ``>= 1 - eta``.

    The ratio ``(1 - F_e) / eta`` is reported; ``passed`` uses
    ``F_e >= 1 - C eta``.
    """
    fs = min_subspace_fidelity(subspaces, kmap, config).value
    if eta is None:
        eta = max(1 - fs, 0.0)
    if fs < 1 - eta - 1e-9:
        raise InputError(f"product fidelity {fs} is below 1 - eta = {1 - eta}")
    fe = entanglement_fidelity(uniform_leg_states(subspaces), kmap).value
    # below 1e-12 both quantities are rounding noise
    loss = 1 - fe if 1 - fe > 1e-12 else 0.0
    if eta <= 1e-12:
        ratio = 0.0 if loss == 0.0 else math.inf
    else:
        ratio = loss / eta
    rhs = 1 - C * eta
    return BoundReport("theorem1", fe, rhs, fe - rhs, {"subspace_dims": [s.dim for s in subspaces]},
                       extras={"Fs": fs, "Fe": fe, "eta": eta, "ratio": ratio, "C": C})


def power_bound_grid(k_max: int = 8, points: int = 1001) -> float:
    """Smallest ``(1-e)^k - (1-k e)`` over a grid of ``e`` in ``[0, 1]`` and ``k <= k_max``."""
    e = np.linspace(0, 1, points)
    return float(min(np.min((1 - e) ** k - (1 - k * e)) for k in range(1, k_max + 1)))
