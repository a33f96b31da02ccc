"""
Entanglement and minimal-subspace fidelities, global and per leg.

Leg inputs for entanglement fidelity are :class:`PureState` objects whose
``reference`` subsystems stay put and whose other subsystems are fed to the
map. The map acts on the concatenation of every leg's non-reference part,
in leg order.

Minimal subspace fidelity is a minimum over product pure states and is
approximated by multi-start projected gradient descent on the unit spheres
of the leg subspaces. Whatever value is reported comes with the witness that
attains it, so it is always an upper bound on the true minimum. For legs of
subspace dimension at most two a Bloch-sphere grid (polished with
Nelder-Mead) runs as an independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .channels import KrausMap
from .exceptions import InputError, LayoutError, OracleDisagreement
from .tensor_core import (DensityOperator, PureState, eig_desc, kron_all, permute, ptrace)

GRID_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class Subspace:
    """Orthonormal basis (columns of ``basis``) of a subspace of one leg's input space."""

    basis: np.ndarray
    leg: tuple[int, int] | None = None

    def __post_init__(self):
        b = np.array(self.basis, dtype=complex)
        if b.ndim == 1:
            b = b[:, None]
        if b.shape[1] < 1:
            raise InputError("subspace needs at least one basis vector")
        gram = b.conj().T @ b
        if np.linalg.norm(gram - np.eye(b.shape[1])) > 1e-8:
            raise InputError("subspace basis is not orthonormal")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @classmethod
    def full(cls, dim: int, leg=None) -> "Subspace":
        return cls(np.eye(dim, dtype=complex), leg)

    @classmethod
    def span(cls, vectors, leg=None) -> "Subspace":
        """Orthonormalize ``vectors`` (columns, or a list) into a subspace."""
        m = np.column_stack([np.asarray(v, dtype=complex) for v in vectors]) \
            if isinstance(vectors, (list, tuple)) else np.asarray(vectors, dtype=complex)
        q, r = np.linalg.qr(m)
        keep = np.abs(np.diag(r)) > 1e-10
        return cls(q[:, keep], leg)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


@dataclass
class FidelityReport:
    value: float
    kind: str
    scope: str = "global"
    leg: int | None = None
    witness: list | None = None
    optimizer_stats: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"value": float(self.value), "kind": self.kind, "scope": self.scope}
        if self.leg is not None:
            out["leg"] = self.leg
        if self.witness is not None:
            out["witness"] = [{"re": np.real(w).tolist(), "im": np.imag(w).tolist()} for w in self.witness]
        out["optimizer_stats"] = self.optimizer_stats
        return out


# ---------------------------------------------------------------------------
# Entanglement fidelity
# ---------------------------------------------------------------------------


def leg_matrix(state: PureState) -> tuple[np.ndarray, int, int]:
    """Reshape a leg state to a ``(reference, sent)`` matrix."""
    refs = state.layout.with_role("reference")
    sent = [lab for lab in state.layout.labels if lab not in refs]
    if not sent:
        raise LayoutError("leg state has no non-reference subsystem to send")
    p = permute(state, refs + sent)
    d_ref = state.layout.select(refs).total_dim if refs else 1
    d_sent = state.layout.select(sent).total_dim
    return p.vector.reshape(d_ref, d_sent), d_ref, d_sent


def _joint_legs(inputs: Sequence[PureState]):
    mats, drs, dss = zip(*(leg_matrix(s) for s in inputs))
    return list(mats), list(drs), list(dss)


def _check_map(kmap: KrausMap, sent_dims: Sequence[int]) -> None:
    d = int(math.prod(sent_dims))
    if kmap.in_dim != d or kmap.out_dim != d:
        raise LayoutError(f"map is {kmap.in_dim}->{kmap.out_dim}, legs send total dimension {d}")


def _output_density(M: np.ndarray, ops) -> np.ndarray:
    """``(I x Lambda)(|M>><<M|)`` for a state stored as a (reference, sent) matrix."""
    D = M.size
    out = np.zeros((D, D), dtype=complex)
    for K in ops:
        v = (M @ K.T).reshape(-1)
        out += np.outer(v, v.conj())
    return out


def entanglement_fidelity(inputs: Sequence[PureState], kmap: KrausMap) -> FidelityReport:
    """Global entanglement fidelity, evaluated from the full output density matrix.

    For a trace-nonincreasing map the raw quadratic form is returned, without
    dividing by the branch probability.
    """
    mats, _, dss = _joint_legs(inputs)
    _check_map(kmap, dss)
    M = kron_all(mats)
    rho = _output_density(M, kmap.kraus_ops)
    psi = M.reshape(-1)
    val = float(np.real(psi.conj() @ rho @ psi))
    return FidelityReport(val, "entanglement", "global")


def output_state(inputs: Sequence[PureState], kmap: KrausMap) -> tuple[np.ndarray, list[int]]:
    """Output density matrix with factor order ``[R_1..R_k, S_1..S_k]`` and those dims."""
    mats, drs, dss = _joint_legs(inputs)
    _check_map(kmap, dss)
    return _output_density(kron_all(mats), kmap.kraus_ops), drs + dss


def local_entanglement_fidelity(inputs: Sequence[PureState], kmap: KrausMap, leg: int) -> FidelityReport:
    """Fidelity of leg ``leg`` (0-based) after tracing out every other leg."""
    k = len(inputs)
    if not 0 <= leg < k:
        raise InputError(f"unknown leg {leg}; there are {k} legs")
    mats, drs, dss = _joint_legs(inputs)
    _check_map(kmap, dss)
    rho = _output_density(kron_all(mats), kmap.kraus_ops)
    red = ptrace(rho, drs + dss, [leg, k + leg])
    psi = mats[leg].reshape(-1)
    val = float(np.real(psi.conj() @ red @ psi))
    return FidelityReport(val, "entanglement", "local", leg)


def entanglement_fidelity_kraus(leg_states: Sequence[DensityOperator], decoder_noise: KrausMap,
                                encoders: Sequence[KrausMap]) -> FidelityReport:
    """Kraus-sum evaluation that never builds a purification.

    Uses the subnormalized eigenvectors ``sqrt(l) phi`` of every leg state::

        F = sum_a sum_{b_1..b_k} | sum_{g_1..g_k} (x_i <phi~_g_i|) A_a (x_i E_i^b_i |phi~_g_i>) |^2

    The inner sum over matched ``g`` indices is a trace over the tensor
    product of the per-leg tilde matrices.
    """
    if len(leg_states) != len(encoders):
        raise InputError("need one encoder per leg state")
    tildes = []
    for rho, enc in zip(leg_states, encoders):
        if enc.in_dim != rho.layout.total_dim:
            raise LayoutError(f"encoder input {enc.in_dim} does not match leg dimension {rho.layout.total_dim}")
        spec = eig_desc(rho)
        keep = spec.values > 1e-15
        tildes.append(spec.tilde()[:, keep])
    enc_out = int(math.prod(e.out_dim for e in encoders))
    src = int(math.prod(r.layout.total_dim for r in leg_states))
    if decoder_noise.in_dim != enc_out or decoder_noise.out_dim != src:
        raise LayoutError(f"decoder_noise is {decoder_noise.in_dim}->{decoder_noise.out_dim}, "
                          f"expected {enc_out}->{src}")
    bra = kron_all(tildes).conj().T  # (gammas, src)
    # ket side per leg: E_b phi~ for every Kraus index b
    kets = [[E @ t for E in enc.kraus_ops] for enc, t in zip(encoders, tildes)]
    total = 0.0
    ket_products = [kron_all(list(combo)) for combo in _product(kets)]
    for A in decoder_noise.kraus_ops:
        BA = bra @ A
        for K in ket_products:
            total += abs(np.trace(BA @ K)) ** 2
    return FidelityReport(float(total), "entanglement", "global",
                          optimizer_stats={"evaluator": "kraus-sum"})


def _product(lists):
    if not lists:
        yield ()
        return
    for head in lists[0]:
        for tail in _product(lists[1:]):
            yield (head,) + tail


# ---------------------------------------------------------------------------
# Minimal subspace fidelity
# ---------------------------------------------------------------------------


@dataclass
class MinimizerConfig:
    """Settings for the multi-start sphere minimizer.

    ``grid`` turns on the Bloch-grid oracle for legs of subspace dimension
    at most two; ``grid_points`` is the number of azimuthal points per circle
    when a single leg varies (a product of two legs uses a coarser grid and
    relies on polishing).
    """

    restarts: int = 32
    max_sweeps: int = 400
    inner_steps: int = 4
    tol: float = 1e-9
    grad_tol: float = 1e-5
    seed: int = 0
    grid: bool = True
    grid_points: int = 1024


class _Objective:
    """Pure-state fidelity of a product input, global or for one target leg."""

    def __init__(self, bases, ops, target=None):
        self.bases = [np.asarray(b) for b in bases]
        self.dims = [b.shape[0] for b in self.bases]
        self.ops = np.stack([np.asarray(K) for K in ops])
        self.ops_h = np.conj(np.transpose(self.ops, (0, 2, 1)))
        self.target = target
        self.evals = 0

    def vectors(self, cs):
        return [b @ c for b, c in zip(self.bases, cs)]

    def value_grads(self, cs):
        self.evals += 1
        xs = self.vectors(cs)
        psi = kron_all(xs)
        y = self.ops @ psi  # (nK, D)
        L = len(xs)
        direct = None
        if self.target is None:
            a = y @ psi.conj()
            f = float(np.sum(np.abs(a) ** 2))
            G = np.einsum("k,kd->d", a.conj(), y) + np.einsum("k,kd->d", a, self.ops_h @ psi)
        else:
            t = self.target
            Y = y.reshape([len(y)] + self.dims)
            Z = np.tensordot(Y, xs[t].conj(), axes=([t + 1], [0]))  # (nK, rest...)
            f = float(np.sum(np.abs(Z) ** 2))
            PY = np.moveaxis(np.multiply.outer(Z, xs[t]), -1, t + 1).reshape(len(y), -1)
            G = np.einsum("kij,kj->i", self.ops_h, PY)
            Yt = np.moveaxis(Y, t + 1, 0).reshape(self.dims[t], -1)
            direct = Yt @ Z.conj().reshape(-1)
        Gt = G.reshape(self.dims)
        grads = []
        for j in range(L):
            g = _contract_others(Gt, xs, j)
            if direct is not None and j == self.target:
                g = g + direct
            grads.append(self.bases[j].conj().T @ g)
        return f, grads

    def value(self, cs):
        xs = self.vectors(cs)
        return float(self.batch_values([x[None, :] for x in xs])[0])

    def batch_values(self, xs_batch):
        """Objective for a batch: ``xs_batch[l]`` has shape ``(N, d_l)``."""
        N = xs_batch[0].shape[0]
        psi = xs_batch[0]
        for x in xs_batch[1:]:
            psi = np.einsum("na,nb->nab", psi, x).reshape(N, -1)
        y = np.einsum("kij,nj->kni", self.ops, psi)
        if self.target is None:
            a = np.einsum("kni,ni->kn", y, psi.conj())
            return np.sum(np.abs(a) ** 2, axis=0)
        t = self.target
        Y = y.reshape([y.shape[0], N] + self.dims)
        Y = np.moveaxis(Y, t + 2, 2)
        Z = np.einsum("kna...,na->kn...", Y, xs_batch[t].conj())
        return np.sum(np.abs(Z.reshape(Z.shape[0], N, -1)) ** 2, axis=(0, 2))


def _contract_others(G: np.ndarray, xs, j: int) -> np.ndarray:
    g = G
    for i in reversed(range(len(xs))):
        if i == j:
            continue
        g = np.tensordot(g, xs[i].conj(), axes=([i], [0]))
    return g


def _descend(obj: _Objective, cs, cfg: MinimizerConfig):
    cs = [c / np.linalg.norm(c) for c in cs]
    f, gs = obj.value_grads(cs)
    steps = [1.0] * len(cs)
    iterations = 0
    converged = False
    for _ in range(cfg.max_sweeps):
        f_start = f
        gmax = 0.0
        for j in range(len(cs)):
            if cs[j].size == 1:
                continue
            for _ in range(cfg.inner_steps):
                c, g = cs[j], gs[j]
                gt = g - np.real(np.vdot(c, g)) * c
                gn2 = float(np.real(np.vdot(gt, gt)))
                gmax = max(gmax, math.sqrt(gn2))
                if gn2 < 1e-26:
                    break
                t = steps[j]
                accepted = False
                while t > 1e-14:
                    cn = c - t * gt
                    cn = cn / np.linalg.norm(cn)
                    trial = cs[:j] + [cn] + cs[j + 1:]
                    fn, gsn = obj.value_grads(trial)
                    if fn <= f - 2e-4 * t * gn2:
                        accepted = True
                        break
                    t *= 0.5
                iterations += 1
                if not accepted:
                    break
                cs, f, gs = trial, fn, gsn
                steps[j] = min(2 * t, 1e3)
        if abs(f_start - f) < cfg.tol and gmax < cfg.grad_tol:
            converged = True
            break
    return f, cs, iterations, converged


def _random_start(bases, rng):
    return [rng.normal(size=b.shape[1]) + 1j * rng.normal(size=b.shape[1]) for b in bases]


def _bloch(theta, phi):
    return np.stack([np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2)], axis=-1)


def grid_oracle(obj: _Objective, points: int = 1024) -> tuple[float, list, str] | None:
    """Exhaustive Bloch grid over legs of subspace dimension 2, polished by Nelder-Mead.

    Returns ``None`` when more than two legs vary or any leg has dimension
    above two.
    """
    sdims = [b.shape[1] for b in obj.bases]
    if any(s > 2 for s in sdims):
        return None
    var = [j for j, s in enumerate(sdims) if s == 2]
    fixed = {j: np.ones(1, dtype=complex) for j, s in enumerate(sdims) if s == 1}
    if len(var) > 2:
        return None
    if not var:
        cs = [fixed[j] for j in range(len(sdims))]
        return obj.value(cs), obj.vectors(cs), "trivial"

    if len(var) == 1:
        n_phi = points
        n_theta = points // 2 + 1
        mode = "fine"
    else:
        n_phi = 32
        n_theta = 17
        mode = "coarse-product"
    th = np.linspace(0, np.pi, n_theta)
    ph = np.linspace(0, 2 * np.pi, n_phi, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    leg_grid = _bloch(T.reshape(-1), P.reshape(-1))  # (G, 2) in subspace coordinates
    angles = np.stack([T.reshape(-1), P.reshape(-1)], axis=1)
    G = len(leg_grid)

    def batch_for(index_sets):
        xs = []
        for j in range(len(sdims)):
            if j in fixed:
                n = len(index_sets[0])
                xs.append(np.tile(obj.bases[j][:, 0], (n, 1)))
            else:
                xs.append(leg_grid[index_sets[var.index(j)]] @ obj.bases[j].T)
        return xs

    # keep the lowest few grid points so polishing can leave a shallow basin
    n_keep = 1 if len(var) == 1 else 8
    cand_vals = np.empty(0)
    cand_idx = np.empty((0, len(var)), dtype=int)
    chunk = 20000
    total = G ** len(var)
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        idx = np.unravel_index(flat, (G,) * len(var))
        vals = obj.batch_values(batch_for(idx))
        cand_vals = np.concatenate([cand_vals, vals])
        cand_idx = np.concatenate([cand_idx, np.stack(idx, axis=1)])
        order = np.argsort(cand_vals, kind="stable")[:n_keep]
        cand_vals, cand_idx = cand_vals[order], cand_idx[order]

    def unpack(params):
        cs = []
        for j in range(len(sdims)):
            if j in fixed:
                cs.append(fixed[j])
            else:
                p = var.index(j)
                cs.append(_bloch(params[2 * p], params[2 * p + 1]))
        return cs

    val, params = np.inf, None
    for v0, row in zip(cand_vals, cand_idx):
        x0 = np.concatenate([angles[i] for i in row])
        res = minimize(lambda p: obj.value(unpack(p)), x0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 4000})
        if res.fun < min(v0, val):
            val, params = float(res.fun), res.x
        elif v0 < val:
            val, params = float(v0), x0
    cs = unpack(params)
    return val, obj.vectors(cs), mode


def _minimize(bases, kmap: KrausMap, target, cfg: MinimizerConfig, scope, leg) -> FidelityReport:
    dims = [b.shape[0] for b in bases]
    D = int(math.prod(dims))
    if kmap.in_dim != D or kmap.out_dim != D:
        raise LayoutError(f"map is {kmap.in_dim}->{kmap.out_dim}, subspaces live in dimension {D}")
    obj = _Objective(bases, kmap.kraus_ops, target)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    finals = []
    best = None
    iters = 0
    n_conv = 0
    for ss in seeds:
        rng = np.random.default_rng(ss)
        f, cs, it, conv = _descend(obj, _random_start(bases, rng), cfg)
        iters += it
        n_conv += conv
        finals.append(f)
        if best is None or f < best[0]:
            best = (f, cs)
    value, cs = best
    witness = obj.vectors(cs)
    stats = {
        "restarts": cfg.restarts,
        "iterations": iters,
        "spread": float(max(finals) - min(finals)),
        "converged_restarts": int(n_conv),
        "converged": bool(n_conv > 0),
        "descent_value": float(value),
    }
    if cfg.grid:
        oracle = grid_oracle(obj, cfg.grid_points)
        if oracle is None:
            stats["grid"] = "skipped"
        else:
            gval, gwit, mode = oracle
            stats["grid"] = mode
            stats["grid_value"] = float(gval)
            if abs(gval - value) > GRID_TOL:
                raise OracleDisagreement(
                    f"grid oracle {gval:.8f} and descent {value:.8f} disagree beyond {GRID_TOL}")
            if gval < value:
                value, witness = gval, gwit
    return FidelityReport(float(value), "subspace-min", scope, leg, witness, stats)


def _bases(subspaces: Sequence[Subspace]):
    if not subspaces:
        raise InputError("need at least one subspace")
    return [s.basis for s in subspaces]


def min_subspace_fidelity(subspaces: Sequence[Subspace], kmap: KrausMap,
                          config: MinimizerConfig | None = None, product: bool = True) -> FidelityReport:
    """Minimum pure-state fidelity over product inputs drawn from the leg subspaces.

    With ``product=False`` the minimum runs over all (possibly entangled) unit
    vectors in the tensor product of the subspaces instead; that value is
    exploratory only.
    """
    cfg = config or MinimizerConfig()
    bases = _bases(subspaces)
    if not product and len(bases) > 1:
        bases = [kron_all(bases)]
    return _minimize(bases, kmap, None, cfg, "global", None)


def local_subspace_fidelity(subspaces: Sequence[Subspace], kmap: KrausMap, leg: int,
                            config: MinimizerConfig | None = None) -> FidelityReport:
    """Minimum over product inputs of leg ``leg``'s output fidelity after tracing out the rest."""
    cfg = config or MinimizerConfig()
    bases = _bases(subspaces)
    if not 0 <= leg < len(bases):
        raise InputError(f"unknown leg {leg}; there are {len(bases)} legs")
    return _minimize(bases, kmap, leg, cfg, "local", leg)


def pure_state_fidelity(vectors: Sequence[np.ndarray], kmap: KrausMap, leg: int | None = None) -> float:
    """``<psi| Lambda(psi) |psi>`` for the product ``psi`` of ``vectors``, or its local version."""
    bases = [np.asarray(v, dtype=complex).reshape(-1, 1) for v in vectors]
    obj = _Objective(bases, kmap.kraus_ops, leg)
    return obj.value([np.ones(1, dtype=complex)] * len(bases))
