"""
Completely positive maps in Kraus form.

A :class:`KrausMap` holds operators ``E_k`` of shape ``(out_dim, in_dim)``
and acts as ``rho -> sum_k E_k rho E_k^dagger``. Layout compatibility
between maps is checked on the dimension signature only; labels are
carried along for reporting and for building joint layouts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .exceptions import InputError, LayoutError
from .tensor_core import (DensityOperator, Subsystem, SystemLayout, TOL, _eig_desc_array, complex_from_json,
                          operator_from_json, operator_to_json)

TP_TOL = 1e-8
ISO_TOL = 1e-8
PRUNE_TOL = 1e-12

KINDS = ("tp", "tni", "cp")


def _completeness(ops: Sequence[np.ndarray], in_dim: int) -> np.ndarray:
    acc = np.zeros((in_dim, in_dim), dtype=complex)
    for E in ops:
        acc += E.conj().T @ E
    return (acc + acc.conj().T) / 2


@dataclass(frozen=True, eq=False)
class KrausMap:
    """Kraus-form CP map between two layouts.

    ``kind`` is ``"tp"`` (sum E^dag E = I), ``"tni"`` (sum E^dag E <= I) or
    ``"cp"``. The last one has no completeness constraint; it is used for
    renormalized post-selected branches, which are trace-preserving on one
    particular input but not as maps.
    """

    kraus_ops: tuple
    in_layout: SystemLayout
    out_layout: SystemLayout
    kind: str = "tp"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown map kind {self.kind!r}")
        shape = (self.out_layout.total_dim, self.in_layout.total_dim)
        ops = []
        for E in self.kraus_ops:
            E = np.array(E, dtype=complex)
            if E.shape != shape:
                raise LayoutError(f"Kraus operator of shape {E.shape}, expected {shape}")
            E.setflags(write=False)
            ops.append(E)
        if not ops:
            raise InputError("a Kraus map needs at least one operator")
        object.__setattr__(self, "kraus_ops", tuple(ops))
        if self.kind != "cp":
            rep = validate(self)
            if self.kind == "tp" and not rep.tp_pass:
                raise InputError(f"map declared trace-preserving deviates by {rep.tp_deviation:.3e}")
            if self.kind == "tni" and not rep.tni_pass:
                raise InputError(f"map declared trace-nonincreasing has max eigenvalue {rep.max_eigenvalue:.6f}")

    @classmethod
    def from_ops(cls, ops, in_dims=None, out_dims=None, kind="tp", label="q",
                 role="sender") -> "KrausMap":
        """Wrap raw matrices, generating layouts ``label0, label1...`` of the given dims."""
        ops = [np.asarray(E, dtype=complex) for E in ops]
        out_d, in_d = ops[0].shape
        in_dims = [in_d] if in_dims is None else list(in_dims)
        out_dims = [out_d] if out_dims is None else list(out_dims)
        in_layout = SystemLayout(tuple(Subsystem(f"{label}{i}", d, role) for i, d in enumerate(in_dims)))
        out_layout = SystemLayout(tuple(Subsystem(f"{label}{i}", d, role) for i, d in enumerate(out_dims)))
        return cls(tuple(ops), in_layout, out_layout, kind)

    @property
    def in_dim(self) -> int:
        return self.in_layout.total_dim

    @property
    def out_dim(self) -> int:
        return self.out_layout.total_dim

    def __len__(self):
        return len(self.kraus_ops)

    def __call__(self, rho):
        return apply(self, rho)

    def act(self, m: np.ndarray) -> np.ndarray:
        """Apply to a raw matrix without layout checks."""
        out = np.zeros((self.out_dim, self.out_dim), dtype=complex)
        for E in self.kraus_ops:
            out += E @ m @ E.conj().T
        return out

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "in_layout": self.in_layout.to_json(),
            "out_layout": self.out_layout.to_json(),
            "ops": [{"re": E.real.tolist(), "im": E.imag.tolist()} for E in self.kraus_ops],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "KrausMap":
        in_layout = SystemLayout.from_json(doc["in_layout"])
        out_layout = SystemLayout.from_json(doc["out_layout"])
        ops = [complex_from_json(o) for o in doc["ops"]]
        return cls(tuple(ops), in_layout, out_layout, doc.get("kind", "tp"))


@dataclass(frozen=True)
class ValidationReport:
    tp_deviation: float
    max_eigenvalue: float
    tp_pass: bool
    tni_pass: bool
    kind: str

    @property
    def passed(self) -> bool:
        if self.kind == "tp":
            return self.tp_pass
        if self.kind == "tni":
            return self.tni_pass
        return True

    def to_json(self) -> dict:
        return {"tp_deviation": self.tp_deviation, "max_eigenvalue": self.max_eigenvalue,
                "tp_pass": self.tp_pass, "tni_pass": self.tni_pass,
                "kind": self.kind, "passed": self.passed}


def validate(kmap: KrausMap, tol: float = TP_TOL) -> ValidationReport:
    """Report completeness of a map without raising.

    ``tp_deviation`` is the spectral norm of ``sum E^dag E - I``.
    """
    c = _completeness(kmap.kraus_ops, kmap.in_dim)
    dev = float(np.linalg.norm(c - np.eye(kmap.in_dim), 2))
    top = float(np.linalg.eigvalsh(c)[-1])
    return ValidationReport(dev, top, dev <= tol, top <= 1 + tol, kmap.kind)


@dataclass(frozen=True, eq=False)
class PartialIsometry:
    """Operator ``W`` with ``W^dag W`` a projector (the support projector)."""

    matrix: np.ndarray
    support_projector: np.ndarray | None = None

    def __post_init__(self):
        W = np.array(self.matrix, dtype=complex)
        P = W.conj().T @ W
        if self.support_projector is not None:
            given = np.asarray(self.support_projector, dtype=complex)
            if np.linalg.norm(given - P) > ISO_TOL:
                raise InputError("support projector does not equal W^dag W")
        if np.linalg.norm(P @ P - P) > ISO_TOL:
            raise InputError(f"W^dag W is not idempotent (deviation {np.linalg.norm(P @ P - P):.3e})")
        W.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "matrix", W)
        object.__setattr__(self, "support_projector", P)

    @property
    def rank(self) -> int:
        return int(round(np.trace(self.support_projector).real))

    def idempotency_error(self) -> float:
        P = self.support_projector
        return float(np.linalg.norm(P @ P - P))


# ---------------------------------------------------------------------------
# Combinators
# ---------------------------------------------------------------------------


def _check_rho(kmap: KrausMap, rho: DensityOperator) -> None:
    if rho.layout.dims != kmap.in_layout.dims:
        raise LayoutError(f"state dims {rho.layout.dims} do not match map input {kmap.in_layout.dims}")


def apply(kmap: KrausMap, rho: DensityOperator) -> DensityOperator:
    """``sum_k E_k rho E_k^dag``; flagged subnormalized when the trace drops."""
    _check_rho(kmap, rho)
    out = kmap.act(rho.matrix)
    out = (out + out.conj().T) / 2
    tr = float(np.trace(out).real)
    flag = "normalized" if abs(tr - 1) <= TOL["tr"] else "subnormalized"
    return DensityOperator(out, kmap.out_layout, flag)


def compose(second: KrausMap, first: KrausMap) -> KrausMap:
    """``second o first`` with Kraus list ``[S F for S in second for F in first]``.

    Only total dimensions must agree, so a joint map may follow a tensor
    product of per-factor maps.
    """
    if first.out_dim != second.in_dim:
        raise LayoutError(f"cannot compose: first outputs {first.out_layout.dims}, "
                          f"second expects {second.in_layout.dims}")
    ops = tuple(S @ F for S in second.kraus_ops for F in first.kraus_ops)
    if first.kind == "tp" and second.kind == "tp":
        kind = "tp"
    elif "cp" in (first.kind, second.kind):
        kind = "cp"
    else:
        kind = "tni"
    return KrausMap(ops, first.in_layout, second.out_layout, kind)


def tensor_maps(maps: Sequence[KrausMap]) -> KrausMap:
    """Tensor product of maps; one Kraus operator per factor in every product."""
    if not maps:
        raise InputError("tensor_maps needs at least one map")
    ins = [m.in_layout for m in maps]
    outs = [m.out_layout for m in maps]
    # maps are matched by dimension, so clashing labels just get a per-map prefix
    if len({l for lay in ins for l in lay.labels}) < sum(len(lay) for lay in ins):
        ins = [lay.relabel(f"m{i}_") for i, lay in enumerate(ins)]
    if len({l for lay in outs for l in lay.labels}) < sum(len(lay) for lay in outs):
        outs = [lay.relabel(f"m{i}_") for i, lay in enumerate(outs)]
    in_layout, out_layout = ins[0], outs[0]
    ops = list(maps[0].kraus_ops)
    for m, li, lo in zip(maps[1:], ins[1:], outs[1:]):
        in_layout = in_layout.concat(li)
        out_layout = out_layout.concat(lo)
        ops = [np.kron(a, b) for a in ops for b in m.kraus_ops]
    kinds = {m.kind for m in maps}
    kind = "tp" if kinds == {"tp"} else ("cp" if "cp" in kinds else "tni")
    return KrausMap(tuple(ops), in_layout, out_layout, kind)


def prune(kmap: KrausMap, tol: float = PRUNE_TOL) -> KrausMap:
    """Drop Kraus operators with Frobenius norm below ``tol`` (keeps at least one)."""
    keep = [E for E in kmap.kraus_ops if np.linalg.norm(E) >= tol]
    if not keep:
        keep = [kmap.kraus_ops[0]]
    return KrausMap(tuple(keep), kmap.in_layout, kmap.out_layout, kmap.kind)


def _as_layout(layout, label: str = "q") -> SystemLayout:
    if isinstance(layout, SystemLayout):
        return layout
    return SystemLayout.of((label, int(layout)))


def identity_map(layout) -> KrausMap:
    """Identity channel on a layout, or on a single factor of the given dimension."""
    layout = _as_layout(layout)
    return KrausMap((np.eye(layout.total_dim, dtype=complex),), layout, layout, "tp")


def unitary_map(U: np.ndarray, in_layout=None, out_layout=None) -> KrausMap:
    U = np.asarray(U, dtype=complex)
    in_layout = _as_layout(in_layout if in_layout is not None else U.shape[1])
    return KrausMap((U,), in_layout, _as_layout(out_layout) if out_layout is not None else in_layout, "tp")


# ---------------------------------------------------------------------------
# Channel zoo
# ---------------------------------------------------------------------------


def _shift_clock(d: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.roll(np.eye(d), 1, axis=0)
    Z = np.diag(np.exp(2j * np.pi * np.arange(d) / d))
    return X.astype(complex), Z


def depolarizing_ops(p: float, d: int = 2) -> list[np.ndarray]:
    """Weyl-operator Kraus set for ``(1 - p) rho + p I/d``."""
    X, Z = _shift_clock(d)
    ops = []
    for a in range(d):
        for b in range(d):
            W = np.linalg.matrix_power(X, a) @ np.linalg.matrix_power(Z, b)
            w = (1 - p + p / d**2) if (a, b) == (0, 0) else p / d**2
            ops.append(np.sqrt(max(w, 0.0)) * W)
    return ops


def dephasing_ops(p: float, d: int = 2) -> list[np.ndarray]:
    """Phase-flip Kraus set: ``(1 - p) rho + p/(d-1) sum_{k>=1} Z^k rho Z^-k``.

    For a qubit this is ``(1 - p) rho + p Z rho Z``; coherences are scaled by
    ``1 - 2p`` and vanish at ``p = 1/2``.
    """
    _, Z = _shift_clock(d)
    ops = [np.sqrt(1 - p) * np.eye(d, dtype=complex)]
    for k in range(1, d):
        ops.append(np.sqrt(p / (d - 1)) * np.linalg.matrix_power(Z, k))
    return ops


def amplitude_damping_ops(gamma: float) -> list[np.ndarray]:
    K0 = np.array([[1.0, 0.0], [0.0, np.sqrt(1 - gamma)]], dtype=complex)
    K1 = np.array([[0.0, np.sqrt(gamma)], [0.0, 0.0]], dtype=complex)
    return [K0, K1]


CHANNEL_NAMES = ("identity", "depolarizing", "dephasing", "amplitude_damping")


def standard_channel(name: str, dim: int = 2, param: float = 0.0, label: str = "q",
                     role: str = "sender") -> KrausMap:
    """Identity, depolarizing(p), dephasing(p) or amplitude_damping(gamma) on one ``dim``-level factor.

    Parameters
    ----------
    name : str
        One of ``CHANNEL_NAMES``.
    dim : int
        Local dimension. Amplitude damping is qubit-only.
    param : float
        Noise parameter in ``[0, 1]``; ignored for ``identity``.
    label : str
        Label of the single subsystem in the map's in/out layouts.
    """
    if not 0.0 <= param <= 1.0:
        raise InputError(f"channel parameter {param} outside [0, 1]")
    if name == "identity":
        ops = [np.eye(dim, dtype=complex)]
    elif name == "depolarizing":
        ops = depolarizing_ops(param, dim)
    elif name == "dephasing":
        ops = dephasing_ops(param, dim)
    elif name == "amplitude_damping":
        if dim != 2:
            raise InputError("amplitude_damping is defined for qubits only")
        ops = amplitude_damping_ops(param)
    else:
        raise InputError(f"unknown channel {name!r}; expected one of {CHANNEL_NAMES}")
    layout = SystemLayout.of(Subsystem(label, dim, role))
    return KrausMap(tuple(ops), layout, layout, "tp")


_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?::\s*([0-9.eE+-]+))?\s*(?:@\s*(\d+))?\s*$")


def parse_channel_spec(spec: str, dim: int = 2, label: str = "q") -> KrausMap:
    """Parse ``"name:param"`` or ``"name:param@dim"`` (e.g. ``"depolarizing:0.25"``)."""
    m = _SPEC_RE.match(spec)
    if not m:
        raise InputError(f"cannot parse channel spec {spec!r}")
    name, param, d = m.group(1), m.group(2), m.group(3)
    return standard_channel(name, int(d) if d else dim, float(param) if param else 0.0, label)


def random_isometry(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-style isometry from QR of a complex Gaussian matrix (R diagonal made positive)."""
    g = rng.normal(size=(rows, cols)) + 1j * rng.normal(size=(rows, cols))
    q, r = np.linalg.qr(g)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_channel(in_dim: int, out_dim: int, env_dim: int, seed: int, label: str = "q") -> KrausMap:
    """Random Stinespring channel: isometry ``V: in -> out x env``, ``E_k = <k|_env V``."""
    if env_dim < 1:
        raise InputError("env_dim must be at least 1")
    if out_dim * env_dim < in_dim:
        raise InputError(f"no isometry from dim {in_dim} into {out_dim}x{env_dim}")
    rng = np.random.default_rng(seed)
    V = random_isometry(out_dim * env_dim, in_dim, rng).reshape(out_dim, env_dim, in_dim)
    ops = tuple(np.ascontiguousarray(V[:, k, :]) for k in range(env_dim))
    in_layout = SystemLayout.of(Subsystem(label, in_dim))
    out_layout = SystemLayout.of(Subsystem(label, out_dim))
    return KrausMap(ops, in_layout, out_layout, "tp")


def sink_completion_ops(comp: np.ndarray, sink: np.ndarray) -> list[np.ndarray]:
    """Kraus operators realizing ``rho -> tr(comp rho) sink`` for PSD ``comp``."""
    cw, cv = _eig_desc_array(comp)
    sw, sv = _eig_desc_array(sink)
    ops = []
    for j in range(len(cw)):
        if cw[j] <= 1e-14:
            continue
        for m in range(len(sw)):
            if sw[m] <= 1e-14:
                continue
            ops.append(np.sqrt(sw[m] * cw[j]) * np.outer(sv[:, m], cv[:, j].conj()))
    return ops


def embed_isometry_tp(W: PartialIsometry, sink: DensityOperator, in_layout: SystemLayout | None = None,
                      out_layout: SystemLayout | None = None) -> KrausMap:
    """Trace-preserving extension ``rho -> W rho W^dag + tr((I - W^dag W) rho) sink``."""
    if sink.norm_flag != "normalized":
        raise InputError("sink must be a normalized state")
    Wm = W.matrix
    out_layout = out_layout or sink.layout
    if out_layout.total_dim != Wm.shape[0] or sink.layout.total_dim != Wm.shape[0]:
        raise LayoutError("sink dimension does not match the isometry output")
    if in_layout is None:
        in_layout = SystemLayout.of(Subsystem("in", Wm.shape[1]))
    comp = np.eye(Wm.shape[1]) - W.support_projector
    ops = [Wm] + sink_completion_ops(comp, sink.matrix)
    return KrausMap(tuple(ops), in_layout, out_layout, "tp")


def tp_completion(kmap: KrausMap, sink: DensityOperator) -> KrausMap:
    """Complete a trace-nonincreasing map: the missing weight is routed to ``sink``."""
    comp = np.eye(kmap.in_dim) - _completeness(kmap.kraus_ops, kmap.in_dim)
    w, v = np.linalg.eigh(comp)
    comp = (v * np.clip(w, 0, None)) @ v.conj().T
    ops = list(kmap.kraus_ops) + sink_completion_ops(comp, sink.matrix)
    return KrausMap(tuple(ops), kmap.in_layout, kmap.out_layout, "tp")


def stinespring(kmap: KrausMap) -> np.ndarray:
    """Isometry ``V = sum_k E_k x |k>`` with the environment as the last factor."""
    ops = kmap.kraus_ops
    V = np.stack(ops, axis=1)  # out, env, in
    return V.reshape(kmap.out_dim * len(ops), kmap.in_dim)


def map_to_json(kmap: KrausMap) -> dict:
    return kmap.to_json()


def map_from_json(doc, dim: int = 2, label: str = "q") -> KrausMap:
    """Accept either a full map document or a ``"name:param"`` string."""
    if isinstance(doc, str):
        return parse_channel_spec(doc, dim, label)
    return KrausMap.from_json(doc)


__all__ = [
    "KrausMap", "PartialIsometry", "ValidationReport", "validate", "apply", "compose",
    "tensor_maps", "prune", "identity_map", "unitary_map", "standard_channel",
    "parse_channel_spec", "random_channel", "random_isometry", "embed_isometry_tp",
    "tp_completion", "stinespring", "depolarizing_ops", "dephasing_ops",
    "amplitude_damping_ops", "operator_to_json", "operator_from_json",
]
