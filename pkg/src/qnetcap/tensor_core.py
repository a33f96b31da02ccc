"""
Labeled tensor-product linear algebra.

Every operator and state carries a :class:`SystemLayout`, an ordered list of
labeled subsystems. The flat index of a basis vector is the row-major
(C-order) mixed-radix number formed by the per-subsystem indices in layout
order, so the first subsystem is the most significant digit. All reshuffling
goes through :func:`permute`.

The module also exposes small array-level helpers (``ptrace``,
``permute_op``...) used by the hot loops elsewhere in the package; they take
plain ``dims`` lists and skip validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DimensionGuardError, InputError, LayoutError

TOL = {
    "herm": 1e-8,
    "psd": 1e-8,
    "tr": 1e-8,
    "norm": 1e-8,
    "rec": 1e-8,
    "orth": 1e-8,
    "match": 1e-8,
    "eig": 1e-12,
}

MAX_DIM = 4096

# eigenvalues closer than this are treated as one degenerate block
DEGENERACY_GAP = 1e-10

ROLES = ("sender", "receiver", "reference", "environment")


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Subsystem:
    """One tensor factor.

    ``index`` is the ``(party, slot)`` pair for sender and receiver legs and
    ``None`` otherwise.
    """

    label: str
    dim: int
    role: str = "sender"
    index: tuple[int, int] | None = None

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise LayoutError(f"subsystem {self.label!r}: dim must be a positive integer, got {self.dim}")
        if self.role not in ROLES:
            raise LayoutError(f"subsystem {self.label!r}: unknown role {self.role!r}")
        if self.index is not None:
            object.__setattr__(self, "index", (int(self.index[0]), int(self.index[1])))

    def to_json(self) -> dict:
        out = {"label": self.label, "dim": int(self.dim), "role": self.role}
        if self.index is not None:
            out["index"] = list(self.index)
        return out

    @classmethod
    def from_json(cls, doc: Mapping) -> "Subsystem":
        index = doc.get("index")
        return cls(str(doc["label"]), int(doc["dim"]), doc.get("role", "sender"),
                   tuple(index) if index is not None else None)


@dataclass(frozen=True)
class SystemLayout:
    """Ordered tuple of :class:`Subsystem` defining a tensor factorization."""

    subsystems: tuple[Subsystem, ...]

    def __post_init__(self):
        subs = tuple(self.subsystems)
        object.__setattr__(self, "subsystems", subs)
        labels = [s.label for s in subs]
        if len(set(labels)) != len(labels):
            raise LayoutError(f"duplicate subsystem labels in {labels}")

    @classmethod
    def of(cls, *specs) -> "SystemLayout":
        """Build a layout from ``Subsystem`` objects or ``(label, dim[, role[, index]])`` tuples."""
        subs = [s if isinstance(s, Subsystem) else Subsystem(*s) for s in specs]
        return cls(tuple(subs))

    @classmethod
    def qubits(cls, *labels: str, role: str = "sender") -> "SystemLayout":
        return cls(tuple(Subsystem(lab, 2, role) for lab in labels))

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.subsystems]

    @property
    def dims(self) -> list[int]:
        return [s.dim for s in self.subsystems]

    @property
    def total_dim(self) -> int:
        return int(math.prod(self.dims))

    def __len__(self):
        return len(self.subsystems)

    def __iter__(self):
        return iter(self.subsystems)

    def index_of(self, label: str) -> int:
        for i, s in enumerate(self.subsystems):
            if s.label == label:
                return i
        raise LayoutError(f"unknown subsystem label {label!r}; layout has {self.labels}")

    def __getitem__(self, label: str) -> Subsystem:
        return self.subsystems[self.index_of(label)]

    def concat(self, other: "SystemLayout") -> "SystemLayout":
        clash = set(self.labels) & set(other.labels)
        if clash:
            raise LayoutError(f"label collision when tensoring layouts: {sorted(clash)}")
        return SystemLayout(self.subsystems + other.subsystems)

    def select(self, labels: Iterable[str]) -> "SystemLayout":
        return SystemLayout(tuple(self[lab] for lab in labels))

    def without(self, labels: Iterable[str]) -> "SystemLayout":
        drop = set(labels)
        for lab in drop:
            self.index_of(lab)
        return SystemLayout(tuple(s for s in self.subsystems if s.label not in drop))

    def with_role(self, *roles: str) -> list[str]:
        return [s.label for s in self.subsystems if s.role in roles]

    def same_shape(self, other: "SystemLayout") -> bool:
        return self.dims == other.dims

    def relabel(self, prefix: str) -> "SystemLayout":
        return SystemLayout(tuple(Subsystem(prefix + s.label, s.dim, s.role, s.index)
                                  for s in self.subsystems))

    def check_party_structure(self) -> None:
        """Raise unless sender/receiver indices form contiguous ranges.

        Parties must be numbered ``1..k`` and each party's slots ``1..l_i``.
        Subsystems without an index are ignored.
        """
        for role in ("sender", "receiver"):
            slots: dict[int, list[int]] = {}
            for s in self.subsystems:
                if s.role == role and s.index is not None:
                    slots.setdefault(s.index[0], []).append(s.index[1])
            if not slots:
                continue
            if sorted(slots) != list(range(1, len(slots) + 1)):
                raise LayoutError(f"{role} parties {sorted(slots)} are not 1..{len(slots)}")
            for party, got in slots.items():
                if sorted(got) != list(range(1, len(got) + 1)):
                    raise LayoutError(f"{role} party {party} has slots {sorted(got)}")

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self.subsystems]

    @classmethod
    def from_json(cls, doc: Sequence[Mapping]) -> "SystemLayout":
        return cls(tuple(Subsystem.from_json(d) for d in doc))


def _check_guard(dim: int, max_dim: int | None) -> None:
    limit = MAX_DIM if max_dim is None else max_dim
    if dim > limit:
        raise DimensionGuardError(f"total dimension {dim} exceeds guard {limit}; pass max_dim to override")


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DensityOperator:
    """Hermitian PSD operator with trace 1 (normalized) or at most 1 (subnormalized).

    ``norm_flag`` is inferred from the trace when not given. Subnormalized
    operators may have zero trace: a post-selected branch can have zero
    probability.
    """

    matrix: np.ndarray
    layout: SystemLayout
    norm_flag: str | None = None
    max_dim: int | None = field(default=None, repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        d = self.layout.total_dim
        _check_guard(d, self.max_dim)
        if m.shape != (d, d):
            raise LayoutError(f"matrix shape {m.shape} does not match layout dimension {d}")
        if not np.allclose(m, m.conj().T, atol=TOL["herm"], rtol=0):
            raise InputError("density operator is not Hermitian within tolerance")
        m = (m + m.conj().T) / 2
        lo = float(np.linalg.eigvalsh(m)[0]) if d else 0.0
        if lo < -TOL["psd"]:
            raise InputError(f"density operator has eigenvalue {lo:.3e} < 0")
        tr = float(np.trace(m).real)
        flag = self.norm_flag
        if flag is None:
            flag = "normalized" if abs(tr - 1) <= TOL["tr"] else "subnormalized"
        if flag == "normalized" and abs(tr - 1) > TOL["tr"]:
            raise InputError(f"normalized density operator has trace {tr}")
        if flag == "subnormalized" and not (-TOL["tr"] <= tr <= 1 + TOL["tr"]):
            raise InputError(f"subnormalized density operator has trace {tr}")
        if flag not in ("normalized", "subnormalized"):
            raise InputError(f"unknown norm flag {flag!r}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "norm_flag", flag)

    @property
    def dims(self) -> list[int]:
        return self.layout.dims

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    @classmethod
    def from_pure(cls, state: "PureState") -> "DensityOperator":
        v = state.vector
        return cls(np.outer(v, v.conj()), state.layout)

    @classmethod
    def maximally_mixed(cls, layout: SystemLayout) -> "DensityOperator":
        d = layout.total_dim
        return cls(np.eye(d) / d, layout)

    def to_json(self) -> dict:
        return operator_to_json(self.matrix, self.layout)

    @classmethod
    def from_json(cls, doc: Mapping) -> "DensityOperator":
        m, layout = operator_from_json(doc)
        return cls(m, layout)


@dataclass(frozen=True, eq=False)
class PureState:
    """Unit vector with a layout."""

    vector: np.ndarray
    layout: SystemLayout

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=complex).reshape(-1)
        d = self.layout.total_dim
        if v.shape != (d,):
            raise LayoutError(f"vector length {v.size} does not match layout dimension {d}")
        if abs(np.linalg.norm(v) - 1) > TOL["norm"]:
            raise InputError(f"state vector has norm {np.linalg.norm(v)}")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def dims(self) -> list[int]:
        return self.layout.dims

    def density(self) -> DensityOperator:
        return DensityOperator.from_pure(self)

    def to_json(self) -> dict:
        return {"layout": self.layout.to_json(),
                "re": self.vector.real.tolist(), "im": self.vector.imag.tolist()}

    @classmethod
    def from_json(cls, doc: Mapping) -> "PureState":
        layout = SystemLayout.from_json(doc["layout"])
        v = complex_from_json(doc)
        return cls(v, layout)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Descending eigen-decomposition; ``vectors[:, i]`` pairs with ``values[i]``."""

    values: np.ndarray
    vectors: np.ndarray

    def tilde(self) -> np.ndarray:
        """Columns ``sqrt(lambda) * v`` (negative rounding noise clamped to 0)."""
        return self.vectors * np.sqrt(np.clip(self.values, 0, None))

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.conj().T

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# Array-level helpers
# ---------------------------------------------------------------------------


def fix_phase(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Multiply by a global phase so the first entry above ``tol`` is real positive."""
    v = np.asarray(v, dtype=complex)
    idx = np.flatnonzero(np.abs(v) > tol)
    if idx.size == 0:
        return v.copy()
    a = v[idx[0]]
    return v * (abs(a) / a)


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones((1, 1) if np.ndim(mats[0]) == 2 else 1, dtype=complex)
    for m in mats:
        out = np.kron(out, m)
    return out


def permute_vec(v: np.ndarray, dims: Sequence[int], perm: Sequence[int]) -> np.ndarray:
    """Reorder factors of a vector: new factor ``i`` is old factor ``perm[i]``."""
    return np.transpose(np.reshape(v, dims), perm).reshape(-1)


def permute_op(m: np.ndarray, dims: Sequence[int], perm: Sequence[int]) -> np.ndarray:
    n = len(dims)
    t = np.reshape(m, list(dims) * 2)
    t = np.transpose(t, list(perm) + [p + n for p in perm])
    d = int(math.prod(dims))
    return t.reshape(d, d)


def ptrace(m: np.ndarray, dims: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    """Partial trace keeping factors ``keep`` (in the order given)."""
    dims = list(dims)
    n = len(dims)
    keep = list(keep)
    drop = [i for i in range(n) if i not in keep]
    dk = int(math.prod(dims[i] for i in keep))
    dd = int(math.prod(dims[i] for i in drop))
    t = np.reshape(m, dims * 2)
    t = np.transpose(t, keep + drop + [i + n for i in keep] + [i + n for i in drop])
    t = t.reshape(dk, dd, dk, dd)
    return np.trace(t, axis1=1, axis2=3)


def random_pure(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return v / np.linalg.norm(v)


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Ginibre-induced random density matrix of the given rank (full rank by default)."""
    r = dim if rank is None else rank
    g = rng.normal(size=(dim, r)) + 1j * rng.normal(size=(dim, r))
    m = g @ g.conj().T
    return m / np.trace(m).real


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(g)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def max_entangled(dim: int) -> np.ndarray:
    """``sum_i |ii> / sqrt(d)`` as a flat vector."""
    return np.eye(dim, dtype=complex).reshape(-1) / np.sqrt(dim)


def _eig_desc_array(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(m)
    w = w[::-1]
    v = v[:, ::-1]
    v = np.column_stack([fix_phase(v[:, i]) for i in range(v.shape[1])]) if v.size else v
    # within degenerate blocks, order by position of the largest-magnitude entry
    order = []
    i = 0
    n = len(w)
    while i < n:
        j = i + 1
        while j < n and abs(w[j] - w[i]) < DEGENERACY_GAP:
            j += 1
        block = list(range(i, j))
        block.sort(key=lambda c: int(np.argmax(np.abs(v[:, c]) - 1e-12 * np.arange(v.shape[0]))))
        order.extend(block)
        i = j
    return w[order], v[:, order]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def tensor(a, b):
    """Tensor product of two states, or of a state and a density operator.

    Two pure states give a :class:`PureState`; anything else gives a
    :class:`DensityOperator`.
    """
    layout = a.layout.concat(b.layout)
    if isinstance(a, PureState) and isinstance(b, PureState):
        return PureState(np.kron(a.vector, b.vector), layout)
    ma = a.density().matrix if isinstance(a, PureState) else a.matrix
    mb = b.density().matrix if isinstance(b, PureState) else b.matrix
    flag = "normalized" if (getattr(a, "norm_flag", "normalized") == "normalized"
                            and getattr(b, "norm_flag", "normalized") == "normalized") else None
    return DensityOperator(np.kron(ma, mb), layout, flag)


def permute(x, order: Sequence[str]):
    """Reorder the factors of a state or density operator to the label order given."""
    layout = x.layout
    if sorted(order) != sorted(layout.labels):
        raise LayoutError(f"permutation {list(order)} is not a reordering of {layout.labels}")
    perm = [layout.index_of(lab) for lab in order]
    new_layout = layout.select(order)
    if isinstance(x, PureState):
        return PureState(permute_vec(x.vector, layout.dims, perm), new_layout)
    return DensityOperator(permute_op(x.matrix, layout.dims, perm), new_layout, x.norm_flag)


def partial_trace(rho, discard: Iterable[str]) -> DensityOperator:
    """Trace out the subsystems labeled in ``discard``."""
    if isinstance(rho, PureState):
        rho = rho.density()
    discard = set(discard)
    for lab in discard:
        rho.layout.index_of(lab)
    keep = [i for i, lab in enumerate(rho.layout.labels) if lab not in discard]
    if not keep:
        raise LayoutError("partial_trace would discard every subsystem")
    m = ptrace(rho.matrix, rho.dims, keep)
    return DensityOperator(m, rho.layout.without(discard), rho.norm_flag)


def partial_inner_product(M: np.ndarray, layout: SystemLayout,
                          bra: Mapping[str, np.ndarray], ket: Mapping[str, np.ndarray],
                          in_layout: SystemLayout | None = None) -> np.ndarray:
    """Contract chosen factors of an operator with fixed vectors.

    ``M`` maps ``in_layout`` (defaults to ``layout``) to ``layout``. Each entry
    of ``bra`` is a vector on an output factor, each entry of ``ket`` a vector
    on an input factor; they need not be normalized. The result acts from the
    uncontracted input factors to the uncontracted output factors, both in
    layout order.
    """
    in_layout = layout if in_layout is None else in_layout
    M = np.asarray(M, dtype=complex)
    if M.shape != (layout.total_dim, in_layout.total_dim):
        raise LayoutError(f"operator shape {M.shape} does not match layouts "
                          f"({layout.total_dim}, {in_layout.total_dim})")
    no = len(layout)
    t = M.reshape(layout.dims + in_layout.dims)
    # contract highest axes first so lower axis numbers stay valid
    jobs = []
    for lab, vec in bra.items():
        ax = layout.index_of(lab)
        jobs.append((ax, np.conj(np.asarray(vec, dtype=complex)), layout.dims[ax], lab))
    for lab, vec in ket.items():
        ax = in_layout.index_of(lab)
        jobs.append((no + ax, np.asarray(vec, dtype=complex), in_layout.dims[ax], lab))
    for ax, vec, dim, lab in sorted(jobs, key=lambda j: -j[0]):
        if vec.shape != (dim,):
            raise LayoutError(f"vector for factor {lab!r} has shape {vec.shape}, expected ({dim},)")
        t = np.tensordot(t, vec, axes=([ax], [0]))
    out_rest = layout.without(bra.keys())
    in_rest = in_layout.without(ket.keys())
    return t.reshape(out_rest.total_dim if len(out_rest) else 1,
                     in_rest.total_dim if len(in_rest) else 1)


def eig_desc(rho) -> Spectrum:
    """Eigen-decomposition with descending eigenvalues and fixed conventions.

    Eigenvectors are phase-fixed (first nonzero amplitude real positive).
    Inside a degenerate block they are ordered by the index of their
    largest-magnitude component.
    """
    m = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    if not np.allclose(m, m.conj().T, atol=TOL["herm"], rtol=0):
        raise InputError("eig_desc requires a Hermitian matrix")
    w, v = _eig_desc_array((m + m.conj().T) / 2)
    w.setflags(write=False)
    v.setflags(write=False)
    return Spectrum(w, v)


def von_neumann_entropy(rho) -> float:
    """Entropy in bits; eigenvalues below ``TOL['eig']`` are dropped."""
    m = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    w = np.linalg.eigvalsh((m + m.conj().T) / 2)
    w = w[w > TOL["eig"]]
    return float(max(0.0, -np.sum(w * np.log2(w))))


def purify(rho: DensityOperator, env_label: str, env_dim: int | None = None,
           env_role: str = "reference") -> PureState:
    """Eigenbasis purification ``sum_k sqrt(l_k) |v_k> |k>``.

    The purifying factor is appended after the system factors. Its dimension
    defaults to the system dimension; a smaller ``env_dim`` is accepted as long
    as it is at least the rank.
    """
    if rho.norm_flag != "normalized":
        raise InputError("purify needs a normalized density operator")
    spec = eig_desc(rho)
    rank = int(np.sum(spec.values > TOL["eig"]))
    d = rho.layout.total_dim
    e = d if env_dim is None else int(env_dim)
    if e < rank:
        raise InputError(f"env_dim {e} is smaller than rank {rank}")
    psi = np.zeros((d, e), dtype=complex)
    t = spec.tilde()
    psi[:, :rank] = t[:, :rank]
    vec = fix_phase(psi.reshape(-1))
    vec = vec / np.linalg.norm(vec)
    layout = rho.layout.concat(SystemLayout.of(Subsystem(env_label, e, env_role)))
    return PureState(vec, layout)


def _split_matrix(psi: PureState, first: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    rest = [lab for lab in psi.layout.labels if lab not in set(first)]
    p = permute(psi, list(first) + rest)
    d1 = psi.layout.select(first).total_dim
    return p.vector.reshape(d1, -1), rest


def matching_unitary(psi1: PureState, psi2: PureState, shared_labels: Iterable[str],
                     strict: bool = True) -> np.ndarray:
    """Unitary ``U`` on the non-shared factors with ``(I x U) psi2 = psi1``.

    Both states must have the same layout. ``U`` acts on the complement of
    ``shared_labels`` in layout order. It is the orthogonal-Procrustes
    solution, so when the reductions differ (``strict=False``) it is still the
    unitary that brings ``psi2`` closest to ``psi1``.
    """
    if psi1.layout.dims != psi2.layout.dims or psi1.layout.labels != psi2.layout.labels:
        raise LayoutError("matching_unitary needs two states on the same layout")
    shared = list(shared_labels)
    for lab in shared:
        psi1.layout.index_of(lab)
    shared = [lab for lab in psi1.layout.labels if lab in set(shared)]
    m1, _ = _split_matrix(psi1, shared)
    m2, _ = _split_matrix(psi2, shared)
    if strict:
        r1 = m1 @ m1.conj().T
        r2 = m2 @ m2.conj().T
        gap = float(np.linalg.norm(r1 - r2))
        if gap > TOL["match"]:
            raise InputError(f"reduced states on {shared} differ by {gap:.3e}; "
                             "the inputs do not purify the same state")
    # (I x U) psi2 in matrix form is m2 @ U.T; maximize Re tr((m1)^H m2 U^T)
    a = m2.conj().T @ m1
    u, _, vh = np.linalg.svd(a)
    x = u @ vh
    return x.T


def apply_on_factors(U: np.ndarray, psi: PureState, labels: Sequence[str]) -> PureState:
    """Apply ``U`` to the factors ``labels`` of ``psi`` (in that order)."""
    rest = [lab for lab in psi.layout.labels if lab not in set(labels)]
    m, _ = _split_matrix(psi, rest)
    out = (m @ np.asarray(U).T).reshape(-1)
    tmp_layout = psi.layout.select(rest + list(labels))
    return permute(PureState(out, tmp_layout), psi.layout.labels)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def complex_from_json(doc: Mapping) -> np.ndarray:
    """Array from ``{"re": ..., "im": ...}``; a missing ``im`` means real data."""
    re = np.asarray(doc["re"], dtype=float)
    im = np.asarray(doc["im"], dtype=float) if "im" in doc else np.zeros_like(re)
    return re + 1j * im


def operator_to_json(m: np.ndarray, layout: SystemLayout) -> dict:
    m = np.asarray(m, dtype=complex)
    return {"layout": layout.to_json(), "re": m.real.tolist(), "im": m.imag.tolist()}


def operator_from_json(doc: Mapping) -> tuple[np.ndarray, SystemLayout]:
    layout = SystemLayout.from_json(doc["layout"])
    m = complex_from_json(doc)
    return m, layout
