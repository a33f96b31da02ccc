"""
Protocol model (zero-way and one-way forward) and three transformations:

* leg reduction and replacement of encodings by partial isometries,
* encoding stripping for multiple-access and k-user unicast structures,
* flattening a one-way protocol to its best conditional branch.

Conventions: sender ``i`` encodes leg ``i`` (source space ``B_i``) into
channel input ``X_i``; the channel maps ``X_1..X_k`` to the receivers'
outputs; decodings map back onto ``B_1..B_k`` so fidelities compare with
the source purification. A single decoding acting on every output is a
multiple-access (MAC) decoder; one decoding per leg is k-user unicast.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bounds import BoundReport, dominant_purification, entropy_continuity_check
from .channels import (KrausMap, PartialIsometry, compose, embed_isometry_tp, identity_map, map_from_json,
                       prune, tensor_maps, tp_completion, validate)
from .exceptions import BroadcastStrippingError, ExtractionError, InputError, LayoutError
from .fidelity import (FidelityReport, entanglement_fidelity, leg_matrix, local_entanglement_fidelity,
                       output_state)
from .tensor_core import (MAX_DIM, DensityOperator, PureState, Subsystem, SystemLayout, eig_desc,
                          kron_all, matching_unitary, partial_trace, permute_op, ptrace, purify,
                          von_neumann_entropy)

TP_TOL = 1e-8
ISO_TOL = 1e-9
STRIP_FLOOR = 1e-6
FLATTEN_FLOOR = 1e-12
SUPPORT_TOL = 1e-10

REGIMES = ("zero-way", "one-way")


@dataclass
class Branch:
    """One classical outcome of a one-way forward protocol."""

    encodings: list
    decodings: list


@dataclass
class Protocol:
    """Encodings, channel and decodings, plus branches for the one-way regime.

    For ``regime="one-way"`` the encodings and decodings live in
    ``branches`` and the summed branch encodings must be trace preserving.
    ``structure`` is derived from the counts unless given: one decoding for
    several senders is ``"mac"``, one per sender is ``"k-uc"``, more
    decodings than senders is ``"broadcast"``.
    """

    encodings: list
    channel: KrausMap
    decodings: list
    regime: str = "zero-way"
    branches: list | None = None
    structure: str | None = None

    def __post_init__(self):
        if self.regime == "two-way":
            raise InputError("two-way protocols are not supported")
        if self.regime not in REGIMES:
            raise InputError(f"unknown regime {self.regime!r}")
        if self.regime == "one-way":
            if not self.branches:
                raise InputError("a one-way protocol needs at least one branch")
            self.branches = [b if isinstance(b, Branch) else Branch(*b) for b in self.branches]
            if not self.encodings:
                self.encodings = list(self.branches[0].encodings)
            if not self.decodings:
                self.decodings = list(self.branches[0].decodings)
        if not self.encodings or not self.decodings:
            raise InputError("protocol needs encodings and decodings")
        if self.structure is None:
            k, r = len(self.encodings), len(self.decodings)
            self.structure = "k-uc" if r == k else ("mac" if r == 1 else "broadcast")
        self.validate()

    @property
    def senders(self) -> int:
        return len(self.encodings)

    def validate(self) -> None:
        if self.regime == "zero-way":
            for i, m in enumerate(self.encodings + self.decodings):
                if not validate(m).tp_pass:
                    raise InputError(f"zero-way protocol map {i} is not trace preserving")
            self._check_dims(self.encodings, self.decodings)
            return
        total = 0
        for j, br in enumerate(self.branches):
            if len(br.encodings) != self.senders:
                raise InputError(f"branch {j} has {len(br.encodings)} encodings, expected {self.senders}")
            self._check_dims(br.encodings, br.decodings)
            for m in br.decodings:
                if not validate(m).tp_pass:
                    raise InputError(f"branch {j} decoding is not trace preserving")
            total = total + kron_all([sum(E.conj().T @ E for E in m.kraus_ops) for m in br.encodings])
        dev = float(np.linalg.norm(total - np.eye(total.shape[0]), 2))
        if dev > TP_TOL:
            raise InputError(f"branch encodings do not sum to a trace-preserving map (deviation {dev:.3e})")

    def _check_dims(self, encodings, decodings) -> None:
        x = math.prod(e.out_dim for e in encodings)
        if x != self.channel.in_dim:
            raise LayoutError(f"encoders output dimension {x}, channel expects {self.channel.in_dim}")
        y = math.prod(d.in_dim for d in decodings)
        if y != self.channel.out_dim:
            raise LayoutError(f"decoders expect dimension {y}, channel outputs {self.channel.out_dim}")
        b_in = math.prod(e.in_dim for e in encodings)
        b_out = math.prod(d.out_dim for d in decodings)
        if b_in != b_out:
            raise LayoutError(f"decoded dimension {b_out} differs from source dimension {b_in}")

    def decoder_channel(self, decodings=None) -> KrausMap:
        """``D o Lambda``: the joint map from the channel inputs back to the leg spaces."""
        decs = decodings if decodings is not None else self.decodings
        return compose(tensor_maps(decs), self.channel)

    def end_to_end(self) -> KrausMap:
        """Joint map from the leg sources to the decoded outputs.

        For one-way protocols the Kraus lists of all branches are
        concatenated, which realizes the sum over branches.
        """
        if self.regime == "zero-way":
            return compose(self.decoder_channel(), tensor_maps(self.encodings))
        ops = []
        for br in self.branches:
            m = compose(self.decoder_channel(br.decodings), tensor_maps(br.encodings))
            ops.extend(m.kraus_ops)
        first = compose(self.decoder_channel(self.branches[0].decodings), tensor_maps(self.branches[0].encodings))
        return prune(KrausMap(tuple(ops), first.in_layout, first.out_layout, "tp"))

    def branch_map(self, j: int) -> KrausMap:
        br = self.branches[j]
        return compose(self.decoder_channel(br.decodings), tensor_maps(br.encodings))

    def to_json(self) -> dict:
        doc = {"regime": self.regime, "structure": self.structure, "channel": self.channel.to_json()}
        if self.regime == "one-way":
            doc["branches"] = [{"encodings": [m.to_json() for m in b.encodings],
                                "decodings": [m.to_json() for m in b.decodings]} for b in self.branches]
        else:
            doc["encodings"] = [m.to_json() for m in self.encodings]
            doc["decodings"] = [m.to_json() for m in self.decodings]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Protocol":
        try:
            regime = doc.get("regime", "zero-way")
            channel = map_from_json(doc["channel"], **_spec_kw(doc, "channel"))
            if regime == "one-way":
                branches = [Branch([map_from_json(m) for m in b["encodings"]],
                                   [map_from_json(m) for m in b["decodings"]]) for b in doc["branches"]]
                return cls([], channel, [], regime, branches, doc.get("structure"))
            encs = [map_from_json(m) for m in doc["encodings"]]
            decs = [map_from_json(m) for m in doc["decodings"]]
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed protocol document: {exc}") from exc
        return cls(encs, channel, decs, regime, None, doc.get("structure"))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _spec_kw(doc, key) -> dict:
    return {"dim": int(doc.get("channel_dim", 2))} if isinstance(doc.get(key), str) else {}


# ---------------------------------------------------------------------------
# Running protocols
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    output: DensityOperator
    global_fidelity: FidelityReport
    local_fidelities: list

    def to_json(self) -> dict:
        return {"global": self.global_fidelity.to_json(), "local": [r.to_json() for r in self.local_fidelities],
                "output_trace": self.output.trace}


def _output_layout(inputs: Sequence[PureState]) -> SystemLayout:
    refs, sents = [], []
    for i, s in enumerate(inputs):
        r = s.layout.with_role("reference")
        b = [lab for lab in s.layout.labels if lab not in r]
        refs.append(Subsystem(f"{'_'.join(r) or f'R{i}'}", s.layout.select(r).total_dim if r else 1, "reference"))
        sents.append(Subsystem(f"{'_'.join(b)}_out", s.layout.select(b).total_dim, "receiver"))
    return SystemLayout(tuple(refs + sents))


def run_protocol(p: Protocol, inputs: Sequence[PureState]) -> RunResult:
    """Apply the protocol to purified leg sources and report global and per-leg fidelities."""
    if len(inputs) != p.senders:
        raise InputError(f"{len(inputs)} inputs for {p.senders} senders")
    for i, (s, e) in enumerate(zip(inputs, p.encodings)):
        if leg_matrix(s)[2] != e.in_dim:
            raise LayoutError(f"leg {i} sends dimension {leg_matrix(s)[2]}, encoder expects {e.in_dim}")
    m = p.end_to_end()
    rho, _ = output_state(inputs, m)
    out = DensityOperator((rho + rho.conj().T) / 2, _output_layout(inputs))
    g = entanglement_fidelity(inputs, m)
    loc = [local_entanglement_fidelity(inputs, m, l) for l in range(p.senders)]
    return RunResult(out, g, loc)


def _sent_states(inputs: Sequence) -> list[DensityOperator]:
    """Leg source states from purifications (or pass-through density operators)."""
    out = []
    for s in inputs:
        if isinstance(s, DensityOperator):
            out.append(s)
            continue
        refs = s.layout.with_role("reference")
        out.append(partial_trace(s.density(), refs))
    return out


def _purified(sources: Sequence[DensityOperator]) -> list[PureState]:
    return [purify(s, f"R{i}") for i, s in enumerate(sources)]


# ---------------------------------------------------------------------------
# Leg reduction and isometric encodings
# ---------------------------------------------------------------------------


def _tilde(rho: DensityOperator) -> np.ndarray:
    spec = eig_desc(rho)
    return spec.tilde()[:, spec.values > 1e-15]


def _kind_of(ops, in_dim) -> str:
    c = sum(E.conj().T @ E for E in ops)
    top = float(np.linalg.eigvalsh((c + c.conj().T) / 2)[-1])
    return "tni" if top <= 1 + TP_TOL else "cp"


def reduce_leg(joint: KrausMap, encoders: Sequence[KrausMap], sources: Sequence[DensityOperator],
               target: int) -> KrausMap:
    """Single-leg map obtained by contracting every other leg with its source.

    ``joint`` maps ``X_1..X_k`` to ``B_1..B_k`` (decoder after channel). For
    each non-target leg the output index is contracted with the conjugated
    subnormalized eigenvectors of that leg's source and the input index with
    the encoder's Kraus operators applied to the same vectors, summed over
    the shared eigen-index. The resulting Kraus family maps ``X_target`` to
    ``B_target`` and reproduces the joint entanglement fidelity when composed
    with the target's encoder.
    """
    k = len(encoders)
    if len(sources) != k:
        raise InputError("need one source per encoder")
    if not 0 <= target < k:
        raise InputError(f"target leg {target} out of range for {k} legs")
    xs = [e.out_dim for e in encoders]
    bs = [e.in_dim for e in encoders]
    for i, (s, b) in enumerate(zip(sources, bs)):
        if s.layout.total_dim != b:
            raise LayoutError(f"source {i} has dimension {s.layout.total_dim}, encoder expects {b}")
    if joint.in_dim != math.prod(xs) or joint.out_dim != math.prod(bs):
        raise LayoutError(f"joint map is {joint.in_dim}->{joint.out_dim}, "
                          f"expected {math.prod(xs)}->{math.prod(bs)}")
    tildes = [_tilde(s) for s in sources]
    # tensors with axes (out legs..., in legs...) for non-target legs still open
    current = [A.reshape(bs + xs) for A in joint.kraus_ops]
    out_axes = list(range(k))
    in_axes = list(range(k, 2 * k))
    for i in range(k):
        if i == target:
            continue
        bra = tildes[i].conj()  # (b_i, g)
        kets = [E @ tildes[i] for E in encoders[i].kraus_ops]  # (x_i, g) each
        nxt = []
        oa, ia = out_axes.index(i), len(out_axes) + in_axes.index(k + i)
        for T in current:
            for K in kets:
                # sum_g sum_{b,x} conj(phi~_g[b]) T[..b..x..] (E phi~_g)[x]
                t1 = np.tensordot(T, bra, axes=([oa], [0]))  # b axis removed, g appended
                ia1 = ia - 1
                t2 = np.tensordot(t1, K, axes=([ia1], [0]))  # x removed, second g appended
                nxt.append(np.trace(t2, axis1=-2, axis2=-1))
        current = nxt
        out_axes.remove(i)
        in_axes.remove(k + i)
    ops = [T.reshape(bs[target], xs[target]) for T in current]
    ops = [A for A in ops if np.linalg.norm(A) >= 1e-13] or [ops[0]]
    in_layout = SystemLayout.of((f"X{target}", xs[target]))
    out_layout = SystemLayout.of((f"B{target}", bs[target]))
    return KrausMap(tuple(ops), in_layout, out_layout, _kind_of(ops, xs[target]))


def branch_isometry(reduced: KrausMap, encoder: KrausMap, source: DensityOperator) -> tuple[PartialIsometry, dict]:
    """Partial isometry from the encoder Kraus branch that best serves ``reduced``.

    Each branch ``E_b`` is scored by ``sum_a |tr(rho A_a E_b)|^2 / tr(E_b rho E_b^dag)``;
    the best one, restricted to the support of ``rho``, is replaced by the
    isometric factor of its polar decomposition.
    """
    rho = source.matrix
    w, v = np.linalg.eigh(rho)
    supp = v[:, w > SUPPORT_TOL]
    P = supp @ supp.conj().T
    scores = []
    for E in encoder.kraus_ops:
        weight = float(np.real(np.trace(E @ rho @ E.conj().T)))
        if weight <= 1e-15:
            scores.append(-np.inf)
            continue
        s = sum(abs(np.trace(rho @ A @ E)) ** 2 for A in reduced.kraus_ops)
        scores.append(float(s) / weight)
    b = int(np.argmax(scores))
    U, s, Vh = np.linalg.svd(encoder.kraus_ops[b] @ P)
    keep = s > SUPPORT_TOL
    W = U[:, : len(s)][:, keep] @ Vh[keep]
    return PartialIsometry(W), {"branch": b, "scores": scores, "rank": int(keep.sum())}


@dataclass
class ExtractionResult:
    isometries: list
    fidelity: FidelityReport
    protocol: Protocol
    eta: float
    bound: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.fidelity.value >= self.bound)


def extract_isometric_encodings(p: Protocol, inputs: Sequence, sinks: Sequence[DensityOperator] | None = None,
                                encoders: Sequence[KrausMap] | None = None) -> ExtractionResult:
    """Replace every encoding by a partial isometry, one leg at a time.

    ``inputs`` are purified leg sources or the source density operators.
    ``encoders`` overrides ``p.encodings`` (used when the encoders are
    normalized branches rather than channels). The returned protocol embeds
    each isometry trace-preservingly with a sink (maximally mixed on the
    channel input by default). Raises :class:`ExtractionError` if the final
    fidelity is below ``1 - 2^k eta - 1e-7``.
    """
    sources = _sent_states(inputs)
    encs = list(encoders if encoders is not None else p.encodings)
    k = len(encs)
    joint = p.decoder_channel()
    pur = _purified(sources)
    f0 = entanglement_fidelity(pur, compose(joint, tensor_maps(encs))).value
    eta = 1 - f0
    if eta >= 0.5 * 2.0 ** (-k):
        warnings.warn(f"eta = {eta:.3g} makes the 1 - 2^k eta guarantee vacuous", RuntimeWarning, stacklevel=2)
    Ws, diag = [], {"eta": eta, "steps": []}
    for i in range(k):
        red = reduce_leg(joint, encs, sources, i)
        W, info = branch_isometry(red, encs[i], sources[i])
        Ws.append(W)
        encs[i] = KrausMap((W.matrix,), encs[i].in_layout, encs[i].out_layout, "tni")
        fi = entanglement_fidelity(pur, compose(joint, tensor_maps(encs))).value
        info["fidelity_after"] = fi
        diag["steps"].append(info)
    final = diag["steps"][-1]["fidelity_after"]
    bound = 1 - 2 ** k * eta - 1e-7
    if final < bound:
        raise ExtractionError(f"extracted fidelity {final:.10f} is below the bound {bound:.10f}", diag)
    if sinks is None:
        sinks = [DensityOperator.maximally_mixed(e.out_layout) for e in encs]
    tp_encs = [embed_isometry_tp(W, s, e.in_layout, e.out_layout) for W, s, e in zip(Ws, sinks, encs)]
    newp = Protocol(tp_encs, p.channel, list(p.decodings), "zero-way", None, p.structure)
    rep = FidelityReport(final, "entanglement", "global",
                         optimizer_stats={"eta": eta, "bound": bound, "source_protocol": p.digest()})
    return ExtractionResult(Ws, rep, newp, eta, bound, diag)


# ---------------------------------------------------------------------------
# Encoding stripping
# ---------------------------------------------------------------------------


@dataclass
class StripResult:
    inputs: list
    protocol: Protocol
    extra_decodings: list
    entropy_report: BoundReport
    fidelity_original: float
    fidelity_new: float
    branches: list
    branch_probabilities: list
    construction: str
    candidates: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"fidelity_original": self.fidelity_original, "fidelity_new": self.fidelity_new,
                "branches": self.branches, "branch_probabilities": self.branch_probabilities,
                "construction": self.construction, "candidates": self.candidates,
                "entropy": self.entropy_report.to_json(with_witness=False),
                "protocol": self.protocol.to_json()}


def _extra_decoder(U: np.ndarray, dB: int, c: int, dX: int, cp: int) -> KrausMap:
    """``sigma -> tr_C' U (sigma x |0><0|_C) U^dag`` as a map ``B -> X``."""
    T = U.reshape(dX, cp, dB, c)
    ops = tuple(np.ascontiguousarray(T[:, m, :, 0]) for m in range(cp))
    return prune(KrausMap(ops, SystemLayout.of(("B", dB)), SystemLayout.of(("X", dX)), "tp"))


def _match_on_complement(target: np.ndarray, source: np.ndarray, dA: int, strict: bool) -> np.ndarray:
    """Unitary ``U`` on the non-reference part with ``(I x U) source ~ target``."""
    K = target.size // dA
    lay = SystemLayout.of(("A", dA, "reference"), ("K", K))
    t = PureState(target / np.linalg.norm(target), lay)
    s = PureState(source / np.linalg.norm(source), lay)
    return matching_unitary(t, s, ["A"], strict=strict)


def strip_encodings(p: Protocol, inputs: Sequence[PureState], branch_policy="max") -> StripResult:
    """Move the encodings to the source side and undo them at the receivers.

    Each encoder is dilated and its environment measured; the outcome chosen
    by ``branch_policy`` (``"max"`` for the most probable, or a list of
    indices) turns ``phi_i`` into a pure state ``psi_i`` on ``A_i X_i``. The
    new protocol sends ``psi_i`` through the bare channel and appends local
    decoders built from a matching unitary. Two matchings are tried: the
    dominant-eigenvector product purification of the branch output (strict
    match) and a direct match of ``phi_i x |0>`` onto ``psi_i x |0>``; the one
    with the higher new fidelity is kept.
    """
    if p.regime != "zero-way":
        raise InputError("stripping needs a zero-way protocol")
    if p.structure == "broadcast":
        raise BroadcastStrippingError("stripping is only defined for MAC and k-user unicast structures")
    k = p.senders
    if len(inputs) != k:
        raise InputError(f"{len(inputs)} inputs for {k} senders")
    orig = entanglement_fidelity(inputs, p.end_to_end()).value

    new_inputs, chosen, probs = [], [], []
    phis, dims = [], []
    for i, (phi, enc) in enumerate(zip(inputs, p.encodings)):
        M, dA, dB = leg_matrix(phi)
        pr = [float(np.linalg.norm(M @ E.T) ** 2) for E in enc.kraus_ops]
        if branch_policy == "max":
            l = int(np.argmax(pr))
        else:
            l = int(branch_policy[i])
        if pr[l] < STRIP_FLOOR:
            raise InputError(f"sender {i}: branch {l} has probability {pr[l]:.3e} below {STRIP_FLOOR}")
        Mx = (M @ enc.kraus_ops[l].T) / math.sqrt(pr[l])
        dX = enc.out_dim
        lay = SystemLayout.of((f"A{i}", dA, "reference"), (f"X{i}", dX, "sender"))
        new_inputs.append(PureState(Mx.reshape(-1), lay))
        chosen.append(l)
        probs.append(pr[l])
        phis.append(PureState(M.reshape(-1), SystemLayout.of((f"A{i}", dA, "reference"), (f"B{i}", dB, "sender"))))
        dims.append((dA, dB, dX))

    # branch output of the bare channel on the new inputs, legs ordered A_i B_i
    joint = p.decoder_channel()
    rho, _ = output_state(new_inputs, joint)
    order = []
    for i in range(k):
        order += [i, k + i]
    rho_leg = permute_op(rho, [d[0] for d in dims] + [d[1] for d in dims], order)
    rho_layout = phis[0].layout
    for ph in phis[1:]:
        rho_layout = rho_layout.concat(ph.layout)
    rho_l = DensityOperator((rho_leg + rho_leg.conj().T) / 2, rho_layout)

    def build(kind):
        decs = []
        for i, (dA, dB, dX) in enumerate(dims):
            c, cp = dA * dB * dX, dA * dB * dB
            target = np.zeros((dA, dX, cp), dtype=complex)
            target[:, :, 0] = new_inputs[i].vector.reshape(dA, dX)
            src = np.zeros((dA, dB, c), dtype=complex)
            if kind == "purification":
                Psi_i = Psi_parts[i]  # (dA, dB, dA*dB)
                src[:, :, : Psi_i.shape[2]] = Psi_i
                U = _match_on_complement(target.reshape(-1), src.reshape(-1), dA, strict=True)
            else:
                src[:, :, 0] = phis[i].vector.reshape(dA, dB)
                U = _match_on_complement(target.reshape(-1), src.reshape(-1), dA, strict=False)
            decs.append(_extra_decoder(U, dB, c, dX, cp))
        return decs

    # dominant-eigenvector purification of each leg of the branch output
    leg_dims = [dA * dB for dA, dB, _ in dims]
    Psi_parts = [dominant_purification(ptrace(rho_l.matrix, leg_dims, [i])).reshape(dA, dB, dA * dB)
                 for i, (dA, dB, _) in enumerate(dims)]

    cands = {}
    best = None
    for kind in ("purification", "direct"):
        try:
            decs = build(kind)
        except InputError as exc:
            cands[kind] = {"error": str(exc)}
            continue
        newp = _stripped_protocol(p, new_inputs, decs)
        f = entanglement_fidelity(new_inputs, newp.end_to_end()).value
        cands[kind] = {"fidelity": f}
        if best is None or f > best[0]:
            best = (f, kind, decs, newp)
    if best is None:
        raise InputError(f"no matching construction succeeded: {cands}")
    f_new, kind, decs, newp = best

    # entropy of the A side: original phi versus the branch output
    phi_all = phis[0]
    for ph in phis[1:]:
        phi_all = PureState(np.kron(phi_all.vector, ph.vector), phi_all.layout.concat(ph.layout))
    b_labels = [f"B{i}" for i in range(k)]
    try:
        ent = entropy_continuity_check(phi_all, rho_l, b_labels)
    except InputError as exc:
        s1 = von_neumann_entropy(partial_trace(phi_all.density(), b_labels))
        s2 = von_neumann_entropy(partial_trace(rho_l, b_labels))
        ent = BoundReport("lemma8", abs(s1 - s2), math.nan, math.nan, inconclusive=True,
                          extras={"reason": str(exc)})
    return StripResult(new_inputs, newp, decs, ent, orig, f_new, chosen, probs, kind, cands)


def _stripped_protocol(p: Protocol, new_inputs, extra) -> Protocol:
    encs = [identity_map(SystemLayout.of((f"X{i}", s.layout[f'X{i}'].dim))) for i, s in enumerate(new_inputs)]
    if p.structure == "mac" and len(p.decodings) == 1:
        decs = [compose(tensor_maps(extra), p.decodings[0])]
    else:
        decs = [compose(d2, d1) for d1, d2 in zip(p.decodings, extra)]
    return Protocol(encs, p.channel, decs, "zero-way", None, p.structure)


# ---------------------------------------------------------------------------
# One-way flattening
# ---------------------------------------------------------------------------


@dataclass
class FlattenResult:
    protocol: Protocol
    branch: int
    fidelity: FidelityReport
    ensemble_fidelity: float
    conditional: list
    probabilities: list
    extraction: ExtractionResult | None = None

    def to_json(self) -> dict:
        out = {"branch": self.branch, "conditional_fidelity": self.fidelity.value,
               "ensemble_fidelity": self.ensemble_fidelity, "conditional": self.conditional,
               "probabilities": self.probabilities, "protocol": self.protocol.to_json()}
        if self.extraction is not None:
            out["extracted_fidelity"] = self.extraction.fidelity.value
        return out


def _normalized(enc: KrausMap, rho: DensityOperator) -> tuple[KrausMap, float]:
    pj = float(np.real(np.trace(enc.act(rho.matrix))))
    if pj <= 0:
        return enc, 0.0
    ops = tuple(E / math.sqrt(pj) for E in enc.kraus_ops)
    return KrausMap(ops, enc.in_layout, enc.out_layout, "cp"), pj


def flatten_one_way(p: Protocol, inputs: Sequence, chain: bool = False,
                    sinks: Sequence[DensityOperator] | None = None) -> FlattenResult:
    """Pick the branch with the best conditional fidelity and drop the classical message.

    The ensemble fidelity is the sum of the raw (unnormalized) branch
    fidelities; some branch's conditional fidelity is at least that large.
    The returned zero-way protocol uses the selected branch's encodings,
    completed to trace-preserving maps with a sink, and its decodings. With
    ``chain=True`` the normalized branch encoders are additionally replaced by
    partial isometries, which gives a fully trace-preserving protocol.
    """
    if p.regime != "one-way":
        raise InputError("flattening needs a one-way protocol")
    sources = _sent_states(inputs)
    pur = [s for s in inputs] if all(isinstance(s, PureState) for s in inputs) else _purified(sources)
    raw, probs, cond = [], [], []
    for j, br in enumerate(p.branches):
        F = entanglement_fidelity(pur, p.branch_map(j)).value
        pj = float(np.prod([np.real(np.trace(e.act(s.matrix))) for e, s in zip(br.encodings, sources)]))
        raw.append(F)
        probs.append(pj)
        cond.append(F / pj if pj > FLATTEN_FLOOR else -math.inf)
    if all(pj <= FLATTEN_FLOOR for pj in probs):
        raise InputError("every branch probability is below the floor")
    ens = float(sum(raw))
    j = int(np.argmax(cond))
    br = p.branches[j]
    if sinks is None:
        sinks = [DensityOperator.maximally_mixed(e.out_layout) for e in br.encodings]
    encs = [e if validate(e).tp_pass else tp_completion(e, s) for e, s in zip(br.encodings, sinks)]
    zp = Protocol(encs, p.channel, list(br.decodings), "zero-way", None, p.structure)
    rep = FidelityReport(float(cond[j]), "entanglement", "global",
                         optimizer_stats={"branch": j, "ensemble": ens, "source_protocol": p.digest()})
    extraction = None
    if chain:
        normed = [_normalized(e, s)[0] for e, s in zip(br.encodings, sources)]
        extraction = extract_isometric_encodings(zp, sources, sinks, encoders=normed)
        zp = extraction.protocol
    return FlattenResult(zp, j, rep, ens, cond, probs, extraction)


# ---------------------------------------------------------------------------
# Rate surrogates
# ---------------------------------------------------------------------------


@dataclass
class RateReport:
    n: int
    entanglement_rate: list
    subspace_rate: list

    def to_json(self) -> dict:
        return {"n": self.n, "R_e": self.entanglement_rate, "R_s": self.subspace_rate}


def rates(p: Protocol | None, sources: Sequence[DensityOperator], n: int = 1,
          subspace_dims: Sequence[int] | None = None, max_dim: int = MAX_DIM) -> RateReport:
    """Finite-block surrogates ``S(rho_l^n)/n`` and ``log2 dim(H_l)/n``.

    ``subspace_dims`` gives the dimension of each leg's transmitted subspace
    on the ``n``-block; it defaults to the full block dimension.
    """
    from .sources import IIDSource, block_state
    if n < 1:
        raise InputError("n must be positive")
    if p is not None and len(sources) != p.senders:
        raise InputError(f"{len(sources)} sources for {p.senders} senders")
    re_, rs_ = [], []
    for i, s in enumerate(sources):
        blk = block_state(IIDSource(s), n, max_dim)
        re_.append(von_neumann_entropy(blk) / n)
        full = blk.layout.total_dim
        d = full if subspace_dims is None else int(subspace_dims[i])
        if not 1 <= d <= full:
            raise InputError(f"leg {i}: subspace dimension {d} outside [1, {full}]")
        rs_.append(math.log2(d) / n)
    return RateReport(n, re_, rs_)
