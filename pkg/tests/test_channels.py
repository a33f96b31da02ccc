import json

import numpy as np
import pytest

from qnetcap.channels import (KrausMap, PartialIsometry, apply, compose, embed_isometry_tp, identity_map,
                              map_from_json, parse_channel_spec, prune, random_channel, standard_channel,
                              stinespring, tensor_maps, tp_completion, unitary_map, validate)
from qnetcap.exceptions import InputError, LayoutError
from qnetcap.fidelity import entanglement_fidelity
from qnetcap.tensor_core import (DensityOperator, PureState, SystemLayout, max_entangled, partial_trace,
                                 random_density, random_pure, random_unitary)

from conftest import leg_state


def qubit_state(m):
    return DensityOperator(np.asarray(m, dtype=complex), SystemLayout.of(("q", 2)))


def test_validate_identity():
    rep = validate(identity_map(2))
    assert rep.tp_pass and rep.tp_deviation == 0.0


def test_validate_projector_is_tni_only():
    proj = np.diag([1.0, 0.0])
    km = KrausMap.from_ops([proj], kind="tni")
    rep = validate(km)
    assert rep.tni_pass and not rep.tp_pass
    with pytest.raises(InputError):
        KrausMap.from_ops([proj], kind="tp")


def test_random_channel_complete_over_seeds():
    worst = 0.0
    for seed in range(100):
        km = random_channel(3, 2, 4, seed)
        worst = max(worst, validate(km).tp_deviation)
    assert worst < 1e-10


def test_random_channel_deterministic():
    a, b = random_channel(2, 3, 2, 7), random_channel(2, 3, 2, 7)
    assert all(np.array_equal(x, y) for x, y in zip(a.kraus_ops, b.kraus_ops))


def test_random_channel_isometry_and_no_room():
    km = random_channel(3, 3, 1, 1)
    U = km.kraus_ops[0]
    assert np.allclose(U.conj().T @ U, np.eye(3), atol=1e-12)
    with pytest.raises(InputError):
        random_channel(4, 1, 2, 0)


def test_compose_identity_first(rng):
    ch = random_channel(2, 2, 3, 11)
    both = compose(identity_map(2), ch)
    rho = random_density(2, rng)
    assert np.allclose(both.act(rho), ch.act(rho), atol=1e-12)


def test_compose_depolarizing_parameters(rng):
    d = standard_channel("depolarizing", 2, 0.5)
    dd = compose(d, d)
    ref = standard_channel("depolarizing", 2, 0.75)
    for _ in range(10):
        rho = random_density(2, rng)
        assert np.allclose(dd.act(rho), ref.act(rho), atol=1e-12)


def test_compose_counts_and_kind():
    a = random_channel(2, 2, 2, 1)
    b = random_channel(2, 2, 3, 2)
    c = compose(b, a)
    assert len(c) == 6 and c.kind == "tp"
    proj = KrausMap.from_ops([np.diag([1.0, 0.0])], kind="tni")
    assert compose(proj, a).kind == "tni"


def test_compose_layout_mismatch():
    with pytest.raises(LayoutError):
        compose(identity_map(3), identity_map(2))


def test_tensor_maps_identity_and_tp():
    t = tensor_maps([identity_map(2), identity_map(3)])
    assert np.allclose(t.kraus_ops[0], np.eye(6))
    r = tensor_maps([random_channel(2, 2, 2, 3), random_channel(2, 2, 3, 4)])
    assert r.kind == "tp" and validate(r).tp_pass
    assert len(r) == 6


def test_tensor_dephasing_reduced_states():
    t = tensor_maps([standard_channel("dephasing", 2, 0.3), identity_map(2)])
    phi = np.outer(max_entangled(2), max_entangled(2))
    out = DensityOperator(t.act(phi), SystemLayout.qubits("a", "b"))
    assert np.allclose(partial_trace(out, ["b"]).matrix, np.eye(2) / 2)
    assert np.allclose(partial_trace(out, ["a"]).matrix, np.eye(2) / 2)


def test_apply_identity_and_full_depolarizing(rng):
    rho = qubit_state(random_density(2, rng))
    assert np.allclose(apply(identity_map(rho.layout), rho).matrix, rho.matrix)
    out = apply(standard_channel("depolarizing", 2, 1.0), rho)
    assert np.allclose(out.matrix, np.eye(2) / 2)


def test_apply_dephasing_plus_state():
    p = 0.3
    plus = qubit_state(np.full((2, 2), 0.5))
    out = apply(standard_channel("dephasing", 2, p), plus).matrix
    # explicit 2x2: (1-p) rho + p Z rho Z
    Z = np.diag([1, -1])
    expect = (1 - p) * plus.matrix + p * Z @ plus.matrix @ Z
    assert np.allclose(out, expect)
    assert abs(out[0, 1] - 0.5 * (1 - 2 * p)) < 1e-12


def test_apply_layout_mismatch():
    rho = DensityOperator(np.eye(3) / 3, SystemLayout.of(("q", 3)))
    with pytest.raises(LayoutError):
        apply(identity_map(2), rho)


def test_apply_tni_flags_subnormalized():
    km = KrausMap.from_ops([np.diag([1.0, 0.0])], kind="tni")
    out = apply(km, qubit_state(np.eye(2) / 2))
    assert out.norm_flag == "subnormalized"
    assert abs(out.trace - 0.5) < 1e-12


def test_standard_channels(rng):
    rho = random_density(2, rng)
    assert np.allclose(standard_channel("depolarizing", 2, 0.0).act(rho), rho)
    out = standard_channel("dephasing", 2, 0.5).act(rho)
    assert abs(out[0, 1]) < 1e-12
    out = standard_channel("amplitude_damping", 2, 1.0).act(rho)
    assert np.allclose(out, np.diag([1, 0]))
    rho3 = random_density(3, rng)
    out = standard_channel("depolarizing", 3, 0.4).act(rho3)
    assert np.allclose(out, 0.6 * rho3 + 0.4 * np.eye(3) / 3)


def test_standard_channel_errors():
    with pytest.raises(InputError):
        standard_channel("depolarizing", 2, 1.5)
    with pytest.raises(InputError):
        standard_channel("erasure", 2, 0.1)
    with pytest.raises(InputError):
        standard_channel("amplitude_damping", 3, 0.1)


def test_parse_channel_spec():
    km = parse_channel_spec("depolarizing:0.25")
    assert km.in_dim == 2
    assert parse_channel_spec("dephasing:0.1@3").in_dim == 3
    assert len(parse_channel_spec("identity")) == 1
    with pytest.raises(InputError):
        parse_channel_spec("depolarizing 0.2")


def test_embed_unitary_ignores_sink(rng):
    U = random_unitary(2, rng)
    sink = qubit_state(random_density(2, rng))
    km = embed_isometry_tp(PartialIsometry(U), sink)
    rho = random_density(2, rng)
    assert np.allclose(km.act(rho), U @ rho @ U.conj().T, atol=1e-12)


def test_embed_full_leakage():
    W = PartialIsometry(np.diag([1.0, 0.0]))
    km = embed_isometry_tp(W, qubit_state(np.eye(2) / 2))
    assert validate(km).tp_pass
    assert np.allclose(km.act(np.diag([0.0, 1.0])), np.eye(2) / 2)


def test_embed_preserves_fidelity_on_support(rng):
    for _ in range(200):
        V = random_unitary(3, rng)[:, :2]
        W = PartialIsometry(np.hstack([V, np.zeros((3, 1))]))  # support = first two levels
        sink = DensityOperator(random_density(3, rng), SystemLayout.of(("q", 3)))
        km = embed_isometry_tp(W, sink)
        v = np.zeros(6, dtype=complex)
        v.reshape(2, 3)[:, :2] = random_pure(4, rng).reshape(2, 2)
        leg = PureState(v, SystemLayout.of(("A", 2, "reference"), ("B", 3, "sender")))
        direct = entanglement_fidelity([leg], KrausMap.from_ops([W.matrix], kind="tni")).value
        assert abs(entanglement_fidelity([leg], km).value - direct) < 1e-10


def test_partial_isometry_invariant():
    with pytest.raises(InputError):
        PartialIsometry(np.array([[1.0, 1.0], [0.0, 1.0]]))
    W = PartialIsometry(np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]))
    assert W.rank == 1 and W.idempotency_error() < 1e-12


def test_tp_completion(rng):
    km = KrausMap.from_ops([np.sqrt(0.6) * random_unitary(2, rng)], kind="tni")
    full = tp_completion(km, qubit_state(np.diag([0.0, 1.0])))
    assert validate(full).tp_pass


def test_prune_and_stinespring():
    km = KrausMap.from_ops([np.eye(2), np.zeros((2, 2))])
    assert len(prune(km)) == 1
    ch = random_channel(2, 2, 3, 5)
    V = stinespring(ch)
    assert np.allclose(V.conj().T @ V, np.eye(2), atol=1e-12)


def test_convex_mixtures(rng):
    ch = random_channel(2, 3, 2, 8)
    r1, r2 = random_density(2, rng), random_density(2, rng)
    p = 0.37
    lhs = ch.act(p * r1 + (1 - p) * r2)
    assert np.linalg.norm(lhs - p * ch.act(r1) - (1 - p) * ch.act(r2)) < 1e-10


def test_compose_associative(rng):
    a, b, c = (random_channel(2, 2, 2, s) for s in (1, 2, 3))
    rho = random_density(2, rng)
    x = compose(c, compose(b, a)).act(rho)
    y = compose(compose(c, b), a).act(rho)
    assert np.linalg.norm(x - y) < 1e-10


def test_json_round_trip(rng):
    km = random_channel(2, 3, 2, 4)
    back = map_from_json(json.loads(json.dumps(km.to_json())))
    assert all(np.array_equal(x, y) for x, y in zip(km.kraus_ops, back.kraus_ops))
    assert map_from_json("amplitude_damping:0.2").in_dim == 2


def test_unitary_map_with_leg(rng):
    leg = leg_state(0, rng)
    assert abs(entanglement_fidelity([leg], unitary_map(np.eye(2))).value - 1) < 1e-12
