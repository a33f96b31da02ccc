"""Hypothesis property tests for the invariants each module promises."""

import json

import numpy as np
from hypothesis import given, settings, strategies as st

from qnetcap.bounds import (TAU_BOUND, alpha_inequality, check_global_from_local, check_local_from_global,
                            dominant_eigen_bounds, entropy_continuity_check, overlap_triangle)
from qnetcap.channels import KrausMap, compose, random_channel, tensor_maps
from qnetcap.fidelity import entanglement_fidelity, entanglement_fidelity_kraus, local_entanglement_fidelity
from qnetcap.protocols import flatten_one_way, reduce_leg
from qnetcap.sources import IIDSource, typical_projector
from qnetcap.tensor_core import (DensityOperator, PureState, SystemLayout, apply_on_factors, eig_desc, kron_all,
                                 partial_inner_product, partial_trace, ptrace, purify, random_density, random_pure,
                                 random_unitary, von_neumann_entropy)

from conftest import leg_state, random_one_way

seeds = st.integers(0, 2 ** 32 - 1)
small = settings(max_examples=40, deadline=None)


def rng_of(seed):
    return np.random.default_rng(seed)


@small
@given(seeds, st.integers(1, 6), st.integers(1, 6))
def test_purification_round_trip(seed, d, r):
    rng = rng_of(seed)
    rank = min(r, d)
    rho = DensityOperator(random_density(d, rng, rank=rank), SystemLayout.of(("a", d)))
    psi = purify(rho, "e")
    assert np.linalg.norm(partial_trace(psi, ["e"]).matrix - rho.matrix) < 1e-10


@small
@given(seeds, st.integers(1, 4), st.integers(1, 4))
def test_basis_inner_products_sum_to_partial_trace(seed, da, db):
    rng = rng_of(seed)
    m = random_density(da * db, rng)
    lay = SystemLayout.of(("a", da), ("b", db))
    total = sum(partial_inner_product(m, lay, {"a": e}, {"a": e}) for e in np.eye(da))
    assert np.linalg.norm(total - ptrace(m, [da, db], [1])) < 1e-10


@small
@given(seeds, st.integers(1, 8))
def test_entropy_unitary_invariance(seed, d):
    rng = rng_of(seed)
    m = random_density(d, rng)
    U = random_unitary(d, rng)
    assert abs(von_neumann_entropy(m) - von_neumann_entropy(U @ m @ U.conj().T)) < 1e-9
    assert -1e-12 <= von_neumann_entropy(m) <= np.log2(d) + 1e-12


@small
@given(seeds, st.integers(1, 5))
def test_state_json_round_trip(seed, d):
    rng = rng_of(seed)
    rho = DensityOperator(random_density(d, rng), SystemLayout.of(("a", d)))
    assert np.array_equal(DensityOperator.from_json(json.loads(json.dumps(rho.to_json()))).matrix, rho.matrix)
    km = random_channel(d, d, 2, seed)
    back = KrausMap.from_json(json.loads(json.dumps(km.to_json())))
    assert all(np.array_equal(a, b) for a, b in zip(km.kraus_ops, back.kraus_ops))


@small
@given(seeds, st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_tp_maps_preserve_trace(seed, din, dout, env):
    if dout * env < din:
        return
    rng = rng_of(seed)
    km = random_channel(din, dout, env, seed)
    assert abs(np.trace(km.act(random_density(din, rng))).real - 1) < 1e-9


@small
@given(seeds)
def test_compose_associative(seed):
    rng = rng_of(seed)
    a, b, c = (random_channel(2, 2, 2, int(rng.integers(1 << 30))) for _ in range(3))
    rho = random_density(2, rng)
    lhs = compose(c, compose(b, a)).act(rho)
    rhs = compose(compose(c, b), a).act(rho)
    assert np.linalg.norm(lhs - rhs) < 1e-10


@small
@given(seeds, st.integers(1, 3))
def test_kraus_sum_matches_direct(seed, k):
    rng = rng_of(seed)
    srcs = [DensityOperator(random_density(2, rng), SystemLayout.of((f"B{i}", 2))) for i in range(k)]
    encs = [random_channel(2, 2, 2, int(rng.integers(1 << 30))) for _ in range(k)]
    A = random_channel(2 ** k, 2 ** k, 2, int(rng.integers(1 << 30)))
    val = entanglement_fidelity_kraus(srcs, A, encs).value
    pur = [purify(s, f"A{i}") for i, s in enumerate(srcs)]
    assert abs(val - entanglement_fidelity(pur, compose(A, tensor_maps(encs))).value) < 1e-9


@small
@given(seeds)
def test_purification_independence(seed):
    rng = rng_of(seed)
    rho = DensityOperator(random_density(2, rng), SystemLayout.of(("B", 2)))
    ch = random_channel(2, 2, 3, seed)
    p1 = purify(rho, "A", env_dim=3)
    p2 = apply_on_factors(random_unitary(3, rng), p1, ["A"])
    assert abs(entanglement_fidelity([p1], ch).value - entanglement_fidelity([p2], ch).value) < 1e-9


@small
@given(seeds)
def test_global_local_fidelity_consistency(seed):
    rng = rng_of(seed)
    legs = [leg_state(0, rng), leg_state(1, rng)]
    ch = random_channel(4, 4, 2, seed)
    g = entanglement_fidelity(legs, ch).value
    locs = [local_entanglement_fidelity(legs, ch, j).value for j in range(2)]
    assert all(l >= g - 1e-12 for l in locs)
    assert g >= 1 - sum(1 - l for l in locs) - 1e-12


@small
@given(seeds, st.integers(2, 3))
def test_lemma1_and_lemma2(seed, k):
    rng = rng_of(seed)
    m = random_density(2 ** k, rng)
    vs = [random_pure(2, rng) for _ in range(k)]
    assert check_local_from_global((m, [2] * k), vs).passed
    assert check_global_from_local((m, [2] * k), vs).passed


@small
@given(seeds, st.integers(2, 8))
def test_overlap_sound_form(seed, d):
    rng = rng_of(seed)
    a, b, c = (random_pure(d, rng) for _ in range(3))
    assert overlap_triangle(a, b, c).extras["margin_sound"] >= -TAU_BOUND


@small
@given(seeds, st.integers(2, 8))
def test_dominant_eigen(seed, d):
    rng = rng_of(seed)
    assert dominant_eigen_bounds((random_density(d, rng), [d]), random_pure(d, rng)).passed


@small
@given(seeds, st.floats(0, 0.0138))
def test_entropy_continuity(seed, t):
    rng = rng_of(seed)
    lay = SystemLayout.of(("A", 2), ("B", 3))
    phi = kron_all([random_pure(2, rng), random_pure(3, rng)])
    m = (1 - t) * np.outer(phi, phi.conj()) + t * random_density(6, rng)
    assert entropy_continuity_check(PureState(phi, lay), DensityOperator(m, lay), ["A"]).passed


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8))
def test_alpha_inequality(weights):
    assert alpha_inequality(weights).passed


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.integers(1, 8))
def test_power_bound(e, k):
    assert (1 - e) ** k >= 1 - k * e - 1e-15


@small
@given(seeds, st.integers(2, 3), st.data())
def test_reduce_leg_identity(seed, k, data):
    rng = rng_of(seed)
    target = data.draw(st.integers(0, k - 1))
    srcs = [DensityOperator(random_density(2, rng), SystemLayout.of((f"B{i}", 2))) for i in range(k)]
    encs = [random_channel(2, 2, 2, int(rng.integers(1 << 30))) for _ in range(k)]
    joint = random_channel(2 ** k, 2 ** k, 2, int(rng.integers(1 << 30)))
    pur = [purify(s, f"A{i}") for i, s in enumerate(srcs)]
    full = entanglement_fidelity(pur, compose(joint, tensor_maps(encs))).value
    red = reduce_leg(joint, encs, srcs, target)
    assert abs(full - entanglement_fidelity([pur[target]], compose(red, encs[target])).value) < 1e-9


@small
@given(seeds, st.integers(1, 4))
def test_flatten_pigeonhole(seed, n_branches):
    rng = rng_of(seed)
    p = random_one_way(rng, n_branches=n_branches)
    res = flatten_one_way(p, [leg_state(0, rng)])
    assert res.fidelity.value >= res.ensemble_fidelity - 1e-12


@small
@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=3), st.integers(1, 8))
def test_typical_paths_and_monotonicity(raw, n):
    p = np.asarray(raw) / np.sum(raw)
    src = IIDSource.from_matrix(np.diag(p))
    if src.dim ** n > 512:
        n = 4
    masses = []
    for eps in (0.05, 0.2, 0.5):
        _, a = typical_projector(src, n, eps, path="matrix")
        _, b = typical_projector(src, n, eps, path="spectral")
        assert a.typical_dim == b.typical_dim and abs(a.mass - b.mass) < 1e-12
        masses.append(b.mass)
    assert masses[0] <= masses[1] + 1e-15 <= masses[2] + 2e-15


@small
@given(seeds, st.integers(1, 6))
def test_eig_desc_sorted_and_complete(seed, d):
    m = random_density(d, rng_of(seed))
    sp = eig_desc(m)
    assert np.all(np.diff(sp.values) <= 1e-15)
    assert np.linalg.norm(sp.reconstruct() - m) < 1e-10
