"""Shared builders for random legs, maps and protocols."""

import numpy as np
import pytest

from qnetcap.channels import KrausMap, random_channel, unitary_map
from qnetcap.protocols import Branch, Protocol
from qnetcap.tensor_core import (DensityOperator, PureState, SystemLayout, kron_all, max_entangled,
                                 random_density, random_pure, random_unitary)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def leg_state(i, rng, dA=2, dB=2):
    """Random pure state on reference ``A{i}`` and sent system ``B{i}``."""
    lay = SystemLayout.of((f"A{i}", dA, "reference"), (f"B{i}", dB, "sender"))
    return PureState(random_pure(dA * dB, rng), lay)


def bell_leg(i=0, d=2):
    lay = SystemLayout.of((f"A{i}", d, "reference"), (f"B{i}", d, "sender"))
    return PureState(max_entangled(d), lay)


def source_state(d, rng, rank=None, label="B"):
    return DensityOperator(random_density(d, rng, rank), SystemLayout.of((label, d)))


def noisy_unitary(U, q, rng, env=2):
    """Kraus family ``sqrt(1-q) U`` plus ``sqrt(q)`` times a random channel."""
    d_out, d_in = U.shape
    R = random_channel(d_in, d_out, env, int(rng.integers(2 ** 31)))
    ops = [np.sqrt(1 - q) * U] + [np.sqrt(q) * E for E in R.kraus_ops]
    return KrausMap.from_ops(ops, [d_in], [d_out])


def weak_channel(D, q, rng, env=2):
    return noisy_unitary(np.eye(D, dtype=complex), q, rng, env)


def weak_mac(k, rng, q_enc=0.003, q_ch=0.002, d=2):
    """Zero-way MAC: near-unitary encoders, weakly noisy channel, inverting joint decoder."""
    Us = [random_unitary(d, rng) for _ in range(k)]
    encs = [noisy_unitary(U, q_enc * rng.random(), rng) for U in Us]
    ch = weak_channel(d ** k, q_ch * rng.random(), rng)
    dec = unitary_map(kron_all(Us).conj().T)
    return Protocol(encs, ch, [dec]), Us


def unitary_one_way(k, n_branches, rng, q_enc=0.002, q_ch=0.002, d=2):
    """One-way protocol: branch ``j`` applies random unitaries the decoder undoes.

    Sender ``i`` in branch ``j`` has Kraus weight ``p_j^(1/k)`` so the
    branch sum of the joint encodings is trace preserving.
    """
    p = rng.dirichlet(np.ones(n_branches))
    ch = weak_channel(d ** k, q_ch * rng.random(), rng)
    branches = []
    for j in range(n_branches):
        encs, Us = [], []
        for _ in range(k):
            U = random_unitary(d, rng)
            base = noisy_unitary(U, q_enc * rng.random(), rng)
            s = p[j] ** (1 / (2 * k))
            encs.append(KrausMap(tuple(s * E for E in base.kraus_ops), base.in_layout, base.out_layout, "tni"))
            Us.append(U)
        branches.append(Branch(encs, [unitary_map(kron_all(Us).conj().T)]))
    return Protocol([], ch, [], "one-way", branches)


def random_one_way(rng, n_branches=3, d=2, k=1):
    """One-way protocol from a random encoder split into branches with random decoders."""
    ch = random_channel(d ** k, d ** k, 2, int(rng.integers(2 ** 31)))
    per_sender = []
    for _ in range(k):
        full = random_channel(d, d, 2 * n_branches, int(rng.integers(2 ** 31)))
        per_sender.append(full.kraus_ops)
    # joint branch j uses Kraus pair j of every sender; the joint sum is TP only for k=1,
    # so for k > 1 branch j is (pair j of sender 0) x (full channel of the others)
    branches = []
    for j in range(n_branches):
        encs = []
        for i in range(k):
            ops = per_sender[i][2 * j: 2 * j + 2] if i == 0 else per_sender[i]
            encs.append(KrausMap.from_ops(list(ops), [d], [d], kind="tni" if i == 0 else "tp"))
        V = random_unitary(d ** k, rng)
        branches.append(Branch(encs, [unitary_map(V)]))
    return Protocol([], ch, [], "one-way", branches)
