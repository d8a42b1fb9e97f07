import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from apsbeam.channel import crandn
from apsbeam.radio import (
    BeamformingMatrix, baseline_beams, hab_sinrs, haps_sinrs, mrt_precoder, project_power, rate_report,
    reward, sinr_hab, sinr_haps, user_rate, zf_precoder,
)


def test_hab_sinr_hand_case():
    # two clusters, one user each, one antenna: gains are |h w|^2 directly
    H = np.array([[[1.0], [0.5]], [[0.2], [2.0]]], dtype=complex)  # (B=2, U=2, N=1)
    W = np.array([[[1.0]], [[1.0]]], dtype=complex)  # (B=2, N=1, K=1)
    # user 0: signal |1|^2, interference from HAB 1 at user 0: |0.2|^2
    assert sinr_hab(0, H, W, 0.1) == pytest.approx(1.0 / (0.04 + 0.1))
    # user 1: signal |2|^2 from HAB 1, interference |0.5|^2 from HAB 0
    assert sinr_hab(1, H, W, 0.1) == pytest.approx(4.0 / (0.25 + 0.1))
    np.testing.assert_allclose(hab_sinrs(H, W, 0.1), [1.0 / 0.14, 4.0 / 0.35])


def test_hab_intra_cluster_interference_counted():
    H = np.array([[[1.0], [1.0]]], dtype=complex)  # one HAB, two users, one antenna
    W = np.array([[[1.0, 2.0]]], dtype=complex)
    assert sinr_hab(0, H, W, 1.0) == pytest.approx(1.0 / (4.0 + 1.0))
    assert sinr_hab(1, H, W, 1.0) == pytest.approx(4.0 / (1.0 + 1.0))


def test_haps_sinr_hand_case():
    H = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=complex)
    W = np.array([[2.0, 1.0], [0.0, 1.0]], dtype=complex)
    # user 0 sees beam 0 gain 4, beam 1 gain 1; user 1 sees beam 0 gain 0, beam 1 gain 1
    assert sinr_haps(0, H, W, 1.0) == pytest.approx(4.0 / 2.0)
    assert sinr_haps(1, H, W, 1.0) == pytest.approx(1.0)
    np.testing.assert_allclose(haps_sinrs(H, W, 1.0), [2.0, 1.0])


def test_single_user_single_antenna_rate():
    rate = user_rate(3.0, 0.0)
    assert rate == 2.0
    H = np.ones((1, 1, 1), dtype=complex)
    W = np.full((1, 1, 1), math.sqrt(3.0), dtype=complex)
    rep = rate_report(H, W, np.ones((1, 1), dtype=complex), np.zeros((1, 1), dtype=complex), 1.0)
    assert rep.sum_rate == pytest.approx(2.0)


def test_reward_is_mean_rate():
    assert reward([1.0, 2.0, 6.0]) == 3.0


def test_vectorised_sinr_matches_reference_loop():
    rng = np.random.default_rng(0)
    B, K, N = 3, 2, 4
    H_hab = crandn(rng, (B, B * K, N))
    W_hab = crandn(rng, (B, N, K))
    H_haps = crandn(rng, (B * K, 9))
    W_haps = crandn(rng, (9, B * K))
    rep = rate_report(H_hab, W_hab, H_haps, W_haps, 0.3)
    for u in range(B * K):
        assert rep.sinr_hab[u] == pytest.approx(sinr_hab(u, H_hab, W_hab, 0.3), rel=1e-12)
        assert rep.sinr_haps[u] == pytest.approx(sinr_haps(u, H_haps, W_haps, 0.3), rel=1e-12)
        assert rep.rates[u] == pytest.approx(user_rate(rep.sinr_hab[u], rep.sinr_haps[u]), rel=1e-12)


def test_sinr_shape_mismatch():
    with pytest.raises(ValueError):
        sinr_hab(0, np.ones((2, 4, 3)), np.ones((2, 4, 2)), 1.0)
    with pytest.raises(ValueError):
        haps_sinrs(np.ones((4, 3)), np.ones((4, 4)), 1.0)


def test_project_total_scaling():
    W = np.array([[3.0, 4.0]], dtype=complex)  # power 25
    out = project_power(BeamformingMatrix(1, W, 1.0))
    np.testing.assert_allclose(out.W, W / 5.0)
    assert out.is_feasible()


def test_project_per_beam_clips_only_offenders():
    W = np.array([[3.0, 0.5], [4.0, 0.5]], dtype=complex)
    out = project_power(BeamformingMatrix(0, W, 1.0, per_beam=True))
    np.testing.assert_allclose(out.W[:, 0], [0.6, 0.8])
    np.testing.assert_array_equal(out.W[:, 1], W[:, 1])


def test_project_feasible_untouched():
    b = BeamformingMatrix(1, np.array([[0.1, 0.2]], dtype=complex), 1.0)
    assert project_power(b) is b


def test_project_rejects_nan():
    with pytest.raises(ValueError, match="BS 3"):
        project_power(BeamformingMatrix(3, np.array([[np.nan]], dtype=complex), 1.0))


cmats = arrays(np.complex128, (6, 4), elements=st.complex_numbers(max_magnitude=1e3, allow_nan=False,
                                                                   allow_infinity=False))


def _pow2_normalize(x):
    # exact power-of-two rescale; plain division by a subnormal overflows inside complex division
    e = np.frexp(np.abs(x).max())[1]
    return np.ldexp(x.real, -e) + 1j * np.ldexp(x.imag, -e)


@settings(max_examples=200, deadline=None)
@given(cmats, st.floats(0.1, 100.0), st.booleans())
def test_projection_properties(W, P, per_beam):
    once = project_power(BeamformingMatrix(0, W, P, per_beam))
    assert once.is_feasible()
    twice = project_power(once)
    assert np.array_equal(twice.W, once.W)  # bit-exact
    # direction of every column is preserved
    for k in range(W.shape[1]):
        a, b = W[:, k], once.W[:, k]
        if np.abs(b).max() > 0:  # a column scaled to exactly zero is trivially a nonnegative multiple
            # rescale first so tiny columns don't underflow in the norms
            a, b = _pow2_normalize(a), _pow2_normalize(b)
            cos = abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
            assert cos == pytest.approx(1.0, abs=1e-9)


def test_zf_nulls_cross_terms():
    rng = np.random.default_rng(1)
    H = crandn(rng, (4, 36)) * 1e-5
    W = zf_precoder(H, 40.0).W
    G = np.abs(H @ W)
    off = G - np.diag(np.diag(G))
    assert off.max() / np.diag(G).min() < 1e-9
    np.testing.assert_allclose(np.sum(np.abs(W) ** 2, axis=0), 10.0)


def test_zf_per_beam_power():
    rng = np.random.default_rng(2)
    W = zf_precoder(crandn(rng, (16, 64)), 100.0, per_beam=True).W
    np.testing.assert_allclose(np.sum(np.abs(W) ** 2, axis=0), 100.0)


def test_zf_rank_deficient_names_bs():
    H = np.ones((2, 4), dtype=complex)
    with pytest.raises(np.linalg.LinAlgError, match="BS 2"):
        zf_precoder(H, 1.0, bs_id=2)


def test_zf_too_many_users():
    with pytest.raises(ValueError):
        zf_precoder(np.ones((5, 4), dtype=complex), 1.0)


def test_mrt_aligns_with_channel():
    rng = np.random.default_rng(3)
    H = crandn(rng, (3, 16))
    W = mrt_precoder(H, 30.0).W
    for k in range(3):
        w = W[:, k] / np.linalg.norm(W[:, k])
        assert abs(H[k] @ w) == pytest.approx(np.linalg.norm(H[k]), rel=1e-12)
    np.testing.assert_allclose(np.sum(np.abs(W) ** 2, axis=0), 10.0)


def test_mrt_beats_random_beams_single_user():
    rng = np.random.default_rng(4)
    h = crandn(rng, 36)
    w = mrt_precoder(h[None, :], 1.0).W[:, 0]
    best = abs(h @ w) ** 2
    rand = crandn(rng, (1000, 36))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    assert best >= np.max(np.abs(rand @ h) ** 2)


def test_baseline_beams_shapes():
    rng = np.random.default_rng(5)
    B, K = 2, 3
    H_hab = crandn(rng, (B, B * K, 16))
    H_haps = crandn(rng, (B * K, 16))
    W_hab, W_haps = baseline_beams("zf", H_hab, H_haps, K, 40.0, 100.0)
    assert W_hab.shape == (B, 16, K) and W_haps.shape == (16, B * K)
    for c in range(B):
        G = H_hab[c, c * K:(c + 1) * K] @ W_hab[c]
        assert np.abs(G - np.diag(np.diag(G))).max() < 1e-9 * np.abs(np.diag(G)).min()
