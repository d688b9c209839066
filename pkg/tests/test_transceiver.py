import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnisurf.transceiver import (
    LinkResult,
    PilotConfig,
    PrecoderSingularityError,
    complex_normal,
    evaluate_link,
    mmse_estimate,
    transmit_slot,
    uplink_pilot,
    zf_precoder,
)


def _H(rng, n=5, k=5):
    return complex_normal((n, k), 1.0, rng)


def _direct_rates(V, H, s2):
    # Independent loop-based evaluation of the SINR and rate formulas.
    k = H.shape[1]
    out = []
    for u in range(k):
        sig = abs(np.vdot(V[u].conj(), H[:, u])) ** 2
        intf = sum(abs(np.vdot(V[l].conj(), H[:, u])) ** 2 for l in range(k) if l != u)
        out.append(np.log2(1 + sig / (intf + s2)))
    return np.array(out)


def test_noiseless_pilot_is_exact_product():
    rng = np.random.default_rng(0)
    H = _H(rng)
    cfg = PilotConfig(np.diag(np.exp(1j * np.arange(5))), 0.0)
    assert np.array_equal(uplink_pilot(H, cfg, rng), H @ cfg.X_p)


def test_pilot_noise_variance():
    rng = np.random.default_rng(1)
    H = np.zeros((200, 500), dtype=complex)
    cfg = PilotConfig(np.eye(500), 0.1)
    y = uplink_pilot(H, cfg, rng)
    assert np.mean(np.abs(y) ** 2) == pytest.approx(0.1, rel=0.03)


def test_noiseless_mmse_recovers_channel():
    rng = np.random.default_rng(2)
    H = _H(rng)
    q, _ = np.linalg.qr(_H(rng))
    cfg = PilotConfig(q, 0.0)
    assert np.abs(mmse_estimate(uplink_pilot(H, cfg, rng), cfg) - H).max() < 1e-10


def test_mmse_scaled_identity():
    rng = np.random.default_rng(3)
    c, s2 = 0.8 - 0.6j, 0.1
    Y = _H(rng)
    got = mmse_estimate(Y, PilotConfig(c * np.eye(5), s2))
    assert np.allclose(got, Y * np.conj(c) / (abs(c) ** 2 + s2))


def test_mmse_shrinks_with_noise():
    rng = np.random.default_rng(4)
    Y = _H(rng)
    norms = [np.linalg.norm(mmse_estimate(Y, PilotConfig(np.eye(5), s))) for s in (0.1, 10, 1e6)]
    assert norms[0] > norms[1] > norms[2] and norms[2] < 1e-4


def test_zf_orthogonal_columns():
    q, _ = np.linalg.qr(_H(np.random.default_rng(5)))
    H = q[:, :3] * np.array([2.0, 0.5, 1.5])
    V = zf_precoder(H)
    for k in range(3):
        v = V[k].conj()
        assert abs(abs(np.vdot(v, H[:, k] / np.linalg.norm(H[:, k]))) - 1) < 1e-12


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_zf_nulls_interference_with_unit_rows(seed, k):
    rng = np.random.default_rng(seed)
    H = _H(rng, 5, k)
    V = zf_precoder(H)
    assert np.allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-12)
    g = np.abs(V @ H)
    assert (g - np.diag(np.diag(g))).max() < 1e-9


def test_zf_rank_deficient():
    H = np.ones((5, 3), dtype=complex)
    with pytest.raises(PrecoderSingularityError):
        zf_precoder(H)
    with pytest.raises(PrecoderSingularityError):
        zf_precoder(np.ones((2, 3)))


def test_single_ue_sinr():
    h = _H(np.random.default_rng(6), 5, 1)
    res = evaluate_link(zf_precoder(h), h, 0.5)
    assert res.sinr[0] == pytest.approx(np.linalg.norm(h) ** 2 / 0.5)


def test_unit_snr_gives_one_bit():
    H = np.eye(2, dtype=complex) * np.sqrt(0.5)
    res = evaluate_link(np.eye(2), H, 0.5)
    assert np.allclose(res.rate, 1.0)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_rates_match_direct_evaluation(seed):
    rng = np.random.default_rng(seed)
    H = _H(rng)
    V = zf_precoder(H + 0.3 * _H(rng))
    res = evaluate_link(V, H, 0.5)
    assert np.allclose(res.rate, _direct_rates(V, H, 0.5), atol=1e-12)
    assert res.sum_rate == pytest.approx(res.rate.sum())
    # common phase per row does not matter
    rot = V * np.exp(1j * rng.uniform(0, 6, (5, 1)))
    assert np.allclose(evaluate_link(rot, H, 0.5).rate, res.rate, atol=1e-12)


def test_rate_monotone_in_sinr():
    a = LinkResult(np.array([1.0]), np.log2(1 + np.array([1.0])))
    b = LinkResult(np.array([2.0]), np.log2(1 + np.array([2.0])))
    assert b.sum_rate > a.sum_rate


def test_noise_must_be_positive():
    with pytest.raises(ValueError):
        evaluate_link(np.eye(2), np.eye(2), 0.0)


def test_end_to_end_perfect_csi():
    rng = np.random.default_rng(7)
    H = _H(rng)
    h_hat, link = transmit_slot(H, PilotConfig.orthogonal(5, 0.0), 0.5, rng)
    assert np.abs(h_hat - H).max() < 1e-12
    V = zf_precoder(h_hat)
    sig = np.abs(np.sum(V * H.T, axis=1)) ** 2
    assert np.allclose(link.sinr, sig / 0.5)


def test_singular_estimate_scores_zero():
    H = np.ones((5, 5), dtype=complex)
    _, link = transmit_slot(H, PilotConfig.orthogonal(5, 0.0), 0.5, np.random.default_rng(0))
    assert link.sum_rate == 0.0
