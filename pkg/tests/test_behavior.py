import math

import numpy as np
import pytest

from hexfleet import autodiff as ad
from hexfleet.autodiff import Adam, Tensor, gradcheck
from hexfleet.behavior import (
    GruParams,
    auc_score,
    bce_loss,
    behavior_auc,
    build_contrastive_batch,
    calibrate_fare_weight,
    contrastive_loss,
    dynamic_reward,
    fare_suffix_sum,
    gru_step,
    init_gru_params,
    initial_state,
    pretrain_behavior,
    reward_trace,
    score_segment,
    trace_probs,
)
from hexfleet.geo import GeoPoint, location_embedding


def constant_params(dim, value):
    def mat():
        return Tensor(np.full((dim, dim), value), requires_grad=True)

    def vec():
        return Tensor(np.full(dim, value), requires_grad=True)

    return GruParams(
        w_zx=mat(), w_zp=mat(), w_yx=mat(), w_yp=mat(), w_xc=mat(), w_pc=mat(),
        b_z=vec(), b_y=vec(), b_c=vec(),
        w_out=Tensor(np.full(dim, value), requires_grad=True),
        b_out=Tensor(np.float64(value), requires_grad=True),
    )


def test_zero_parameters_halve_previous_state():
    params = constant_params(3, 0.0)
    p_prev = np.array([0.8, 0.4, -0.2])
    prob, state = gru_step(np.ones(3), p_prev, p_prev, params)
    # z = y = 0.5, candidate = tanh(0) = 0, so the state halves.
    assert np.allclose(state.p.data, 0.5 * p_prev, atol=1e-15)
    assert prob.item() == 0.5


def test_scalar_hand_evaluation():
    params = constant_params(1, 0.1)
    prob, state = gru_step(np.array([1.0]), np.array([1.0]), np.array([1.0]), params)
    z = 1 / (1 + math.exp(-0.3))
    y = z
    cand = math.tanh(0.1 + y * 0.1 + 0.1)
    p_new = z * 1.0 + (1 - z) * cand
    expect_prob = 1 / (1 + math.exp(-(0.1 * p_new + 0.1)))
    assert state.p.data[0] == pytest.approx(p_new, abs=1e-12)
    assert prob.item() == pytest.approx(expect_prob, abs=1e-12)


def test_output_ranges():
    rng = np.random.default_rng(0)
    params = init_gru_params(rng, 5)
    state = initial_state(rng.integers(0, 2, 5).astype(float))
    for _ in range(20):
        prob, state = gru_step(rng.normal(size=5) * 10, state.h, state.p, params)
        assert -1 < state.p.data.min() and state.p.data.max() < 1
        assert 0 < prob.item() < 1


def test_gru_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    params = init_gru_params(rng, 3)
    embs = rng.integers(0, 2, size=(4, 3)).astype(float)

    def loss():
        probs = trace_probs(embs, params)
        return ad.tsum(ad.concat([ad.reshape(p, (1,)) for p in probs], axis=-1))

    assert gradcheck(loss, params.tensors()) <= 1e-4


def test_fare_suffix_sum():
    assert fare_suffix_sum([1.0, 2.0, 3.0]).tolist() == [6.0, 5.0, 3.0]
    assert fare_suffix_sum(np.zeros(4)).tolist() == [0.0] * 4
    fares = np.random.default_rng(2).uniform(0, 5, 10)
    s = fare_suffix_sum(fares)
    assert s[0] == pytest.approx(fares.sum())
    assert np.allclose(s[:-1] - s[1:], fares[:-1])
    assert (np.diff(s) <= 1e-12).all()  # non-increasing for non-negative fares


def test_dynamic_reward_examples():
    assert dynamic_reward(0.8, 123.0, 0.5, 1.0) == pytest.approx(0.8)
    assert dynamic_reward(0.3, 0.0, 2.0, 0.0) == pytest.approx(0.5)
    # alpha = 0.65, sigmoid term 0.6: 0.65*0.8 + 0.35*0.6 = 0.73
    fare_to_go = math.log(0.6 / 0.4)
    assert dynamic_reward(0.8, fare_to_go, 1.0, 0.65) == pytest.approx(0.73)


def test_dynamic_reward_alpha_validation():
    with pytest.raises(ValueError):
        dynamic_reward(0.5, 1.0, 1.0, 1.2)
    with pytest.raises(ValueError):
        reward_trace([0.5], [1.0], 1.0, -0.1)


def test_reward_monotone_in_both_terms():
    base = dynamic_reward(0.5, 2.0, 0.7, 0.65)
    assert dynamic_reward(0.6, 2.0, 0.7, 0.65) > base
    assert dynamic_reward(0.5, 2.5, 0.7, 0.65) > base


def test_reward_trace_in_unit_interval():
    probs = np.random.default_rng(3).uniform(0.01, 0.99, 8)
    fares = np.random.default_rng(4).uniform(0, 3, 8)
    r = reward_trace(probs, fares, 0.5, 0.65)
    assert ((r > 0) & (r < 1)).all()


def test_bce_loss_at_separated_predictions():
    probs = Tensor(np.array([1.0 - 1e-7, 1e-7]))
    labels = Tensor(np.array([1.0, 0.0]))
    loss = ad.tmean(bce_loss(probs, labels))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)
    # Literal mode ignores negatives entirely.
    lit = bce_loss(Tensor(np.array([0.5, 1e-7])), labels, literal=True)
    assert lit.data[1] == 0.0


def test_calibrate_fare_weight():
    w = calibrate_fare_weight([2.0, 4.0, 6.0])
    assert w == pytest.approx(math.log(3.0) / 4.0)
    assert calibrate_fare_weight([0.0, 0.0]) == 1.0


def test_auc_score_basics():
    assert auc_score(np.array([True, True, False, False]), np.array([0.9, 0.8, 0.2, 0.1])) == 1.0
    assert auc_score(np.array([True, False]), np.array([0.3, 0.7])) == 0.0
    assert auc_score(np.array([True, False]), np.array([0.5, 0.5])) == 0.5
    with pytest.raises(ValueError):
        auc_score(np.array([True, True]), np.array([0.1, 0.2]))


def _two_driver_corpus(n_segments=30, length=12, seed=5):
    """Driver A roams one area, driver B another, far apart."""
    rng = np.random.default_rng(seed)
    segments = []
    for driver, (lat0, lon0) in (("a", (40.02, -73.99)), ("b", (40.08, -73.90))):
        for _ in range(n_segments):
            lat, lon = lat0, lon0
            embs = []
            for _ in range(length):
                lat += rng.normal(0, 0.002)
                lon += rng.normal(0, 0.002)
                embs.append(location_embedding(GeoPoint(lat, lon), 8))
            segments.append((driver, np.stack(embs)))
    return segments


def test_single_driver_corpus_rejected():
    segs = [(d, s) for d, s in _two_driver_corpus(4) if d == "a"]
    with pytest.raises(ValueError):
        build_contrastive_batch(segs, 4, np.random.default_rng(0))


def test_pretraining_learns_two_driver_separation():
    segments = _two_driver_corpus()
    train, held = segments[::2], segments[1::2]
    rng = np.random.default_rng(6)
    params = init_gru_params(rng, 40)
    opt = Adam(params.tensors(), lr=3e-3)
    losses = pretrain_behavior(train, params, opt, epochs=40, window=8, seed=1)
    assert losses[-1] < losses[0]
    auc = behavior_auc(held, params, seed=2, window=8)
    assert auc > 0.75


def test_shuffled_labels_no_signal():
    segments = _two_driver_corpus(n_segments=20)
    rng = np.random.default_rng(7)
    params = init_gru_params(rng, 40)
    opt = Adam(params.tensors(), lr=3e-3)
    pretrain_behavior(segments[::2], params, opt, epochs=15, window=8, seed=1, shuffle_labels=True)
    auc = behavior_auc(segments[1::2], params, seed=2, window=8)
    assert 0.3 < auc < 0.7


def test_contrastive_batch_shapes_and_balance():
    segments = _two_driver_corpus(n_segments=10)
    anchors, bodies, labels = build_contrastive_batch(segments, 6, np.random.default_rng(8))
    n = len(labels)
    assert anchors.shape == (n, 40)
    assert bodies.shape == (6, n, 40)
    assert labels.sum() == n / 2


def test_score_segment_deterministic():
    segments = _two_driver_corpus(n_segments=2)
    params = init_gru_params(np.random.default_rng(9), 40)
    s1 = score_segment(segments[0][1], params)
    s2 = score_segment(segments[0][1], params)
    assert s1 == s2
    assert 0 < s1 < 1
