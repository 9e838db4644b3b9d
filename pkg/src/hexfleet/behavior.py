"""Driver-behavior probability model and dynamic rewards.

A gated recurrent cell scores how plausibly a trajectory continues from an
anchor point (the first sample, which seeds the recurrent state). Positive
training samples are intact windows of one driver's trajectory; negatives
keep the anchor but splice in another driver's movement, so the shared
parameters learn driver-consistency rather than per-driver identities.

The per-step reward blends that probability with a squashed suffix sum of
future fares: r_t = alpha * p_t + (1 - alpha) * sigmoid(w_fare * fares_to_go).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-7


@dataclass
class GruParams:
    """Gate/candidate matrices (d x d), biases (d,), and the scalar read-out."""

    w_zx: Tensor
    w_zp: Tensor
    w_yx: Tensor
    w_yp: Tensor
    w_xc: Tensor
    w_pc: Tensor
    b_z: Tensor
    b_y: Tensor
    b_c: Tensor
    w_out: Tensor
    b_out: Tensor

    @property
    def dim(self) -> int:
        return self.w_zx.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f"gru/{k}": getattr(self, k) for k in
                ("w_zx", "w_zp", "w_yx", "w_yp", "w_xc", "w_pc", "b_z", "b_y", "b_c", "w_out", "b_out")}


def init_gru_params(rng: np.random.Generator, dim: int, scale: float = 0.25) -> GruParams:
    def mat():
        return Tensor(rng.normal(0.0, scale / math.sqrt(dim), size=(dim, dim)), requires_grad=True)

    def vec():
        return Tensor(np.zeros(dim), requires_grad=True)

    return GruParams(
        w_zx=mat(), w_zp=mat(), w_yx=mat(), w_yp=mat(), w_xc=mat(), w_pc=mat(),
        b_z=vec(), b_y=vec(), b_c=vec(),
        w_out=Tensor(rng.normal(0.0, scale / math.sqrt(dim), size=dim), requires_grad=True),
        b_out=Tensor(np.float64(0.0), requires_grad=True),
    )


def gru_params_from_arrays(params: dict[str, np.ndarray], trainable: bool = False) -> GruParams:
    names = ("w_zx", "w_zp", "w_yx", "w_yp", "w_xc", "w_pc", "b_z", "b_y", "b_c", "w_out", "b_out")
    return GruParams(**{k: Tensor(params[f"gru/{k}"], requires_grad=trainable) for k in names})


@dataclass
class GruState:
    """Recurrent state: the gate input h and probability vector p coincide
    after each update; both start from the anchor's location embedding."""

    h: Tensor
    p: Tensor


def initial_state(anchor_emb) -> GruState:
    t = anchor_emb if isinstance(anchor_emb, Tensor) else Tensor(anchor_emb)
    return GruState(h=t, p=t)


def gru_step(emb_t, h_prev, p_prev, params: GruParams) -> tuple[Tensor, GruState]:
    """One gated update; returns the scalar probability and the new state.

    Accepts a single embedding (d,) or a batch (n, d).
    """
    x = emb_t if isinstance(emb_t, Tensor) else Tensor(emb_t)
    h = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    p = p_prev if isinstance(p_prev, Tensor) else Tensor(p_prev)
    z = ad.sigmoid(ad.matmul(x, params.w_zx) + ad.matmul(h, params.w_zp) + params.b_z)
    y = ad.sigmoid(ad.matmul(x, params.w_yx) + ad.matmul(h, params.w_yp) + params.b_y)
    cand = ad.tanh(ad.matmul(x, params.w_xc) + ad.mul(y, ad.matmul(p, params.w_pc)) + params.b_c)
    p_new = ad.add(ad.mul(z, p), ad.mul(1.0 - z, cand))
    prob = ad.sigmoid(ad.matmul(p_new, params.w_out) + params.b_out)
    return prob, GruState(h=p_new, p=p_new)


def trace_probs(embs, params: GruParams) -> list[Tensor]:
    """Scalar probabilities for steps 1..T-1; the first sample is the anchor."""
    embs = np.asarray(embs, dtype=np.float64)
    if embs.ndim != 2 or len(embs) < 2:
        raise ValueError(f"need a (T, d) embedding sequence with T >= 2, got {embs.shape}")
    state = initial_state(embs[0])
    probs = []
    for t in range(1, len(embs)):
        prob, state = gru_step(embs[t], state.h, state.p, params)
        probs.append(prob)
    return probs


def score_segment(embs, params: GruParams, anchor=None) -> float:
    """Mean step probability of a segment, optionally re-anchored."""
    embs = np.asarray(embs, dtype=np.float64)
    with ad.no_grad():
        if anchor is None:
            probs = trace_probs(embs, params)
        else:
            state = initial_state(np.asarray(anchor, dtype=np.float64))
            probs = []
            for t in range(len(embs)):
                prob, state = gru_step(embs[t], state.h, state.p, params)
                probs.append(prob)
        return float(np.mean([p.item() for p in probs]))


# -- contrastive pretraining ---------------------------------------------------


def _window(rng, seg: np.ndarray, length: int) -> np.ndarray:
    start = int(rng.integers(0, len(seg) - length + 1))
    return seg[start : start + length]


def effective_window(segments: list[tuple[str, np.ndarray]], window: int) -> int:
    """Largest usable window <= the requested one: at least two distinct
    drivers must have a segment long enough for an intact positive."""
    best_per_driver: dict[str, int] = {}
    for d, s in segments:
        best_per_driver[d] = max(best_per_driver.get(d, 0), len(s))
    if len(best_per_driver) < 2:
        raise ValueError("contrastive pretraining needs at least 2 distinct drivers (no negatives available)")
    cap = sorted(best_per_driver.values())[-2] - 1
    if cap < 2:
        raise ValueError("segments too short for contrastive windows (need length >= 3 from two drivers)")
    return min(window, cap)


def build_contrastive_batch(
    segments: list[tuple[str, np.ndarray]],
    window: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(anchors (n,d), bodies (window, n, d), labels (n,)) with a 1:1 ratio.

    A positive keeps a window intact; its paired negative reuses the anchor
    point but takes the body from a different driver. The window shrinks to
    what the corpus supports.
    """
    window = effective_window(segments, window)
    drivers = sorted({d for d, _ in segments})
    by_driver = {d: [s for dd, s in segments if dd == d] for d in drivers}
    usable = [(d, s) for d, s in segments if len(s) >= window + 1]
    if not usable:
        raise ValueError(f"no segment long enough for window {window}")

    anchors, bodies, labels = [], [], []
    for driver, seg in usable:
        win = _window(rng, seg, window + 1)
        anchors.append(win[0])
        bodies.append(win[1:])
        labels.append(1.0)
        candidates = [s for d in drivers if d != driver for s in by_driver[d] if len(s) >= window]
        if not candidates:
            raise ValueError(f"no other-driver segment long enough for window {window}")
        neg_seg = candidates[int(rng.integers(0, len(candidates)))]
        anchors.append(win[0])
        bodies.append(_window(rng, neg_seg, window))
        labels.append(0.0)
    return (
        np.stack(anchors),
        np.stack(bodies, axis=1),  # (window, n, d)
        np.asarray(labels),
    )


def bce_loss(prob: Tensor, labels: Tensor, literal: bool = False) -> Tensor:
    """Per-sample cross-entropy terms (probabilities clamped inside the logs).

    literal=True keeps only the positive-sample log-probability term (which
    gives negatives zero gradient); retained for comparison runs.
    """
    prob = ad.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    pos_term = ad.mul(labels, ad.log(prob))
    if literal:
        return ad.mul(pos_term, -1.0)
    neg_term = ad.mul(1.0 - labels, ad.log(1.0 - prob))
    return ad.mul(ad.add(pos_term, neg_term), -1.0)


def contrastive_loss(anchors, bodies, labels, params: GruParams, literal: bool = False) -> Tensor:
    """Mean binary cross-entropy over all steps of all samples."""
    state = initial_state(anchors)
    labels_t = Tensor(labels)
    step_losses = []
    for t in range(bodies.shape[0]):
        prob, state = gru_step(bodies[t], state.h, state.p, params)
        step_losses.append(bce_loss(prob, labels_t, literal=literal))
    return ad.tmean(ad.concat(step_losses, axis=-1))


def pretrain_behavior(
    segments: list[tuple[str, np.ndarray]],
    params: GruParams,
    optimizer: ad.Adam,
    epochs: int,
    window: int,
    seed: int,
    literal: bool = False,
    shuffle_labels: bool = False,
) -> list[float]:
    """Train the behavior model; returns the per-epoch loss history."""
    history = []
    for epoch in range(epochs):
        rng = np.random.default_rng((seed, epoch))
        anchors, bodies, labels = build_contrastive_batch(segments, window, rng)
        if shuffle_labels:
            rng.shuffle(labels)
        optimizer.zero_grad()
        loss = contrastive_loss(anchors, bodies, labels, params, literal=literal)
        ad.backward(loss)
        optimizer.step()
        history.append(loss.item())
    return history


def behavior_auc(
    segments: list[tuple[str, np.ndarray]],
    params: GruParams,
    seed: int,
    window: int,
) -> float:
    """Held-out AUC: intact windows (positives) vs cross-driver splices."""
    rng = np.random.default_rng(seed)
    anchors, bodies, labels = build_contrastive_batch(segments, window, rng)
    with ad.no_grad():
        state = initial_state(anchors)
        acc = np.zeros(len(labels))
        for t in range(bodies.shape[0]):
            prob, state = gru_step(bodies[t], state.h, state.p, params)
            acc += prob.data
    scores = acc / bodies.shape[0]
    return auc_score(labels > 0.5, scores)


def auc_score(is_positive: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC with midranks for ties."""
    is_positive = np.asarray(is_positive, dtype=bool)
    n_pos = int(is_positive.sum())
    n_neg = int((~is_positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    pos_rank_sum = ranks[is_positive].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


# -- dynamic reward -------------------------------------------------------------


def fare_suffix_sum(fares) -> np.ndarray:
    """fares-to-go per step: suffix sums, so the first entry is the episode total."""
    fares = np.asarray(fares, dtype=np.float64)
    return np.cumsum(fares[::-1])[::-1]


def dynamic_reward(p_t: float, fare_to_go: float, w_fare: float, alpha: float) -> float:
    """alpha-weighted blend of behavior probability and squashed fares-to-go."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return alpha * p_t + (1.0 - alpha) * _sigmoid(w_fare * fare_to_go)


def reward_trace(probs, fares, w_fare: float, alpha: float) -> np.ndarray:
    """Per-step rewards for a segment; probs and fares must be step-aligned."""
    probs = np.asarray(probs, dtype=np.float64)
    to_go = fare_suffix_sum(fares)
    if probs.shape != to_go.shape:
        raise ValueError(f"probs {probs.shape} misaligned with fares {to_go.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return alpha * probs + (1.0 - alpha) * _sigmoid(w_fare * to_go)


def calibrate_fare_weight(fare_suffix_samples) -> float:
    """Scale so the median positive fares-to-go squashes to about 0.75."""
    samples = np.asarray(fare_suffix_samples, dtype=np.float64)
    positive = samples[samples > 0]
    if positive.size == 0:
        return 1.0
    return math.log(3.0) / float(np.median(positive))


def _sigmoid(x):
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))) + 0.0
