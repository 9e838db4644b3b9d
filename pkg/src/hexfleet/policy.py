"""Transformer-decoder dispatch policy and its angular loss.

Two stacked decoder blocks per step: the first attends the previous action
token against the reward token, the second attends that output against the
state token. Attention is single-head with GeLU-activated projections and no
residual path. Each step's projected keys/values are cached per episode so
step t attends causally over steps 1..t (`mode="step"` restores the
degenerate single-token reading).

The loss is squared angular error with 360-degree wraparound correction plus
squared normalized-distance error, in mixed (degrees^2, unitless^2) units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geo import GeoPoint


@dataclass(frozen=True)
class Action:
    """Normalized displacement (fraction of the dispatch radius) and heading."""

    dis_norm: float
    deg: float

    def __post_init__(self):
        if not 0.0 <= self.dis_norm <= 1.0:
            raise ValueError(f"dis_norm {self.dis_norm} outside [0, 1]")
        if not 0.0 <= self.deg < 360.0:
            raise ValueError(f"deg {self.deg} outside [0, 360)")

    def km(self, r_max_km: float) -> float:
        return self.dis_norm * r_max_km


@dataclass
class AttnLayer:
    w_x: Tensor
    w_y: Tensor
    w_z: Tensor


@dataclass
class DecoderParams:
    d_model: int
    k: int
    d_state: int
    proj_reward_w: Tensor
    proj_reward_b: Tensor
    proj_state_w: Tensor
    proj_state_b: Tensor
    proj_action_w: Tensor
    proj_action_b: Tensor
    reward_stack: list[AttnLayer]
    state_stack: list[AttnLayer]
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        out = {
            "policy/proj_reward/w": self.proj_reward_w,
            "policy/proj_reward/b": self.proj_reward_b,
            "policy/proj_state/w": self.proj_state_w,
            "policy/proj_state/b": self.proj_state_b,
            "policy/proj_action/w": self.proj_action_w,
            "policy/proj_action/b": self.proj_action_b,
            "policy/head/w1": self.head_w1,
            "policy/head/b1": self.head_b1,
            "policy/head/w2": self.head_w2,
            "policy/head/b2": self.head_b2,
        }
        for name, stack in (("reward", self.reward_stack), ("state", self.state_stack)):
            for l, layer in enumerate(stack):
                out[f"policy/{name}{l}/w_x"] = layer.w_x
                out[f"policy/{name}{l}/w_y"] = layer.w_y
                out[f"policy/{name}{l}/w_z"] = layer.w_z
        return out


def init_decoder_params(rng: np.random.Generator, d_model: int, k: int, d_state: int) -> DecoderParams:
    if k < 1:
        raise ValueError(f"decoder depth k must be >= 1, got {k}")

    def mat(n_in, n_out):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)

    def vec(n):
        return Tensor(np.zeros(n), requires_grad=True)

    def stack():
        return [AttnLayer(mat(d_model, d_model), mat(d_model, d_model), mat(d_model, d_model)) for _ in range(k)]

    return DecoderParams(
        d_model=d_model,
        k=k,
        d_state=d_state,
        proj_reward_w=mat(1, d_model),
        proj_reward_b=vec(d_model),
        proj_state_w=mat(d_state, d_model),
        proj_state_b=vec(d_model),
        proj_action_w=mat(d_model, d_model),
        proj_action_b=vec(d_model),
        reward_stack=stack(),
        state_stack=stack(),
        head_w1=mat(d_model, d_model),
        head_b1=vec(d_model),
        head_w2=mat(d_model, 2),
        head_b2=vec(2),
    )


def decoder_params_from_arrays(params: dict[str, np.ndarray], trainable: bool = False) -> DecoderParams:
    def t(name):
        return Tensor(params[name], trainable)

    k = 0
    while f"policy/reward{k}/w_x" in params:
        k += 1
    d_model = params["policy/proj_reward/w"].shape[1]
    d_state = params["policy/proj_state/w"].shape[0]
    return DecoderParams(
        d_model=d_model,
        k=k,
        d_state=d_state,
        proj_reward_w=t("policy/proj_reward/w"),
        proj_reward_b=t("policy/proj_reward/b"),
        proj_state_w=t("policy/proj_state/w"),
        proj_state_b=t("policy/proj_state/b"),
        proj_action_w=t("policy/proj_action/w"),
        proj_action_b=t("policy/proj_action/b"),
        reward_stack=[
            AttnLayer(t(f"policy/reward{l}/w_x"), t(f"policy/reward{l}/w_y"), t(f"policy/reward{l}/w_z"))
            for l in range(k)
        ],
        state_stack=[
            AttnLayer(t(f"policy/state{l}/w_x"), t(f"policy/state{l}/w_y"), t(f"policy/state{l}/w_z"))
            for l in range(k)
        ],
        head_w1=t("policy/head/w1"),
        head_b1=t("policy/head/b1"),
        head_w2=t("policy/head/w2"),
        head_b2=t("policy/head/b2"),
    )


def positional_embedding(t: int, d_model: int) -> np.ndarray:
    """Sinusoidal table row for step t (1-based); entries in [-1, 1]."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    pos = np.zeros(d_model)
    for i in range(0, d_model, 2):
        angle = t / 10000.0 ** (i / d_model)
        pos[i] = math.sin(angle)
        if i + 1 < d_model:
            pos[i + 1] = math.cos(angle)
    return pos


def attention(x, y, z, w_x, w_y, w_z) -> Tensor:
    """softmax(gelu(x Wx) gelu(y Wy)^T / sqrt(d)) gelu(z Wz), single head."""
    q = ad.gelu(ad.matmul(x, w_x))
    k = ad.gelu(ad.matmul(y, w_y))
    v = ad.gelu(ad.matmul(z, w_z))
    scale = 1.0 / math.sqrt(k.shape[-1])
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), scale)
    return ad.matmul(ad.softmax(scores), v)


def decoder_layer(x_tokens, y_tokens, t: int, layer: AttnLayer) -> Tensor:
    """One layer over full token matrices: Attention(x+pos, x+pos, y+pos)."""
    x = x_tokens if isinstance(x_tokens, Tensor) else Tensor(x_tokens)
    y = y_tokens if isinstance(y_tokens, Tensor) else Tensor(y_tokens)
    pos = Tensor(positional_embedding(t, x.shape[-1]))
    xq = ad.add(x, pos)
    return attention(xq, xq, ad.add(y, pos), layer.w_x, layer.w_y, layer.w_z)


class EpisodeContext:
    """Per-episode causal caches: projected keys/values per stack and layer,
    the previous action-probability token, and the step counter."""

    def __init__(self, params: DecoderParams):
        self.d_model = params.d_model
        self.t = 0
        self.keys = {"reward": [[] for _ in range(params.k)], "state": [[] for _ in range(params.k)]}
        self.values = {"reward": [[] for _ in range(params.k)], "state": [[] for _ in range(params.k)]}
        self.last_p = Tensor(np.zeros(params.d_model))  # P_{a_0} = 0

    def __len__(self):
        return self.t


def _run_stack(
    name: str,
    x: Tensor,
    y: Tensor,
    pos: Tensor,
    stack: list[AttnLayer],
    ctx: EpisodeContext,
    mode: str,
) -> Tensor:
    scale = 1.0 / math.sqrt(x.shape[-1])
    for l, layer in enumerate(stack):
        xq = ad.add(x, pos)
        yv = ad.add(y, pos)
        q = ad.gelu(ad.matmul(xq, layer.w_x))
        k_new = ad.gelu(ad.matmul(xq, layer.w_y))
        v_new = ad.gelu(ad.matmul(yv, layer.w_z))
        if mode == "sequence":
            ctx.keys[name][l].append(k_new)
            ctx.values[name][l].append(v_new)
            keys = ad.concat(ctx.keys[name][l], axis=0) if len(ctx.keys[name][l]) > 1 else k_new
            vals = ad.concat(ctx.values[name][l], axis=0) if len(ctx.values[name][l]) > 1 else v_new
        else:
            keys, vals = k_new, v_new
        scores = ad.mul(ad.matmul(q, ad.transpose(keys)), scale)
        x = ad.matmul(ad.softmax(scores), vals)
    return x


def policy_step(
    r_t: float,
    s_t,
    p_prev: Tensor | None,
    ctx: EpisodeContext,
    params: DecoderParams,
    mode: str = "sequence",
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Advance one step; returns the action-probability token P_{a_t}.

    The context must be at step t-1; its caches and last_p are updated.
    """
    if mode not in ("sequence", "step"):
        raise ValueError(f"unknown context mode {mode!r}")
    t = ctx.t + 1
    if p_prev is None:
        p_prev = ctx.last_p
    pos = Tensor(positional_embedding(t, params.d_model))
    s = s_t if isinstance(s_t, Tensor) else Tensor(np.asarray(s_t, dtype=np.float64))
    if s.shape != (params.d_state,):
        raise ad.ShapeError("policy_step state", s.shape, (params.d_state,))

    r_tok = ad.reshape(ad.add(ad.matmul(Tensor(np.array([float(r_t)])), params.proj_reward_w), params.proj_reward_b), (1, -1))
    s_tok = ad.reshape(ad.add(ad.matmul(s, params.proj_state_w), params.proj_state_b), (1, -1))
    a_tok = ad.reshape(ad.add(ad.matmul(p_prev, params.proj_action_w), params.proj_action_b), (1, -1))

    emb_r = _run_stack("reward", a_tok, r_tok, pos, params.reward_stack, ctx, mode)
    if training and dropout_rate > 0:
        emb_r = ad.dropout(emb_r, dropout_rate, rng, training=True)
    out = _run_stack("state", emb_r, s_tok, pos, params.state_stack, ctx, mode)
    if training and dropout_rate > 0:
        out = ad.dropout(out, dropout_rate, rng, training=True)

    p_a = ad.reshape(out, (-1,))
    ctx.t = t
    ctx.last_p = p_a
    return p_a


def action_head(p_a: Tensor, params: DecoderParams) -> tuple[Tensor, Tensor]:
    """Two-layer perceptron to (dis_norm, deg) tensors, squashed into range."""
    h = ad.gelu(ad.add(ad.matmul(p_a, params.head_w1), params.head_b1))
    out = ad.add(ad.matmul(h, params.head_w2), params.head_b2)
    dis = ad.sigmoid(ad.element(out, 0))
    deg = ad.mul(ad.sigmoid(ad.element(out, 1)), 360.0)
    return dis, deg


def action_from_tensors(dis: Tensor, deg: Tensor) -> Action:
    d = float(deg.data)
    return Action(float(dis.data), 0.0 if d >= 360.0 else d)


def geo_loss(pred: Action, truth: Action, mode: str = "symmetric", angle_weight: float = 1.0) -> float:
    """Wraparound-corrected squared heading error plus squared distance error.

    literal mode applies only the +360 correction, exactly as the training
    objective is written; symmetric mode (default) corrects both directions.
    """
    ang2 = min((pred.deg + (off - truth.deg)) ** 2 for off in _wrap_offsets(mode))
    return angle_weight * ang2 + (pred.dis_norm - truth.dis_norm) ** 2


def _wrap_offsets(mode: str) -> tuple[float, ...]:
    if mode == "literal":
        return (0.0, 360.0)
    if mode == "symmetric":
        return (0.0, 360.0, -360.0)
    raise ValueError(f"unknown geo_loss mode {mode!r}")


def geo_loss_tensors(dis: Tensor, deg: Tensor, truth: Action, mode: str = "symmetric", angle_weight: float = 1.0) -> Tensor:
    """Differentiable loss; the wraparound branch is chosen by value."""
    delta = float(deg.data) - truth.deg
    best = min(_wrap_offsets(mode), key=lambda off: (delta + off) ** 2)
    ang2 = ad.square(ad.add(deg, best - truth.deg))
    dis2 = ad.square(ad.add(dis, -truth.dis_norm))
    return ad.add(ad.mul(ang2, angle_weight), dis2)


# -- supervised training -----------------------------------------------------


@dataclass
class DispatchEpisode:
    """One (state, reward, action) sequence plus step origins for the km metric."""

    states: np.ndarray  # (T, d_state)
    rewards: np.ndarray  # (T,)
    actions: list[Action]  # length T
    origins: list[GeoPoint]  # position at each step
    start_time: float = 0.0

    def __len__(self):
        return len(self.actions)


@dataclass
class TrainConfig:
    epochs: int = 10
    geo_loss_mode: str = "symmetric"
    angle_weight: float = 1.0
    dropout: float = 0.5
    context_mode: str = "sequence"
    seed: int = 0


def episode_loss(ep: DispatchEpisode, params: DecoderParams, cfg: TrainConfig, rng=None, training=False) -> Tensor:
    ctx = EpisodeContext(params)
    losses = []
    for t in range(len(ep)):
        p_a = policy_step(
            ep.rewards[t], ep.states[t], None, ctx, params,
            mode=cfg.context_mode, dropout_rate=cfg.dropout, rng=rng, training=training,
        )
        dis, deg = action_head(p_a, params)
        losses.append(ad.reshape(geo_loss_tensors(dis, deg, ep.actions[t], cfg.geo_loss_mode, cfg.angle_weight), (1,)))
    return ad.tmean(ad.concat(losses, axis=-1))


def predict_episode(ep: DispatchEpisode, params: DecoderParams, cfg: TrainConfig) -> list[Action]:
    """Deterministic greedy actions along an episode's (r, s) stream."""
    ctx = EpisodeContext(params)
    out = []
    with ad.no_grad():
        for t in range(len(ep)):
            p_a = policy_step(ep.rewards[t], ep.states[t], None, ctx, params, mode=cfg.context_mode)
            out.append(action_from_tensors(*action_head(p_a, params)))
    return out


def predict_action(ctx: EpisodeContext, r_t: float, s_t, params: DecoderParams, mode: str = "sequence") -> Action:
    """One greedy inference step (the online dispatch path)."""
    with ad.no_grad():
        p_a = policy_step(r_t, s_t, None, ctx, params, mode=mode)
        return action_from_tensors(*action_head(p_a, params))


def validation_error_km(episodes, params: DecoderParams, cfg: TrainConfig, error_fn) -> float:
    errs = []
    for ep in episodes:
        preds = predict_episode(ep, params, cfg)
        for pred, truth, origin in zip(preds, ep.actions, ep.origins):
            errs.append(error_fn(pred, truth, origin))
    return float(np.mean(errs)) if errs else float("nan")


def train_policy(
    train_eps: list[DispatchEpisode],
    val_eps: list[DispatchEpisode],
    params: DecoderParams,
    optimizer: ad.Adam,
    cfg: TrainConfig,
    error_fn,
    log=None,
) -> list[dict]:
    """Adam on the per-step angular loss over each episode; returns history rows
    of (epoch, train_loss, val_error_km)."""
    if not train_eps:
        raise ValueError("empty training dataset")
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng((cfg.seed, epoch))
        order = order_rng.permutation(len(train_eps))
        epoch_losses = []
        for si in order:
            rng = np.random.default_rng((cfg.seed, epoch, int(si)))
            optimizer.zero_grad()
            loss = episode_loss(train_eps[si], params, cfg, rng=rng, training=True)
            ad.backward(loss)
            optimizer.step()
            epoch_losses.append(loss.item())
            step += 1
        val_err = validation_error_km(val_eps, params, cfg, error_fn) if val_eps else float("nan")
        row = {"epoch": epoch, "step": step, "train_loss": float(np.mean(epoch_losses)), "val_error_km": val_err}
        history.append(row)
        if log is not None:
            log(row)
    return history
