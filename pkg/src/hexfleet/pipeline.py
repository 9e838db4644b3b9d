"""Data preprocessing, two-stage training, inference, sweeps, and run outputs.

Stage 1 pretrains the behavior model on empty-status windows, fits feature
normalization statistics, initializes the per-view graph projections, and
calibrates the fare squash weight. Stage 2 turns full-trajectory segments
into (state, reward, action) episodes and trains the dispatch policy on the
angular loss. Inference replays the trained policy in a live world, scoring
each prediction against the driver's own intent.

Every run directory gets a manifest (config hash, seed, version) sufficient
to reproduce it.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Adam, Tensor
from .behavior import (
    GruParams,
    behavior_auc,
    calibrate_fare_weight,
    fare_suffix_sum,
    gru_params_from_arrays,
    gru_step,
    init_gru_params,
    initial_state,
    pretrain_behavior,
    reward_trace,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_hash, config_text
from .geo import GeoPoint, azimuth_deg, haversine_km, location_embedding
from .hexgraph import (
    FeatureNormalizer,
    GridSet,
    HopVisibility,
    ViewSpec,
    compute_features,
    empty_cell_features,
    hop_delays,
    sample_edge_delays,
    save_grid,
)
from .policy import (
    Action,
    DispatchEpisode,
    EpisodeContext,
    TrainConfig,
    attention,
    action_head,
    decoder_layer,
    decoder_params_from_arrays,
    geo_loss_tensors,
    init_decoder_params,
    policy_step,
    predict_action,
    train_policy,
)
from .represent import gcn_params_from_arrays, init_gcn_params
from .sim import (
    SimParams,
    World,
    cache_cell_counts,
    empty_loaded_rate,
    error_metric,
    generate_city,
    greedy_assign,
    intent_action,
    intent_provider,
    order_acceptance_rate,
    ratio_sweep,
    step,
)

log = logging.getLogger(__name__)

LEVELS = ("micro", "meso", "macro")
CHECKPOINT_VERSION = 1.0
CSV_HEADER = ["vehicle_id", "timestamp_s", "lat", "lon", "status", "fare"]


# -- trajectory records ---------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: str
    timestamp_s: int
    lat: float
    lon: float
    status: int  # 0 empty, 1 occupied
    fare: float  # booked at the drop-off row, else 0

    def point(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)


@dataclass
class Segment:
    vehicle_id: str
    records: list[TrajectoryRecord]

    def __post_init__(self):
        if len(self.records) < 2:
            raise ValueError("segment needs at least 2 records")

    def __len__(self):
        return len(self.records)

    @property
    def start_time(self) -> int:
        return self.records[0].timestamp_s


def save_trajectories(path, records: list[TrajectoryRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.vehicle_id, r.timestamp_s, repr(r.lat), repr(r.lon), r.status, repr(r.fare)])


def load_trajectories(path) -> dict[str, list[TrajectoryRecord]]:
    """Validated, per-vehicle time-ordered records, grouped by vehicle."""
    out: dict[str, list[TrajectoryRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            log.warning("%s: empty trajectory file", path)
            return {}
        if header != CSV_HEADER:
            raise ValueError(f"{path}:1: bad header {header!r}, expected {CSV_HEADER}")
        for lineno, rowvals in enumerate(reader, start=2):
            if not rowvals:
                continue
            if len(rowvals) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(rowvals)}")
            vid, ts, lat, lon, status, fare = rowvals
            try:
                rec = TrajectoryRecord(vid, int(ts), float(lat), float(lon), int(status), float(fare))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from None
            if not -90 <= rec.lat <= 90 or not -180 <= rec.lon <= 180:
                raise ValueError(f"{path}:{lineno}: coordinate out of range ({rec.lat}, {rec.lon})")
            if rec.status not in (0, 1):
                raise ValueError(f"{path}:{lineno}: status must be 0 or 1, got {rec.status}")
            bucket = out.setdefault(vid, [])
            if bucket and rec.timestamp_s <= bucket[-1].timestamp_s:
                raise ValueError(
                    f"{path}:{lineno}: non-monotone timestamp {rec.timestamp_s} for vehicle {vid}"
                )
            bucket.append(rec)
    if not out:
        log.warning("%s: no records", path)
    return out


# -- preprocessing --------------------------------------------------------------


def speed_filter(records: list[TrajectoryRecord], limit_kmh=60.0) -> list[TrajectoryRecord]:
    """Drop points whose implied average speed strictly exceeds 1.2x the limit.

    After a drop, the next point is checked against the last kept one.
    `limit_kmh` may be a number or a callable of the earlier point.
    """
    if not records:
        return []
    kept = [records[0]]
    for rec in records[1:]:
        prev = kept[-1]
        dt_h = (rec.timestamp_s - prev.timestamp_s) / 3600.0
        limit = limit_kmh(prev.point()) if callable(limit_kmh) else limit_kmh
        if dt_h <= 0:
            continue
        speed = haversine_km(prev.point(), rec.point()) / dt_h
        if speed > 1.2 * limit:
            continue
        kept.append(rec)
    return kept


def segment_trajectories(
    trajectories: list[tuple[str, list[TrajectoryRecord]]],
    leng: int,
    n_samples: int,
    seed,
) -> list[Segment]:
    """Random contiguous windows with lengths uniform in [2, min(leng, traj)]."""
    if leng < 2:
        raise ValueError(f"leng must be >= 2, got {leng}")
    eligible = [(vid, recs) for vid, recs in trajectories if len(recs) >= 2]
    skipped = len(trajectories) - len(eligible)
    if skipped:
        log.warning("segmenting: skipped %d trajectories shorter than 2 points", skipped)
    if not eligible:
        return []
    rng = np.random.default_rng(seed)
    segments = []
    for _ in range(n_samples):
        vid, recs = eligible[int(rng.integers(0, len(eligible)))]
        max_len = min(leng, len(recs))
        length = int(rng.integers(2, max_len + 1))
        start = int(rng.integers(0, len(recs) - length + 1))
        segments.append(Segment(vid, recs[start : start + length]))
    return segments


def chronological_split(segments: list[Segment], train_frac=0.6, val_frac=0.3):
    """Sort by start time and cut train/val/test by count; remainders go to test."""
    if len(segments) < 10:
        raise ConfigError(f"need at least 10 segments to split, got {len(segments)}")
    ordered = sorted(segments, key=lambda s: (s.start_time, s.vehicle_id))
    n = len(ordered)
    n_train = int(n * train_frac)
    n_val = int(n * val_frac)
    return ordered[:n_train], ordered[n_train : n_train + n_val], ordered[n_train + n_val :]


def empty_runs(records: list[TrajectoryRecord]) -> list[list[TrajectoryRecord]]:
    """Maximal consecutive status-0 stretches (the behavior-model training data)."""
    runs, current = [], []
    for rec in records:
        if rec.status == 0:
            current.append(rec)
        elif current:
            runs.append(current)
            current = []
    if current:
        runs.append(current)
    return [r for r in runs if len(r) >= 2]


# -- run directory plumbing -------------------------------------------------------


def write_manifest(out_dir: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_text(cfg))
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "version": __version__,
    }
    manifest.update(extra or {})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def sim_params_from_config(cfg: RunConfig) -> SimParams:
    return SimParams(
        dt_s=cfg.dt_s,
        cruise_kmh=cfg.cruise_kmh,
        free_flow_kmh=cfg.free_flow_kmh,
        r_max_km=cfg.r_max_km,
        hotspot_sigma_km=cfg.hotspot_sigma_km,
    )


def view_specs_from_config(cfg: RunConfig) -> dict[str, ViewSpec]:
    return {
        "micro": ViewSpec("micro", cfg.micro_diameter_km),
        "meso": ViewSpec("meso", cfg.meso_diameter_km),
        "macro": ViewSpec("macro", cfg.macro_diameter_km),
    }


def bbox_from_config(cfg: RunConfig):
    return (GeoPoint(cfg.bbox_lat_min, cfg.bbox_lon_min), GeoPoint(cfg.bbox_lat_max, cfg.bbox_lon_max))


def city_from_config(cfg: RunConfig, seed=None, n_vehicles=None, order_rate=None) -> World:
    return generate_city(
        cfg.seed if seed is None else seed,
        bbox_from_config(cfg),
        cfg.n_vehicles if n_vehicles is None else n_vehicles,
        cfg.order_rate_per_min if order_rate is None else order_rate,
        n_hotspots=cfg.n_hotspots,
        params=sim_params_from_config(cfg),
        specs=view_specs_from_config(cfg),
        anchor_to_hotspots=cfg.familiarity_at_hotspots,
    )


def hop_visibility(cfg: RunConfig) -> HopVisibility:
    return HopVisibility((cfg.hop_delay_min_ms, cfg.hop_delay_max_ms), cfg.hop_budget_ms)


# -- data generation ----------------------------------------------------------------


def run_gen_data(cfg: RunConfig, out_dir) -> dict:
    """Simulate the synthetic city under ground-truth driver intents and write
    the trajectory corpus, per-tick feature tensors, grids, and metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = city_from_config(cfg)
    n_ticks = int(cfg.sim_minutes * 60 / cfg.dt_s)

    times, feats = [], {lv: [] for lv in LEVELS}
    metric_rows = []

    def on_tick(w: World):
        snap = w.snapshot()
        times.append(w.time_s)
        for lv in LEVELS:
            feats[lv].append(compute_features(snap, w.grids, lv))
        open_orders = len(w.waiting_orders())
        acc = order_acceptance_rate(w.orders) if w.orders else float("nan")
        metric_rows.append([w.tick, w.time_s, open_orders, empty_loaded_rate(w), acc])

    from .sim import run as sim_run

    sim_run(world, n_ticks, intent_provider, on_tick=on_tick)

    records = []
    for v in world.vehicles:
        for t, lat, lon, status, fare in v.trajectory:
            records.append(TrajectoryRecord(f"v{v.id}", int(round(t)), lat, lon, status, fare))
    records.sort(key=lambda r: (r.vehicle_id, r.timestamp_s))
    save_trajectories(out_dir / "trajectories.csv", records)

    np.savez(
        out_dir / "features.npz",
        times=np.array(times),
        **{lv: np.stack(feats[lv]) for lv in LEVELS},
    )
    grid_dir = out_dir / "grids"
    grid_dir.mkdir(exist_ok=True)
    for lv in LEVELS:
        save_grid(world.grids[lv], grid_dir / f"{lv}.txt")
    write_csv(out_dir / "metrics.csv", ["tick", "time_s", "open_orders", "empty_loaded_rate", "acceptance_rate"], metric_rows)

    summary = {
        "ticks": n_ticks,
        "n_vehicles": len(world.vehicles),
        "n_orders": len(world.orders),
        "n_completed": sum(1 for o in world.orders if o.state == "completed"),
        "n_records": len(records),
        "empty_loaded_rate": empty_loaded_rate(world),
        "order_acceptance_rate": order_acceptance_rate(world.orders) if world.orders else None,
    }
    write_manifest(out_dir, cfg, "gen-data", {"summary": summary})
    return summary


# -- feature store -------------------------------------------------------------------


class FeatureStore:
    """Per-tick raw feature matrices plus shared per-tick V2V channel delays."""

    def __init__(self, data_dir, cfg: RunConfig):
        data = np.load(Path(data_dir) / "features.npz")
        self.times = data["times"]
        self.raw = {lv: data[lv] for lv in LEVELS}
        self.cfg = cfg
        self.grids = GridSet(bbox_from_config(cfg), view_specs_from_config(cfg))
        self.defaults = {lv: empty_cell_features(self.grids, lv) for lv in LEVELS}
        self.vis = hop_visibility(cfg)
        self._edge_delays: dict[tuple[int, int], dict] = {}

    def tick_of_time(self, t_s: float) -> int:
        idx = int(np.searchsorted(self.times, t_s))
        if idx >= len(self.times) or self.times[idx] != t_s:
            raise ValueError(f"no feature tick recorded at t={t_s}")
        return idx

    def edge_delays(self, tick: int, level_idx: int) -> dict:
        key = (tick, level_idx)
        if key not in self._edge_delays:
            rng = np.random.default_rng((self.cfg.seed, 7001, tick, level_idx))
            self._edge_delays[key] = sample_edge_delays(self.grids[LEVELS[level_idx]], self.vis, rng)
        return self._edge_delays[key]

    def masked_normalized(self, tick: int, ego_cells: dict[str, int], normalizer: FeatureNormalizer) -> dict[str, np.ndarray]:
        out = {}
        for li, lv in enumerate(LEVELS):
            delays = hop_delays(self.grids[lv], ego_cells[lv], self.vis, edge_delays=self.edge_delays(tick, li))
            visible = delays <= self.vis.budget_ms
            visible[ego_cells[lv]] = True
            masked = np.where(visible[:, None], self.raw[lv][tick], self.defaults[lv])
            out[lv] = normalizer.apply(masked, lv)
        return out


# -- stage 1: behavior pretraining ------------------------------------------------------


def behavior_corpus(filtered: dict[str, list[TrajectoryRecord]], cfg: RunConfig) -> list[Segment]:
    """Segments sampled from the empty-status stretches of every vehicle."""
    runs = [(vid, run) for vid, recs in sorted(filtered.items()) for run in empty_runs(recs)]
    return segment_trajectories(runs, cfg.leng, cfg.n_segments, (cfg.seed, 1))


def segment_embeddings(seg: Segment, precision: int) -> np.ndarray:
    return np.stack([location_embedding(r.point(), precision) for r in seg.records])


def fit_normalizer(store_raw: dict[str, np.ndarray], train_frac: float) -> FeatureNormalizer:
    n_train_ticks = max(1, int(next(iter(store_raw.values())).shape[0] * train_frac))
    return FeatureNormalizer.fit({lv: [store_raw[lv][:n_train_ticks].reshape(-1, store_raw[lv].shape[-1])] for lv in LEVELS})


def run_pretrain(cfg: RunConfig, data_dir, out_dir) -> dict:
    """Stage 1: behavior model, feature statistics, graph projections, fare scale."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = Path(data_dir)

    raw = load_trajectories(data_dir / "trajectories.csv")
    filtered = {vid: speed_filter(recs, cfg.speed_limit_kmh) for vid, recs in raw.items()}

    segments = behavior_corpus(filtered, cfg)
    train, val, _ = chronological_split(segments, cfg.train_frac, cfg.val_frac)
    emb_of = lambda s: segment_embeddings(s, cfg.geohash_precision)
    train_set = [(s.vehicle_id, emb_of(s)) for s in train]
    val_set = [(s.vehicle_id, emb_of(s)) for s in val]

    dim = 5 * cfg.geohash_precision
    params = init_gru_params(np.random.default_rng((cfg.seed, 10)), dim)
    opt = Adam(params.tensors(), lr=cfg.adam_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    losses = pretrain_behavior(train_set, params, opt, cfg.pretrain_epochs, cfg.pretrain_window, seed=cfg.seed)
    auc = behavior_auc(val_set, params, seed=(cfg.seed + 1), window=cfg.pretrain_window)

    store = np.load(data_dir / "features.npz")
    normalizer = fit_normalizer({lv: store[lv] for lv in LEVELS}, cfg.train_frac)

    gcn = init_gcn_params(np.random.default_rng((cfg.seed, 3)), cfg.d_g)

    # Fare squash scale from the training split of the full-trajectory segments
    # (the same derivation stage 2 repeats for its episodes).
    full_segments = policy_corpus(filtered, cfg)
    full_train, _, _ = chronological_split(full_segments, cfg.train_frac, cfg.val_frac)
    suffixes = np.concatenate([fare_suffix_sum([r.fare for r in s.records]) for s in full_train])
    w_fare = calibrate_fare_weight(suffixes)

    params_out: dict[str, Tensor | np.ndarray] = {}
    params_out.update({k: t.data for k, t in params.tensors().items()})
    params_out.update({k: t.data for k, t in gcn.tensors().items()})
    params_out.update(normalizer.tensors())
    params_out["fare/w"] = np.float64(w_fare)
    params_out["meta/version"] = np.float64(CHECKPOINT_VERSION)
    params_out["meta/precision"] = np.float64(cfg.geohash_precision)
    params_out["meta/d_g"] = np.float64(cfg.d_g)
    params_out["meta/alpha"] = np.float64(cfg.alpha)
    params_out["meta/r_max_km"] = np.float64(cfg.r_max_km)
    ckpt_path = out_dir / "stage1.ckpt"
    save_checkpoint(ckpt_path, params_out)

    write_csv(out_dir / "pretrain_history.csv", ["epoch", "loss"], [[i, l] for i, l in enumerate(losses)])
    summary = {
        "n_segments": len(segments),
        "final_loss": losses[-1],
        "val_auc": auc,
        "w_fare": w_fare,
        "checkpoint": str(ckpt_path),
    }
    write_manifest(out_dir, cfg, "pretrain", {"summary": summary})
    return summary


# -- stage 2: policy training -------------------------------------------------------


def policy_corpus(filtered: dict[str, list[TrajectoryRecord]], cfg: RunConfig) -> list[Segment]:
    """Segments over complete trajectories (both statuses), length >= 3."""
    trajs = sorted(filtered.items())
    segs = segment_trajectories(trajs, cfg.leng, cfg.n_segments, (cfg.seed, 2))
    return [s for s in segs if len(s) >= 3]


@dataclass
class EpisodeParts:
    """Reusable pieces of one segment's episode; rewards depend on alpha only."""

    states: np.ndarray
    probs: np.ndarray
    fares_to_go: np.ndarray
    actions: list[Action]
    origins: list[GeoPoint]
    start_time: float


def ground_truth_action(a: GeoPoint, b: GeoPoint, r_max_km: float) -> Action:
    dist = haversine_km(a, b)
    if dist < 1e-9:
        return Action(0.0, 0.0)
    return Action(min(1.0, dist / r_max_km), azimuth_deg(a, b))


def build_episode_parts(
    seg: Segment,
    store: FeatureStore,
    normalizer: FeatureNormalizer,
    gru: GruParams,
    gcn_arrays: dict[str, np.ndarray],
    cfg: RunConfig,
) -> EpisodeParts | None:
    precision = cfg.geohash_precision
    records = seg.records
    n = len(records)
    embs = segment_embeddings(seg, precision)

    # Behavior probabilities p_1..p_{n-1}, anchored at the first point.
    probs = np.empty(n)
    probs[0] = np.nan
    with ad.no_grad():
        state = initial_state(embs[0])
        for t in range(1, n):
            prob, state = gru_step(embs[t], state.h, state.p, gru)
            probs[t] = prob.item()

    fares = fare_suffix_sum([r.fare for r in records])

    adjacency = {lv: store.grids[lv].adjacency + np.eye(len(store.grids[lv])) for lv in LEVELS}
    if not cfg.gcn_self_loops:
        adjacency = {lv: store.grids[lv].adjacency for lv in LEVELS}

    states, actions, origins = [], [], []
    for t in range(1, n - 1):
        point = records[t].point()
        try:
            tick = store.tick_of_time(records[t].timestamp_s)
            ego = {lv: store.grids[lv].point_to_index(point) for lv in LEVELS}
        except ValueError:
            return None
        masked = store.masked_normalized(tick, ego, normalizer)
        parts = []
        for lv in LEVELS:
            mixed = adjacency[lv][ego[lv]] @ masked[lv]  # ego row of A_aug @ X
            parts.append(mixed @ gcn_arrays[f"gcn/{lv}/w"])
        states.append(np.concatenate(parts + [embs[t]]))
        actions.append(ground_truth_action(point, records[t + 1].point(), cfg.r_max_km))
        origins.append(point)
    return EpisodeParts(
        states=np.stack(states),
        probs=probs[1 : n - 1],
        fares_to_go=fares[1 : n - 1],
        actions=actions,
        origins=origins,
        start_time=seg.start_time,
    )


def episodes_for_alpha(parts: list[EpisodeParts], alpha: float, w_fare: float) -> list[DispatchEpisode]:
    out = []
    for p in parts:
        rewards = alpha * p.probs + (1 - alpha) * _sigmoid(w_fare * p.fares_to_go)
        out.append(DispatchEpisode(p.states, rewards, p.actions, p.origins, p.start_time))
    return out


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def build_policy_dataset(cfg: RunConfig, data_dir, stage1: dict[str, np.ndarray]):
    """(train_parts, val_parts, test_parts) of per-segment episode pieces."""
    data_dir = Path(data_dir)
    raw = load_trajectories(data_dir / "trajectories.csv")
    filtered = {vid: speed_filter(recs, cfg.speed_limit_kmh) for vid, recs in raw.items()}
    segments = policy_corpus(filtered, cfg)
    train, val, test = chronological_split(segments, cfg.train_frac, cfg.val_frac)

    store = FeatureStore(data_dir, cfg)
    normalizer = FeatureNormalizer.from_tensors(stage1)
    gru = gru_params_from_arrays(stage1)
    gcn_arrays = {k: v for k, v in stage1.items() if k.startswith("gcn/")}

    def build(split):
        parts = []
        for seg in split:
            p = build_episode_parts(seg, store, normalizer, gru, gcn_arrays, cfg)
            if p is not None:
                parts.append(p)
        return parts

    return build(train), build(val), build(test)


def check_stage1(params: dict[str, np.ndarray]) -> None:
    if "meta/version" not in params or float(params["meta/version"]) != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {params.get('meta/version')} incompatible with {CHECKPOINT_VERSION}"
        )
    if "gru/w_zx" not in params:
        raise CheckpointError("stage-1 parameters missing from checkpoint")


def run_train(cfg: RunConfig, data_dir, out_dir, stage1_path=None, stage2_only: bool = False) -> dict:
    """Stage 2 (policy), running stage 1 first unless a checkpoint is given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if stage1_path is None:
        if stage2_only:
            raise ConfigError("stage 2 alone requires a stage-1 checkpoint (--checkpoint)")
        pre = run_pretrain(cfg, data_dir, out_dir)
        stage1_path = pre["checkpoint"]
    stage1 = load_checkpoint(stage1_path)
    check_stage1(stage1)

    train_parts, val_parts, _ = build_policy_dataset(cfg, data_dir, stage1)
    alpha = float(stage1.get("meta/alpha", cfg.alpha))
    w_fare = float(stage1["fare/w"])
    train_eps = episodes_for_alpha(train_parts, alpha, w_fare)
    val_eps = episodes_for_alpha(val_parts, alpha, w_fare)
    if not train_eps:
        raise ConfigError("no usable training episodes (segments too short?)")

    d_state = 3 * cfg.d_g + 5 * cfg.geohash_precision
    params = init_decoder_params(np.random.default_rng((cfg.seed, 4)), cfg.d_model, cfg.decoder_layers, d_state)

    untrained = dict(stage1)
    untrained.update({k: t.data.copy() for k, t in params.tensors().items()})
    untrained["meta/d_model"] = np.float64(cfg.d_model)
    untrained["meta/k"] = np.float64(cfg.decoder_layers)
    save_checkpoint(out_dir / "untrained.ckpt", untrained)

    tcfg = TrainConfig(
        epochs=cfg.policy_epochs,
        geo_loss_mode=cfg.geo_loss_mode,
        angle_weight=cfg.angle_weight,
        dropout=cfg.dropout,
        context_mode=cfg.context_mode,
        seed=cfg.seed,
    )
    opt = Adam(params.tensors(), lr=cfg.adam_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    error_fn = lambda pred, truth, origin: error_metric(pred, truth, origin, cfg.r_max_km)
    history = train_policy(train_eps, val_eps, params, opt, tcfg, error_fn)

    trained = dict(stage1)
    trained.update({k: t.data for k, t in params.tensors().items()})
    trained["meta/d_model"] = np.float64(cfg.d_model)
    trained["meta/k"] = np.float64(cfg.decoder_layers)
    ckpt_path = out_dir / "stage2.ckpt"
    save_checkpoint(ckpt_path, trained)

    write_csv(
        out_dir / "train_history.csv",
        ["epoch", "step", "train_loss", "val_error_km"],
        [[h["epoch"], h["step"], h["train_loss"], h["val_error_km"]] for h in history],
    )
    summary = {
        "n_train_episodes": len(train_eps),
        "n_val_episodes": len(val_eps),
        "first_val_error_km": history[0]["val_error_km"],
        "final_val_error_km": history[-1]["val_error_km"],
        "final_train_loss": history[-1]["train_loss"],
        "checkpoint": str(ckpt_path),
        "untrained_checkpoint": str(out_dir / "untrained.ckpt"),
    }
    write_manifest(out_dir, cfg, "train", {"summary": summary})
    return summary


# -- inference (live dispatch) ---------------------------------------------------------


def run_eval(cfg: RunConfig, checkpoint_path, out_dir) -> dict:
    """Replay the trained policy in a fresh world and score it against the
    drivers' own intents; greedy order assignment runs every tick."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params_arrays = load_checkpoint(checkpoint_path)
    check_stage1(params_arrays)
    if "policy/proj_reward/w" not in params_arrays:
        raise CheckpointError("checkpoint lacks policy parameters; run stage 2 first")

    gru = gru_params_from_arrays(params_arrays)
    policy = decoder_params_from_arrays(params_arrays)
    normalizer = FeatureNormalizer.from_tensors(params_arrays)
    gcn_arrays = {k: v for k, v in params_arrays.items() if k.startswith("gcn/")}
    alpha = float(params_arrays["meta/alpha"])
    w_fare = float(params_arrays["fare/w"])
    precision = int(params_arrays["meta/precision"])

    world = city_from_config(cfg, seed=(cfg.seed, 5))
    vis = hop_visibility(cfg)
    defaults = {lv: empty_cell_features(world.grids, lv) for lv in LEVELS}
    adjacency = {
        lv: (world.grids[lv].adjacency + np.eye(len(world.grids[lv])) if cfg.gcn_self_loops else world.grids[lv].adjacency)
        for lv in LEVELS
    }

    contexts = {v.id: EpisodeContext(policy) for v in world.vehicles}
    gru_states = {v.id: initial_state(location_embedding(v.pos, precision)) for v in world.vehicles}
    probs = {v.id: 0.5 for v in world.vehicles}

    n_ticks = int(cfg.eval_minutes * 60 / cfg.dt_s)
    errors = []
    metric_rows = []
    for _ in range(n_ticks):
        greedy_assign(world)
        cache_cell_counts(world)
        snap = world.snapshot()
        raw = {lv: compute_features(snap, world.grids, lv) for lv in LEVELS}
        delays = {lv: sample_edge_delays(world.grids[lv], vis, world.delay_rng) for lv in LEVELS}

        actions: dict[int, Action] = {}
        for v in world.vehicles:
            emb = location_embedding(world.clamp(v.pos), precision)
            with ad.no_grad():
                prob_t, gru_states[v.id] = gru_step(emb, gru_states[v.id].h, gru_states[v.id].p, gru)
                probs[v.id] = prob_t.item()
            if v.status != "empty":
                continue
            median_fare = world.regional_median_fare(v.pos)
            r_t = alpha * probs[v.id] + (1 - alpha) * float(_sigmoid(w_fare * median_fare))
            parts = []
            for lv in LEVELS:
                ego = world.grids[lv].point_to_index(world.clamp(v.pos))
                d = hop_delays(world.grids[lv], ego, vis, edge_delays=delays[lv])
                visible = d <= vis.budget_ms
                visible[ego] = True
                masked = np.where(visible[:, None], raw[lv], defaults[lv])
                z = normalizer.apply(masked, lv)
                parts.append((adjacency[lv][ego] @ z) @ gcn_arrays[f"gcn/{lv}/w"])
            s_t = np.concatenate(parts + [emb])
            truth = intent_action(world, v)
            pred = predict_action(contexts[v.id], r_t, s_t, policy, mode=cfg.context_mode)
            errors.append(error_metric(pred, truth, v.pos, cfg.r_max_km))
            actions[v.id] = pred
        step(world, actions)
        acc = order_acceptance_rate(world.orders) if world.orders else float("nan")
        metric_rows.append([world.tick, len(world.waiting_orders()), empty_loaded_rate(world), acc])

    metrics = {
        "error_km": float(np.mean(errors)) if errors else float("nan"),
        "empty_loaded_rate": empty_loaded_rate(world),
        "order_acceptance_rate": order_acceptance_rate(world.orders) if world.orders else float("nan"),
        "n_orders": len(world.orders),
        "n_action_steps": len(errors),
    }
    write_csv(out_dir / "metrics.csv", ["tick", "open_orders", "empty_loaded_rate", "acceptance_rate"], metric_rows)
    write_manifest(out_dir, cfg, "eval", {"summary": metrics, "checkpoint": str(checkpoint_path)})
    return metrics


def run_simulate(cfg: RunConfig, out_dir) -> dict:
    """Policy-free baseline: drivers follow their own intents."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = city_from_config(cfg, seed=(cfg.seed, 5))
    n_ticks = int(cfg.eval_minutes * 60 / cfg.dt_s)
    metric_rows = []

    def on_tick(w):
        acc = order_acceptance_rate(w.orders) if w.orders else float("nan")
        metric_rows.append([w.tick, len(w.waiting_orders()), empty_loaded_rate(w), acc])

    from .sim import run as sim_run

    sim_run(world, n_ticks, intent_provider, on_tick=on_tick)
    metrics = {
        "empty_loaded_rate": empty_loaded_rate(world),
        "order_acceptance_rate": order_acceptance_rate(world.orders) if world.orders else float("nan"),
        "n_orders": len(world.orders),
    }
    write_csv(out_dir / "metrics.csv", ["tick", "open_orders", "empty_loaded_rate", "acceptance_rate"], metric_rows)
    write_manifest(out_dir, cfg, "simulate", {"summary": metrics})
    return metrics


# -- sweeps ------------------------------------------------------------------------------


DEFAULT_RATIOS = [0.1, 0.125, 1 / 6, 0.25, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0]


def run_sweep_ratio(cfg: RunConfig, out_dir, ratios=None, target_orders=60) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ratio_sweep(
        bbox_from_config(cfg),
        ratios or DEFAULT_RATIOS,
        seed=cfg.seed,
        sim_minutes=cfg.eval_minutes,
        target_orders=target_orders,
        params=sim_params_from_config(cfg),
        n_hotspots=cfg.n_hotspots,
    )
    write_csv(
        out_dir / "ratio_sweep.csv",
        ["ratio", "n_vehicles", "n_orders", "empty_loaded_rate", "order_acceptance_rate"],
        [[r["ratio"], r["n_vehicles"], r["n_orders"], r["empty_loaded_rate"], r["order_acceptance_rate"]] for r in rows],
    )
    write_manifest(out_dir, cfg, "sweep-ratio", {"n_points": len(rows)})
    return rows


def run_sweep_alpha(cfg: RunConfig, data_dir, out_dir, alphas=None, stage1_path=None) -> list[dict]:
    """Retrain the policy per alpha on shared stage-1 outputs; offline
    validation error per point."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    alphas = alphas if alphas is not None else [round(0.1 * i, 1) for i in range(11)]

    if stage1_path is None:
        pre = run_pretrain(cfg, data_dir, out_dir / "stage1")
        stage1_path = pre["checkpoint"]
    stage1 = load_checkpoint(stage1_path)
    check_stage1(stage1)
    train_parts, val_parts, _ = build_policy_dataset(cfg, data_dir, stage1)
    w_fare = float(stage1["fare/w"])
    d_state = 3 * cfg.d_g + 5 * cfg.geohash_precision
    error_fn = lambda pred, truth, origin: error_metric(pred, truth, origin, cfg.r_max_km)

    rows = []
    for ai, alpha in enumerate(alphas):
        train_eps = episodes_for_alpha(train_parts, alpha, w_fare)
        val_eps = episodes_for_alpha(val_parts, alpha, w_fare)
        params = init_decoder_params(np.random.default_rng((cfg.seed, 4)), cfg.d_model, cfg.decoder_layers, d_state)
        tcfg = TrainConfig(
            epochs=cfg.policy_epochs,
            geo_loss_mode=cfg.geo_loss_mode,
            angle_weight=cfg.angle_weight,
            dropout=cfg.dropout,
            context_mode=cfg.context_mode,
            seed=cfg.seed,
        )
        opt = Adam(params.tensors(), lr=cfg.adam_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        history = train_policy(train_eps, val_eps, params, opt, tcfg, error_fn)
        rows.append({"alpha": alpha, "val_error_km": history[-1]["val_error_km"], "train_loss": history[-1]["train_loss"]})
        log.info("alpha sweep %d/%d: alpha=%.1f val_error=%.4f", ai + 1, len(alphas), alpha, rows[-1]["val_error_km"])

    write_csv(
        out_dir / "alpha_sweep.csv",
        ["alpha", "val_error_km", "train_loss"],
        [[r["alpha"], r["val_error_km"], r["train_loss"]] for r in rows],
    )
    best = min(rows, key=lambda r: r["val_error_km"])
    write_manifest(out_dir, cfg, "sweep-alpha", {"best_alpha": best["alpha"]})
    return rows


# -- gradient suite -----------------------------------------------------------------------


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Finite-difference checks for every primitive and composite block.

    Returns max relative error per named check; the acceptance gate requires
    each to be <= 1e-4.
    """
    from .behavior import init_gru_params as _gru_init, trace_probs
    from .represent import init_gcn_params as _gcn_init, multiview_embed

    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    def p(shape, scale=0.4):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    prims = {
        "matmul": lambda d: ad.tsum(ad.matmul(d["a"], d["b"])),
        "add_broadcast": lambda d: ad.tsum(ad.add(d["a"], d["bias"])),
        "mul": lambda d: ad.tsum(ad.mul(d["a"], d["a2"])),
        "concat": lambda d: ad.tsum(ad.square(ad.concat([d["a"], d["a2"]], axis=-1))),
        "sigmoid": lambda d: ad.tsum(ad.sigmoid(d["a"])),
        "tanh": lambda d: ad.tsum(ad.tanh(d["a"])),
        "gelu": lambda d: ad.tsum(ad.gelu(d["a"])),
        "softmax": lambda d: ad.tsum(ad.mul(ad.softmax(d["a"]), d["a2"])),
        "dropout": lambda d: ad.tsum(ad.dropout(d["a"], 0.4, np.random.default_rng(7), training=True)),
        "log_clip": lambda d: ad.tsum(ad.log(ad.clip(ad.sigmoid(d["a"]), 1e-7, 1 - 1e-7))),
        "mean_square": lambda d: ad.tmean(ad.square(d["a"])),
        "row_element": lambda d: ad.element(ad.row(d["a"], 1), 2),
        "transpose_reshape": lambda d: ad.tsum(ad.matmul(ad.transpose(d["a"]), ad.reshape(d["v"], (4, 1)))),
    }
    data = {"a": p((4, 6)), "a2": p((4, 6)), "b": p((6, 5)), "bias": p(6), "v": p(4)}
    for name, fn in prims.items():
        out[f"primitive/{name}"] = ad.gradcheck(lambda fn=fn: fn(data), data)

    # GCN layer over a toy multiview graph
    gcn = _gcn_init(rng, d_g=3)
    adjacency, features, ego = {}, {}, {}
    for level, n, m in (("micro", 5, 3), ("meso", 4, 4), ("macro", 3, 3)):
        adj = np.zeros((n, n))
        for i in range(n - 1):
            adj[i, i + 1] = adj[i + 1, i] = 1.0
        adjacency[level], features[level], ego[level] = adj, rng.normal(size=(n, m)), 1
    out["composite/gcn_layer"] = ad.gradcheck(
        lambda: ad.tsum(ad.square(multiview_embed(adjacency, features, ego, gcn))), gcn.tensors()
    )

    # GRU cell over a short anchored sequence
    gru = _gru_init(rng, 4)
    embs = rng.integers(0, 2, size=(4, 4)).astype(float)
    out["composite/gru_cell"] = ad.gradcheck(
        lambda: ad.tsum(ad.concat([ad.reshape(q, (1,)) for q in trace_probs(embs, gru)], axis=-1)),
        gru.tensors(),
    )

    # Attention block and decoder layer
    attn = {"w_x": p((4, 4)), "w_y": p((4, 4)), "w_z": p((4, 4))}
    x_tok, y_tok = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out["composite/attention"] = ad.gradcheck(
        lambda: ad.tsum(ad.square(attention(Tensor(x_tok), Tensor(x_tok), Tensor(y_tok), attn["w_x"], attn["w_y"], attn["w_z"]))),
        attn,
    )
    from .policy import AttnLayer

    layer = AttnLayer(attn["w_x"], attn["w_y"], attn["w_z"])
    out["composite/decoder_layer"] = ad.gradcheck(
        lambda: ad.tsum(ad.square(decoder_layer(Tensor(x_tok), Tensor(y_tok), 2, layer))), attn
    )

    # Action MLP and the full policy step + GeoLoss
    dparams = init_decoder_params(rng, d_model=8, k=1, d_state=6)
    head = {"w1": dparams.head_w1, "b1": dparams.head_b1, "w2": dparams.head_w2, "b2": dparams.head_b2}
    vec = rng.normal(size=8)

    def head_loss():
        dis, deg = action_head(Tensor(vec), dparams)
        return ad.add(ad.square(dis), ad.mul(ad.square(deg), 1e-4))

    out["composite/action_mlp"] = ad.gradcheck(head_loss, head)

    truths = [Action(0.3, 45.0), Action(0.6, 200.0)]
    s_seq = [rng.normal(size=6), rng.normal(size=6)]

    def full_loss():
        ctx = EpisodeContext(dparams)
        total = None
        for t, truth in enumerate(truths):
            p_a = policy_step(0.2 + 0.3 * t, s_seq[t], None, ctx, dparams)
            dis, deg = action_head(p_a, dparams)
            term = geo_loss_tensors(dis, deg, truth, "symmetric")
            total = term if total is None else ad.add(total, term)
        return total

    out["composite/geo_loss_full_model"] = ad.gradcheck(full_loss, dparams.tensors())
    return out
