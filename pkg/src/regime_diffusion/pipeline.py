"""End-to-end stages shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataset as D
from . import evaluation as E
from .baselines import MlpRegressor, ZeroPredictor, train_mlp
from .closed_loop import ClosedLoopResult, run_closed_loop
from .config import RunConfig
from .diffusion import ResidualDiffusion, TrainingLog, train_diffusion
from .scenario import PickPlaceScenario

LEARNED_MODELS = ("proposed", "diffusion-nocond", "mlp")


def collection_seed(master: int, payload_index: int, episode: int) -> int:
    return master * 10_000 + 100 * payload_index + episode


def evaluation_seed(master: int, episode: int) -> int:
    return master * 10_000 + 5_000 + episode


def trial_seeds(master: int, cell: int, trials: int) -> list[int]:
    return [master * 10_000 + 7_000 + 100 * cell + i for i in range(trials)]


def collect(cfg: RunConfig, full: bool = False, progress=None) -> list[D.Episode]:
    params = cfg.plant_params()
    duration = cfg.dataset.full_duration if full else cfg.dataset.duration
    episodes = []
    for pi, payload in enumerate(cfg.dataset.payloads):
        for i in range(cfg.dataset.episodes_per_payload):
            seed = collection_seed(cfg.seed, pi, i)
            episodes.append(D.collect_episode(params, duration, payload, seed, schedule=cfg.dataset.schedule))
            if progress:
                progress(payload, seed)
    return episodes


@dataclass
class Splits:
    indices: dict[str, list[int]]
    train: list[D.Segment]
    val: list[D.Segment]
    test: list[D.Segment]
    normalizer: D.Normalizer


def make_splits(episodes, cfg: RunConfig) -> Splits:
    d = cfg.dataset
    idx = D.split_episodes(len(episodes), d.split_seed)

    def seg(key):
        return D.segment([episodes[i] for i in idx[key]], d.S, d.stride, d.L)

    train = seg("train")
    return Splits(idx, train, seg("val"), seg("test"), D.fit_normalizer(train))


def save_collected(path, episodes, cfg: RunConfig, full: bool = False) -> dict:
    splits = make_splits(episodes, cfg)
    extra = {
        "dt": float(episodes[0].meta.get("dt", 0.01)) if episodes else 0.01,
        "S": cfg.dataset.S,
        "L": cfg.dataset.L,
        "stride": cfg.dataset.stride,
        "splits": splits.indices,
        "seeds": [ep.meta["seed"] for ep in episodes],
        "normalizer": splits.normalizer.to_dict(),
        "full_protocol": full,
        "config_hash": cfg.hash(),
    }
    return D.save_dataset(path, episodes, extra)


def build_model(name: str, normalizer: D.Normalizer, cfg: RunConfig, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    m = cfg.model
    if name in ("proposed", "diffusion-nocond"):
        return ResidualDiffusion(
            normalizer,
            S=cfg.dataset.S,
            L=cfg.dataset.L,
            K=m.K,
            conditioned=name == "proposed",
            seed=seed,
            encoder_channels=m.encoder_channels,
            width=m.width,
        )
    if name == "mlp":
        return MlpRegressor(normalizer, hidden=m.mlp_hidden, seed=seed)
    raise ValueError(f"no trainable model called {name!r}")


def train(name: str, splits: Splits, cfg: RunConfig, steps=None, batch=None, lr=None, seed=None, progress=None):
    """Build and train ``name``; returns (model, TrainingLog)."""
    m = cfg.model
    model = build_model(name, splits.normalizer, cfg, seed)
    kw = dict(
        steps=m.steps if steps is None else steps,
        batch_size=batch or m.batch,
        lr=m.lr if lr is None else lr,
        seed=cfg.seed if seed is None else seed,
        log_every=m.log_every,
        val_size=m.val_size,
        progress=progress,
    )
    fn = train_mlp if name == "mlp" else train_diffusion
    log: TrainingLog = fn(model, splits.train, splits.val, **kw)
    return model, log


# ---------------------------------------------------------------------------
# Model validation on the held-out payload level


def evaluation_episodes(cfg: RunConfig) -> list[D.Episode]:
    e = cfg.evaluation
    params = cfg.plant_params()
    return [
        D.collect_episode(params, e.duration, e.payload, evaluation_seed(cfg.seed, i), schedule=cfg.dataset.schedule)
        for i in range(e.episodes)
    ]


def model_validation(models: dict, episodes, cfg: RunConfig) -> list[dict]:
    """One row per (model, evaluation episode) with per-channel and per-group RMSE.

    Episode ``i`` is also the sampling seed for generative models, so each
    trial varies both the trajectory and the sampling noise.
    """
    rows = []
    for i, ep in enumerate(episodes):
        segs = D.segment([ep], cfg.dataset.S, 1, cfg.dataset.L)
        truth = np.stack([s.H[0] for s in segs])
        for name, model in models.items():
            rng = np.random.default_rng(evaluation_seed(cfg.seed, i))
            pred = E.predict_segments(model, segs, rng)
            row = {"model": name, "trial": i, "seed": ep.meta["seed"]}
            row.update(E.group_rmse(pred, truth))
            row.update({f"H{c + 1}": float(v) for c, v in enumerate(E.channel_rmse(pred, truth))})
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Tracking grid


def tracking_cells(cfg: RunConfig) -> list[tuple[float, float]]:
    return [(p, v) for p in cfg.evaluation.payloads for v in cfg.evaluation.speeds]


def tracking(models: dict, cfg: RunConfig, cells=None, trials=None, progress=None) -> dict:
    """Run every model on every (payload, speed) cell; returns results keyed by (cell, model)."""
    e = cfg.evaluation
    params, gains = cfg.plant_params(), cfg.gains()
    out: dict[tuple[tuple[float, float], str], ClosedLoopResult] = {}
    for c, (payload, speed) in enumerate(cells or tracking_cells(cfg)):
        scenario = PickPlaceScenario(speed=speed, payload=payload)
        seeds = trial_seeds(cfg.seed, c, trials or e.trials)
        for name, model in models.items():
            res = run_closed_loop(
                scenario,
                model,
                seeds,
                params=params,
                gains=gains,
                L=cfg.dataset.L,
                sample_seed=seeds[0] + 50,
                init_radius=e.init_radius,
                duration=e.tracking_duration or None,
            )
            out[((payload, speed), name)] = res
            if progress:
                progress(payload, speed, name, res)
    return out


def predictor_for(name: str, model=None):
    if name == "asmc":
        return ZeroPredictor()
    if model is None:
        raise ValueError(f"model {name!r} needs a checkpoint")
    return model
