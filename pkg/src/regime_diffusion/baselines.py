"""Comparison models: a deterministic regressor, the unconditioned diffusion
ablation, and the model-free adaptive controller (zero residual estimate)."""

from __future__ import annotations

import math

import numpy as np

from .controller import AdaptiveController, ControllerGains
from .dataset import INPUT_DIM, RESID_DIM, STATE_DIM, Normalizer, stack_segments
from .diffusion import ResidualDiffusion, TrainingAborted, TrainingLog, validation_batch
from .nncore import Adam, CheckpointError, NumericFailure, ParamStore, Tape, Tensor, load_checkpoint, save_checkpoint
from .nncore import functional as F
from .nncore.layers import add_dense

MODEL_NAMES = ("proposed", "diffusion-nocond", "mlp", "asmc")


class MlpRegressor:
    """Dense 24 -> 128 -> 128 -> 8 with SiLU on normalized (chi, chid, tau_prev).

    A plausible stand-in for an unspecified deep-network baseline; it returns
    the conditional-mean residual for the current step.
    """

    kind = "mlp"
    name = "mlp"

    def __init__(self, normalizer: Normalizer, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.normalizer, self.hidden, self.seed = normalizer, hidden, seed
        p = self.params = ParamStore("mlp.")
        add_dense(p, "l1", rng, STATE_DIM + INPUT_DIM, hidden)
        add_dense(p, "l2", rng, hidden, hidden)
        add_dense(p, "l3", rng, hidden, RESID_DIM)

    def parameters(self) -> list[Tensor]:
        return list(self.params)

    def _features(self, zeta, tau_prev) -> np.ndarray:
        return np.concatenate(
            [self.normalizer.apply("state", zeta), self.normalizer.apply("input", tau_prev)], axis=-1
        )

    def forward(self, x) -> Tensor:
        p = self.params
        h = F.silu(F.dense(x, p["l1.w"], p["l1.b"]))
        h = F.silu(F.dense(h, p["l2.w"], p["l2.b"]))
        return F.dense(h, p["l3.w"], p["l3.b"])

    def loss(self, batch) -> Tensor:
        target = self.normalizer.apply("resid", batch.H[:, 0])
        return F.mse(self.forward(self._features(batch.zeta_now, batch.tau_prev)), target)

    def predict(self, zeta, tau_prev) -> np.ndarray:
        out = self.forward(self._features(zeta, tau_prev)).data
        return self.normalizer.invert("resid", out)

    def predict_from_history(self, hist_zeta, hist_tau, rng=None) -> np.ndarray:
        return self.predict(np.asarray(hist_zeta)[..., -1, :], np.asarray(hist_tau)[..., -1, :])

    def meta(self) -> dict:
        return {
            "model": self.name,
            "kind": self.kind,
            "hidden": self.hidden,
            "seed": self.seed,
            "normalizer": self.normalizer.to_dict(),
        }

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.params.arrays(), {**self.meta(), **(extra or {})})

    @classmethod
    def from_checkpoint(cls, params: dict, meta: dict) -> "MlpRegressor":
        model = cls(Normalizer.from_dict(meta["normalizer"]), hidden=meta["hidden"], seed=meta["seed"])
        model.params.load(params)
        return model


def train_mlp(
    model: MlpRegressor,
    train_segments,
    val_segments=None,
    steps: int = 5000,
    batch_size: int = 256,
    lr: float = 2e-4,
    seed: int = 0,
    log_every: int = 100,
    val_size: int = 512,
    progress=None,
) -> TrainingLog:
    """Minimize the squared error to the current-step residual."""
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = Adam({p.name: p for p in params}, lr=lr)
    log, window = TrainingLog(), []
    val = validation_batch(val_segments, val_size, seed + 1) if val_segments else None
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(train_segments), size=batch_size)
        batch = stack_segments([train_segments[i] for i in idx])
        try:
            with Tape() as tape:
                loss = model.loss(batch)
            grads = tape.gradient(loss, params)
        except NumericFailure as exc:
            raise TrainingAborted(f"step {step}: {exc}; seed={seed}") from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingAborted(f"step {step}: non-finite loss; seed={seed}")
        opt.step(grads)
        window.append(value)
        if step % log_every == 0 or step == steps:
            v = float(model.loss(val).data) if val is not None else float("nan")
            log.rows.append((step, float(np.mean(window)), v))
            window = []
            if progress:
                progress(step, log.rows[-1])
    return log


def unconditioned_diffusion(normalizer: Normalizer, **kw) -> ResidualDiffusion:
    """Same network as the proposed model with the regime descriptor zeroed."""
    return ResidualDiffusion(normalizer, conditioned=False, **kw)


class ZeroPredictor:
    """Residual estimate fixed at zero; the adaptive gain must absorb everything."""

    kind = "asmc"
    name = "asmc"

    def predict_from_history(self, hist_zeta, hist_tau, rng=None) -> np.ndarray:
        return np.zeros(np.shape(hist_zeta)[:-2] + (RESID_DIM,))


def asmc_controller(gains: ControllerGains | None = None, batch: tuple[int, ...] = ()):
    """Adaptive sliding-mode controller with no learned residual."""
    return AdaptiveController(gains, batch=batch), ZeroPredictor()


def load_model(path):
    """Load any saved learned model, dispatching on its recorded kind."""
    params, meta = load_checkpoint(path)
    if meta.get("kind") == "diffusion":
        return ResidualDiffusion.from_checkpoint(params, meta)
    if meta.get("kind") == "mlp":
        return MlpRegressor.from_checkpoint(params, meta)
    raise CheckpointError(f"{path}: unknown model kind {meta.get('kind')!r}")
