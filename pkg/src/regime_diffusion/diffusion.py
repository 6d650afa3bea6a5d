"""Regime-conditioned DDPM over normalized residual windows.

The denoiser predicts the injected noise for a noisy residual window given the
current state, the previous input, the regime descriptor and the diffusion
step.  The unconditioned ablation is the same network with the descriptor
replaced by zeros at train and test time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import INPUT_DIM, RESID_DIM, STATE_DIM, Normalizer, SegmentBatch, stack_segments
from .encoder import DESCRIPTOR_DIM, HistoryBuffer, RegimeEncoder, normalize_history
from .nncore import (
    Adam,
    ContractViolation,
    NumericFailure,
    ParamStore,
    Tape,
    Tensor,
    load_checkpoint,
    save_checkpoint,
)
from .nncore import functional as F
from .nncore.functional import NORM_EPS
from .nncore.layers import GROUPS, add_conv, add_dense, add_group_norm

STEP_EMBED_DIM = 32
COND_DIM = STATE_DIM + INPUT_DIM + DESCRIPTOR_DIM + STEP_EMBED_DIM


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Schedule and forward process


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables; entry ``k - 1`` holds the value for step ``k``."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def K(self) -> int:
        return len(self.betas)


def make_schedule(K: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule with betas clipped to [1e-4, 0.999]."""
    if K < 1:
        raise ContractViolation("need at least one diffusion step")

    def f(k):
        return math.cos((k / K + s) / (1 + s) * math.pi / 2) ** 2

    abar_cos = np.array([f(k) / f(0) for k in range(K + 1)])
    betas = np.clip(1.0 - abar_cos[1:] / abar_cos[:-1], 1e-4, 0.999)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(H0, k, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal: sqrt(abar_k) H0 + sqrt(1 - abar_k) eps."""
    H0, eps = np.asarray(H0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if H0.shape != eps.shape:
        raise ContractViolation("noise must match the residual window shape")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > schedule.K):
        raise ContractViolation(f"diffusion step must lie in 1..{schedule.K}")
    abar = schedule.alpha_bars[k - 1]
    abar = abar.reshape(abar.shape + (1,) * (H0.ndim - abar.ndim))
    return np.sqrt(abar) * H0 + np.sqrt(1.0 - abar) * eps


def step_embedding(k, dim: int = STEP_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer step(s) ``k``: (..., dim)."""
    k = np.asarray(k, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = k[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def reverse_process(
    eps_fn, shape, schedule: NoiseSchedule, rng: np.random.Generator, clip: float | None = None
) -> np.ndarray:
    """Ancestral sampling from pure noise down to step 0.

    ``eps_fn(H_k, k)`` returns the predicted noise.  No noise is added on the
    final (k = 1) update.  Without ``clip`` each step is the plain update
    (H_k - (1 - alpha_k) / sqrt(1 - abar_k) eps) / sqrt(alpha_k).  With
    ``clip`` the same mean is written through the implied clean window
    H0_hat = (H_k - sqrt(1 - abar_k) eps) / sqrt(abar_k), which is clipped to
    [-clip, clip] first; the two forms agree whenever the clip is inactive.
    """
    H = rng.standard_normal(shape)
    for k in range(schedule.K, 0, -1):
        a, abar, b = schedule.alphas[k - 1], schedule.alpha_bars[k - 1], schedule.betas[k - 1]
        eps = eps_fn(H, k)
        if clip is not None:
            # Replace eps by the value consistent with the clipped clean window.
            h0 = np.clip((H - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar), -clip, clip)
            eps = (H - math.sqrt(abar) * h0) / math.sqrt(1.0 - abar)
        H = (H - (1.0 - a) / math.sqrt(1.0 - abar) * eps) / math.sqrt(a)
        if k > 1:
            H = H + math.sqrt(b) * rng.standard_normal(shape)
    return H


# ---------------------------------------------------------------------------
# Denoiser


def _np_conv(x, w, b, d):
    """Causal dilated convolution; taps that only see the zero padding are skipped."""
    k = w.shape[0]
    steps = x.shape[-2]
    out = x @ w[k - 1] + b
    for j in range(k - 1):
        lag = (k - 1 - j) * d
        if lag < steps:
            out[..., lag:, :] += x[..., : steps - lag, :] @ w[j]
    return out


def _np_group_norm(x, groups, gamma, beta):
    shape = x.shape
    xg = x.reshape(shape[:-1] + (groups, shape[-1] // groups))
    n = shape[-2] * (shape[-1] // groups)
    mu = xg.sum(axis=(-3, -1), keepdims=True) / n
    c = xg - mu
    var = (c * c).sum(axis=(-3, -1), keepdims=True) / n
    return (c / np.sqrt(var + NORM_EPS)).reshape(shape) * gamma + beta


def _np_silu(x):
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


class Denoiser:
    """Residual stack of dilated temporal convolutions with additive conditioning."""

    def __init__(
        self,
        rng: np.random.Generator,
        width: int = 64,
        dilations: tuple[int, ...] = (1, 2, 4, 8),
        cond_hidden: int = 128,
        groups: int = GROUPS,
        kernel: int = 3,
    ):
        self.width, self.dilations, self.cond_hidden = width, tuple(dilations), cond_hidden
        self.groups, self.kernel = groups, kernel
        p = self.params = ParamStore("den.")
        add_dense(p, "inp", rng, RESID_DIM, width)
        add_dense(p, "cond", rng, COND_DIM, cond_hidden)
        for i, _ in enumerate(self.dilations):
            add_conv(p, f"blk{i}.conv", rng, kernel, width, width)
            add_group_norm(p, f"blk{i}.gn", width)
            add_dense(p, f"blk{i}.film", rng, cond_hidden, width)
        add_dense(p, "out", rng, width, RESID_DIM)

    def config(self) -> dict:
        return {
            "width": self.width,
            "dilations": list(self.dilations),
            "cond_hidden": self.cond_hidden,
            "groups": self.groups,
            "kernel": self.kernel,
        }

    def forward(self, Hk, cond) -> Tensor:
        """``Hk`` (B, S, 8) and ``cond`` (B, 88) -> predicted noise (B, S, 8)."""
        p = self.params
        steps = Hk.shape[-2]
        h = F.dense(Hk, p["inp.w"], p["inp.b"])
        c = F.silu(F.dense(cond, p["cond.w"], p["cond.b"]))
        for i, d in enumerate(self.dilations):
            y = F.conv1d(h, p[f"blk{i}.conv.w"], d, p[f"blk{i}.conv.b"])
            y = F.group_norm(y, self.groups, p[f"blk{i}.gn.gamma"], p[f"blk{i}.gn.beta"])
            mod = F.dense(c, p[f"blk{i}.film.w"], p[f"blk{i}.film.b"])
            y = F.silu(F.add(y, F.broadcast_time(mod, steps)))
            h = F.add(h, y)
        return F.dense(h, p["out.w"], p["out.b"])

    # Inference without the tape: condition embeddings for every step are
    # computed once, then reused across the reverse chain.
    def block_modulations(self, cond: np.ndarray) -> list[np.ndarray]:
        a = self.params.arrays()
        c = _np_silu(cond @ a["den.cond.w"] + a["den.cond.b"])
        return [c @ a[f"den.blk{i}.film.w"] + a[f"den.blk{i}.film.b"] for i in range(len(self.dilations))]

    def forward_numpy(self, Hk: np.ndarray, mods: list[np.ndarray], arrays: dict | None = None) -> np.ndarray:
        a = arrays if arrays is not None else self.params.arrays()
        h = Hk @ a["den.inp.w"] + a["den.inp.b"]
        for i, d in enumerate(self.dilations):
            y = _np_conv(h, a[f"den.blk{i}.conv.w"], a[f"den.blk{i}.conv.b"], d)
            y = _np_group_norm(y, self.groups, a[f"den.blk{i}.gn.gamma"], a[f"den.blk{i}.gn.beta"])
            h = h + _np_silu(y + mods[i][..., None, :])
        return h @ a["den.out.w"] + a["den.out.b"]


# ---------------------------------------------------------------------------
# Joint model


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,train_loss,val_loss\n")
            for s, tr, va in self.rows:
                fh.write(f"{s},{tr:.10g},{va:.10g}\n")


class ResidualDiffusion:
    """Encoder + denoiser + schedule + normalizer, trained jointly."""

    kind = "diffusion"

    def __init__(
        self,
        normalizer: Normalizer,
        S: int = 8,
        L: int = 10,
        K: int = 20,
        conditioned: bool = True,
        seed: int = 0,
        encoder_channels: int = 64,
        width: int = 64,
        dilations: tuple[int, ...] = (1, 2, 4, 8),
        x0_clip: float | None = None,
    ):
        rng = np.random.default_rng(seed)
        self.x0_clip = x0_clip
        self.normalizer = normalizer
        self.S, self.L = S, L
        self.schedule = make_schedule(K)
        self.conditioned = conditioned
        self.seed = seed
        self.encoder = RegimeEncoder(rng, channels=encoder_channels)
        self.denoiser = Denoiser(rng, width=width, dilations=dilations)

    @property
    def name(self) -> str:
        return "proposed" if self.conditioned else "diffusion-nocond"

    def parameters(self) -> list[Tensor]:
        return list(self.encoder.params) + list(self.denoiser.params)

    def trainable(self) -> list[Tensor]:
        return self.parameters() if self.conditioned else list(self.denoiser.params)

    # -- conditioning -----------------------------------------------------
    def _history(self, hist_zeta, hist_tau) -> np.ndarray:
        return normalize_history(hist_zeta, hist_tau, self.normalizer)

    def descriptor(self, hist_zeta, hist_tau):
        """Regime descriptor (Tensor under a tape); zeros for the ablation."""
        if not self.conditioned:
            return Tensor(np.zeros(np.shape(hist_zeta)[:-2] + (DESCRIPTOR_DIM,)))
        return self.encoder.forward(self._history(hist_zeta, hist_tau))

    def _static_cond(self, hist_zeta, hist_tau) -> np.ndarray:
        z = self.normalizer.apply("state", np.asarray(hist_zeta)[..., -1, :])
        u = self.normalizer.apply("input", np.asarray(hist_tau)[..., -1, :])
        return np.concatenate([z, u], axis=-1)

    # -- training ---------------------------------------------------------
    def loss(self, batch: SegmentBatch, k: np.ndarray, eps: np.ndarray) -> Tensor:
        H0 = self.normalizer.apply("resid", batch.H)
        Hk = q_sample(H0, k, eps, self.schedule)
        r = self.descriptor(batch.hist_zeta, batch.hist_tau)
        cond = F.concat(
            [Tensor(self._static_cond(batch.hist_zeta, batch.hist_tau)), r, Tensor(step_embedding(k))],
            axis=-1,
        )
        return F.mse(self.denoiser.forward(Hk, cond), eps)

    def draw_noise(self, n: int, rng: np.random.Generator):
        k = rng.integers(1, self.schedule.K + 1, size=n)
        eps = rng.standard_normal((n, self.S, RESID_DIM))
        return k, eps

    def fit_clip(self, segments, margin: float = 1.2) -> float:
        """Clip bound for the implied clean window: the largest normalized
        training residual, widened by ``margin``."""
        H = np.concatenate([s.H for s in segments])
        self.x0_clip = float(margin * np.max(np.abs(self.normalizer.apply("resid", H))))
        return self.x0_clip

    # -- sampling ---------------------------------------------------------
    def sample_normalized(self, hist_zeta, hist_tau, rng: np.random.Generator) -> np.ndarray:
        hist_zeta, hist_tau = np.asarray(hist_zeta), np.asarray(hist_tau)
        batch = hist_zeta.shape[:-2]
        static = self._static_cond(hist_zeta, hist_tau)
        r = self.descriptor(hist_zeta, hist_tau).data
        K = self.schedule.K
        ks = np.arange(1, K + 1)
        emb = step_embedding(ks).reshape((K,) + (1,) * len(batch) + (STEP_EMBED_DIM,))
        cond = np.concatenate(
            [np.broadcast_to(np.concatenate([static, r], axis=-1), (K,) + batch + (COND_DIM - STEP_EMBED_DIM,)),
             np.broadcast_to(emb, (K,) + batch + (STEP_EMBED_DIM,))],
            axis=-1,
        )
        mods = self.denoiser.block_modulations(cond)
        arrays = self.denoiser.params.arrays()

        def eps_fn(H, k):
            return self.denoiser.forward_numpy(H, [m[k - 1] for m in mods], arrays)

        return reverse_process(eps_fn, batch + (self.S, RESID_DIM), self.schedule, rng, clip=self.x0_clip)

    def sample(self, hist_zeta, hist_tau, rng: np.random.Generator) -> np.ndarray:
        """Residual windows in physical units, shape (..., S, 8)."""
        return self.normalizer.invert("resid", self.sample_normalized(hist_zeta, hist_tau, rng))

    def predict_from_history(self, hist_zeta, hist_tau, rng) -> np.ndarray:
        """First step of a sampled window: the value the controller consumes."""
        return self.sample(hist_zeta, hist_tau, rng)[..., 0, :]

    def predict_residual(self, buffer: HistoryBuffer, rng: np.random.Generator) -> np.ndarray:
        if not buffer.is_full:
            raise ContractViolation("history buffer not full; the caller must use a zero residual")
        arr = buffer.array()
        return self.predict_from_history(arr[:, :STATE_DIM], arr[:, STATE_DIM:], rng)

    # -- persistence ------------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.encoder.params.arrays(), **self.denoiser.params.arrays()}

    def meta(self) -> dict:
        return {
            "model": self.name,
            "kind": self.kind,
            "conditioned": self.conditioned,
            "S": self.S,
            "L": self.L,
            "K": self.schedule.K,
            "seed": self.seed,
            "x0_clip": self.x0_clip,
            "encoder": self.encoder.config(),
            "denoiser": self.denoiser.config(),
            "normalizer": self.normalizer.to_dict(),
        }

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.arrays(), {**self.meta(), **(extra or {})})

    @classmethod
    def from_checkpoint(cls, params: dict, meta: dict) -> "ResidualDiffusion":
        model = cls(
            Normalizer.from_dict(meta["normalizer"]),
            S=meta["S"],
            L=meta["L"],
            K=meta["K"],
            conditioned=meta["conditioned"],
            seed=meta["seed"],
            encoder_channels=meta["encoder"]["channels"],
            width=meta["denoiser"]["width"],
            dilations=tuple(meta["denoiser"]["dilations"]),
            x0_clip=meta.get("x0_clip"),
        )
        model.encoder.params.load(params)
        model.denoiser.params.load(params)
        return model

    @classmethod
    def load(cls, path) -> "ResidualDiffusion":
        return cls.from_checkpoint(*load_checkpoint(path))


def validation_batch(segments, size: int, seed: int) -> SegmentBatch:
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(segments), size=min(size, len(segments)), replace=False)
    return stack_segments([segments[i] for i in np.sort(idx)])


def fixed_noise(model, n: int, seed: int):
    return model.draw_noise(n, np.random.default_rng(seed))


def train_diffusion(
    model: ResidualDiffusion,
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
    """Adam on the noise-prediction loss, encoder and denoiser updated jointly."""
    rng = np.random.default_rng(seed)
    if model.x0_clip is None:
        model.fit_clip(train_segments)
    opt = Adam({p.name: p for p in model.trainable()}, lr=lr)
    params = model.trainable()
    log = TrainingLog()
    val = None
    if val_segments:
        val = validation_batch(val_segments, val_size, seed + 1)
        val_k, val_eps = fixed_noise(model, len(val), seed + 2)
    window = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(train_segments), size=batch_size)
        batch = stack_segments([train_segments[i] for i in idx])
        k, eps = model.draw_noise(batch_size, rng)
        try:
            with Tape() as tape:
                loss = model.loss(batch, k, eps)
            grads = tape.gradient(loss, params)
        except NumericFailure as exc:
            raise TrainingAborted(f"step {step}: {exc}; last k={k[:8].tolist()}..., seed={seed}") from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingAborted(f"step {step}: non-finite loss; last k={k[:8].tolist()}..., seed={seed}")
        opt.step(grads)
        window.append(value)
        if step % log_every == 0 or step == steps:
            v = float(model.loss(val, val_k, val_eps).data) if val is not None else float("nan")
            log.rows.append((step, float(np.mean(window)), v))
            window = []
            if progress:
                progress(step, log.rows[-1])
    return log


def validation_loss(model: ResidualDiffusion, val_segments, seed: int = 0, size: int = 512) -> float:
    val = validation_batch(val_segments, size, seed + 1)
    k, eps = fixed_noise(model, len(val), seed + 2)
    return float(model.loss(val, k, eps).data)
