"""Temporal convolutional encoder: recent (state, previous input) history -> regime descriptor."""

from __future__ import annotations

from collections import deque

import numpy as np

from .dataset import INPUT_DIM, STATE_DIM, Normalizer, state_delta
from .nncore import ContractViolation, ParamStore, Tape, Tensor
from .nncore import functional as F
from .nncore.layers import GROUPS, add_conv, add_dense, add_group_norm

DESCRIPTOR_DIM = 32
OBS_DIM = STATE_DIM + INPUT_DIM
FEATURE_DIM = OBS_DIM + STATE_DIM


class HistoryBuffer:
    """The most recent ``capacity`` observations in chronological order."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractViolation("buffer capacity must be positive")
        self.capacity = capacity
        self._items: deque[np.ndarray] = deque(maxlen=capacity)

    def push(self, zeta, tau_prev) -> "HistoryBuffer":
        obs = np.concatenate([np.asarray(zeta, dtype=np.float64), np.asarray(tau_prev, dtype=np.float64)])
        if obs.shape != (OBS_DIM,):
            raise ContractViolation(f"observation must have {OBS_DIM} entries, got {obs.shape}")
        self._items.append(obs)
        return self

    @property
    def fill(self) -> int:
        return len(self._items)

    @property
    def is_full(self) -> bool:
        return len(self._items) == self.capacity

    def array(self) -> np.ndarray:
        """(fill, 24) array, oldest first."""
        if not self._items:
            return np.zeros((0, OBS_DIM))
        return np.stack(self._items)


class RegimeEncoder:
    """conv(d=1) -> GN -> SiLU -> conv(d=2) -> GN -> SiLU -> last step -> dense -> tanh."""

    def __init__(
        self,
        rng: np.random.Generator,
        channels: int = 64,
        out_dim: int = DESCRIPTOR_DIM,
        groups: int = GROUPS,
        kernel: int = 3,
        dilations: tuple[int, int] = (1, 2),
    ):
        self.channels, self.out_dim, self.groups = channels, out_dim, groups
        self.kernel, self.dilations = kernel, tuple(dilations)
        self.params = ParamStore("enc.")
        add_conv(self.params, "conv1", rng, kernel, FEATURE_DIM, channels)
        add_group_norm(self.params, "gn1", channels)
        add_conv(self.params, "conv2", rng, kernel, channels, channels)
        add_group_norm(self.params, "gn2", channels)
        add_dense(self.params, "proj", rng, channels, out_dim)

    def config(self) -> dict:
        return {
            "channels": self.channels,
            "out_dim": self.out_dim,
            "groups": self.groups,
            "kernel": self.kernel,
            "dilations": list(self.dilations),
        }

    def forward(self, history) -> Tensor:
        """``history`` is the (..., L+1, 40) feature window; returns (..., out_dim)."""
        p = self.params
        h = history
        for i, d in enumerate(self.dilations, start=1):
            h = F.conv1d(h, p[f"conv{i}.w"], d, p[f"conv{i}.b"])
            h = F.group_norm(h, self.groups, p[f"gn{i}.gamma"], p[f"gn{i}.beta"])
            h = F.silu(h)
        last = F.getitem(h, (Ellipsis, -1, slice(None)))
        return F.tanh(F.dense(last, p["proj.w"], p["proj.b"]))


def normalize_history(hist_zeta, hist_tau, norm: Normalizer) -> np.ndarray:
    """Encoder input: normalized state, previous input and state change per row.

    The state change is a fixed invertible re-coding of the same window; on
    its own scale it exposes accelerations that are otherwise a tiny
    difference between two nearly equal normalized velocities.
    """
    delta = norm.apply("delta", state_delta(hist_zeta))
    delta[..., 0, :] = 0.0
    return np.concatenate([norm.apply("state", hist_zeta), norm.apply("input", hist_tau), delta], axis=-1)


def encode(buffer: HistoryBuffer, encoder: RegimeEncoder, norm: Normalizer) -> np.ndarray:
    """Descriptor for a full buffer."""
    if not buffer.is_full:
        raise ContractViolation(
            f"encoder needs a full history ({buffer.fill}/{buffer.capacity}); use a zero residual instead"
        )
    arr = buffer.array()
    x = normalize_history(arr[:, :STATE_DIM], arr[:, STATE_DIM:], norm)
    return encoder.forward(x).data


def encode_gradients(
    buffer: HistoryBuffer, encoder: RegimeEncoder, norm: Normalizer, upstream
) -> dict[str, np.ndarray]:
    """Pull an upstream gradient on the descriptor back to the encoder parameters."""
    arr = buffer.array()
    x = normalize_history(arr[:, :STATE_DIM], arr[:, STATE_DIM:], norm)
    with Tape() as tape:
        r = encoder.forward(x)
        loss = F.total(F.mul(r, np.asarray(upstream, dtype=np.float64)))
    return tape.gradient(loss, list(encoder.params))
