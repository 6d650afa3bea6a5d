"""Episode collection, windowing into training segments, normalization, and CSV I/O."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plant as P

SCHEMA_VERSION = 1
STATE_DIM = 16
INPUT_DIM = 8
RESID_DIM = 8
STD_FLOOR = 1e-8

CSV_COLUMNS = (
    ["t"]
    + [f"chi{i}" for i in range(8)]
    + [f"chid{i}" for i in range(8)]
    + [f"tau{i}" for i in range(8)]
    + [f"H{i}" for i in range(8)]
    + [f"chidd{i}" for i in range(8)]
    + ["m_p", "regime"]
)


class DatasetError(ValueError):
    pass


class IntegrityError(DatasetError):
    pass


class SchemaVersionError(DatasetError):
    pass


class CsvParseError(DatasetError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class Episode:
    t: np.ndarray
    chi: np.ndarray
    chid: np.ndarray
    tau: np.ndarray
    H: np.ndarray
    chi_ddot: np.ndarray
    m_p: np.ndarray
    labels: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for name in ("chi", "chid", "tau", "H", "chi_ddot", "m_p"):
            if len(getattr(self, name)) != n:
                raise DatasetError(f"channel {name} has {len(getattr(self, name))} rows, expected {n}")
        if len(self.labels) != n:
            raise DatasetError("label trace length differs from time base")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def zeta(self) -> np.ndarray:
        return np.concatenate([self.chi, self.chid], axis=1)

    @property
    def tau_prev(self) -> np.ndarray:
        """Input applied on the previous step; zero before the first step."""
        out = np.zeros_like(self.tau)
        out[1:] = self.tau[:-1]
        return out


@dataclass(frozen=True)
class ReferenceSample:
    chi: np.ndarray
    chid: np.ndarray
    chidd: np.ndarray


class RandomReference:
    """Sum-of-sinusoids translation and joint reference; attitude held level."""

    def __init__(self, rng: np.random.Generator, base=(0.0, 0.0, 1.5)):
        self.base = np.asarray(base, dtype=float)
        self.amp = rng.uniform(0.1, 0.4, size=(3, 3))
        self.freq = rng.uniform(0.05, 0.4, size=(3, 3))
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, 3))
        centre = rng.uniform(-1.0, 1.0, size=2)
        jamp = rng.uniform(0.1, 0.6, size=(2, 2))
        room = np.pi / 2 - np.abs(centre)
        jamp *= np.minimum(1.0, room / jamp.sum(axis=1))[:, None]
        self.jcentre = centre
        self.jamp = jamp
        self.jfreq = rng.uniform(0.05, 0.3, size=(2, 2))
        self.jphase = rng.uniform(0, 2 * np.pi, size=(2, 2))

    @staticmethod
    def _sines(amp, freq, phase, t):
        w = 2 * np.pi * freq
        arg = w * t + phase
        return (
            (amp * np.sin(arg)).sum(axis=1),
            (amp * w * np.cos(arg)).sum(axis=1),
            (-amp * w * w * np.sin(arg)).sum(axis=1),
        )

    def __call__(self, t: float) -> ReferenceSample:
        q, qd, qdd = np.zeros(8), np.zeros(8), np.zeros(8)
        p, v, a = self._sines(self.amp, self.freq, self.phase, t)
        q[:3], qd[:3], qdd[:3] = self.base + p, v, a
        p, v, a = self._sines(self.jamp, self.jfreq, self.jphase, t)
        q[6:], qd[6:], qdd[6:] = self.jcentre + p, v, a
        return ReferenceSample(q, qd, qdd)


@dataclass(frozen=True)
class CollectionGains:
    """Acceleration-level PD gains per coordinate group."""

    kp_trans: float = 4.0
    kd_trans: float = 3.0
    kp_rot: float = 36.0
    kd_rot: float = 12.0
    kp_joint: float = 36.0
    kd_joint: float = 12.0

    def vectors(self):
        kp = np.array([self.kp_trans] * 3 + [self.kp_rot] * 3 + [self.kp_joint] * 2)
        kd = np.array([self.kd_trans] * 3 + [self.kd_rot] * 3 + [self.kd_joint] * 2)
        return kp, kd


def pd_gravity_control(chi, chid, ref: ReferenceSample, params: P.PlantParams, gains: CollectionGains):
    """PD plus gravity feed-forward using the payload-free model."""
    kp, kd = gains.vectors()
    e = ref.chi - chi
    e[..., 6:] = P.wrap_angle(e[..., 6:])
    m_diag = np.diagonal(P.inertia_matrix(chi, 0.0, params), axis1=-2, axis2=-1)
    return m_diag * (ref.chidd + kp * e + kd * (ref.chid - chid)) + P.gravity_vector(chi, 0.0, params)


def payload_schedule(rng: np.random.Generator, duration: float, payload: float, mode: str):
    """Event list [(time, 'attach'|'detach')] for an episode."""
    if payload <= 0 or mode == "none":
        return []
    if mode == "constant":
        return [(0.0, "attach")]
    if mode != "pickdrop":
        raise DatasetError(f"unknown payload schedule {mode!r}")
    events, t, kind = [], rng.uniform(3.0, 8.0), "attach"
    while t < duration:
        events.append((float(t), kind))
        kind = "detach" if kind == "attach" else "attach"
        t += rng.uniform(5.0, 12.0)
    return events


def collect_episode(
    params: P.PlantParams,
    duration: float,
    payload: float,
    seed: int,
    trajectory_family: str = "sinusoid",
    schedule: str = "pickdrop",
    dt: float = P.DEFAULT_DT,
    control_every: int = 2,
    gains: CollectionGains = CollectionGains(),
) -> Episode:
    """Fly a randomized reference under the PD collection controller and log every step."""
    if duration <= 0:
        raise DatasetError("duration must be positive")
    if trajectory_family != "sinusoid":
        raise DatasetError(f"unknown trajectory family {trajectory_family!r}")
    rng = np.random.default_rng(seed)
    ref_fn = RandomReference(rng)
    events = payload_schedule(rng, duration, payload, schedule)
    n = int(round(duration / dt))
    r0 = ref_fn(0.0)
    state = P.GeneralizedState(r0.chi.copy(), r0.chid.copy(), 0.0)
    regime = P.RegimeState(level=payload)
    cols = {k: np.zeros((n, 8)) for k in ("chi", "chid", "tau", "H", "chidd")}
    t_arr, m_arr, labels = np.zeros(n), np.zeros(n), []
    tau = np.zeros(8)
    ev = 0
    for j in range(n):
        t = j * dt
        while ev < len(events) and events[ev][0] <= t + 1e-12:
            regime = P.payload_event(regime, events[ev][1], payload)
            ev += 1
        if j % control_every == 0:
            tau = pd_gravity_control(state.chi, state.chid, ref_fn(t), params, gains)
        try:
            out = P.step(state, regime, tau, params, dt, rng, step_index=j)
        except P.SimulationDiverged as exc:
            raise P.SimulationDiverged(exc.step_index, f"episode seed={seed} payload={payload}") from exc
        t_arr[j] = t
        cols["chi"][j], cols["chid"][j] = state.chi, state.chid
        cols["tau"][j], cols["H"][j], cols["chidd"][j] = tau, out.H, out.chi_ddot
        m_arr[j] = regime.m_p
        labels.append(regime.label)
        state, regime = out.state, out.regime
    meta = {
        "seed": int(seed),
        "payload": float(payload),
        "trajectory_family": trajectory_family,
        "schedule": schedule,
        "events": [[float(a), b] for a, b in events],
        "dt": dt,
    }
    return Episode(t_arr, cols["chi"], cols["chid"], cols["tau"], cols["H"], cols["chidd"], m_arr, labels, meta)


# ---------------------------------------------------------------------------
# Segments


@dataclass(frozen=True)
class Segment:
    zeta: np.ndarray  # (S, 16)
    tau: np.ndarray  # (S, 8)
    H: np.ndarray  # (S, 8)
    hist_zeta: np.ndarray  # (L+1, 16), ends at the segment's first step
    hist_tau: np.ndarray  # (L+1, 8), previous applied inputs aligned with hist_zeta
    label: str
    episode: int
    start: int

    @property
    def zeta_now(self) -> np.ndarray:
        return self.hist_zeta[-1]

    @property
    def tau_prev(self) -> np.ndarray:
        return self.hist_tau[-1]


def segment_count(n: int, S: int, stride: int, L: int) -> int:
    return max(0, (n - S - L) // stride + 1)


def segment(episodes, S: int, stride: int, L: int) -> list[Segment]:
    """Overlapping windows; a window starting at t carries history t-L..t."""
    if S < 1 or L < 1 or not 1 <= stride <= S:
        raise DatasetError(f"invalid window parameters S={S} stride={stride} L={L}")
    out = []
    for e_idx, ep in enumerate(episodes):
        zeta, tau_prev = ep.zeta, ep.tau_prev
        for k in range(segment_count(len(ep), S, stride, L)):
            t = L + k * stride
            out.append(
                Segment(
                    zeta=zeta[t : t + S],
                    tau=ep.tau[t : t + S],
                    H=ep.H[t : t + S],
                    hist_zeta=zeta[t - L : t + 1],
                    hist_tau=tau_prev[t - L : t + 1],
                    label=ep.labels[t],
                    episode=e_idx,
                    start=t,
                )
            )
    return out


@dataclass
class SegmentBatch:
    hist_zeta: np.ndarray  # (B, L+1, 16)
    hist_tau: np.ndarray  # (B, L+1, 8)
    H: np.ndarray  # (B, S, 8)
    labels: list[str]

    @property
    def zeta_now(self) -> np.ndarray:
        return self.hist_zeta[:, -1]

    @property
    def tau_prev(self) -> np.ndarray:
        return self.hist_tau[:, -1]

    def __len__(self) -> int:
        return len(self.H)


def stack_segments(segments) -> SegmentBatch:
    return SegmentBatch(
        np.stack([s.hist_zeta for s in segments]),
        np.stack([s.hist_tau for s in segments]),
        np.stack([s.H for s in segments]),
        [s.label for s in segments],
    )


def split_episodes(n: int, seed: int, fractions=(0.70, 0.15, 0.15)) -> dict[str, list[int]]:
    """Deterministic by-episode split; every split gets at least one episode when n >= 3."""
    order = np.random.default_rng(seed).permutation(n).tolist()
    n_val = max(1, int(round(fractions[1] * n))) if n >= 3 else 0
    n_test = max(1, int(round(fractions[2] * n))) if n >= 3 else 0
    n_train = n - n_val - n_test
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    input_mean: np.ndarray
    input_std: np.ndarray
    resid_mean: np.ndarray
    resid_std: np.ndarray
    # First differences of the state between consecutive history rows.
    delta_mean: np.ndarray = field(default_factory=lambda: np.zeros(STATE_DIM))
    delta_std: np.ndarray = field(default_factory=lambda: np.ones(STATE_DIM))

    def _stats(self, kind: str):
        return getattr(self, f"{kind}_mean"), getattr(self, f"{kind}_std")

    def apply(self, kind: str, x):
        mu, sd = self._stats(kind)
        return (np.asarray(x) - mu) / sd

    def invert(self, kind: str, x):
        mu, sd = self._stats(kind)
        return np.asarray(x) * sd + mu

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(
            np.zeros(STATE_DIM), np.ones(STATE_DIM), np.zeros(INPUT_DIM), np.ones(INPUT_DIM),
            np.zeros(RESID_DIM), np.ones(RESID_DIM),
        )


def _moments(x: np.ndarray):
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def fit_normalizer(segments) -> Normalizer:
    """Per-channel statistics over the segment windows (training split only)."""
    if len(segments) == 0:
        raise DatasetError("cannot fit a normalizer on an empty training split")
    zeta = np.concatenate([s.zeta for s in segments])
    tau = np.concatenate([s.tau for s in segments])
    H = np.concatenate([s.H for s in segments])
    delta = np.concatenate([state_delta(s.hist_zeta)[1:] for s in segments])
    return Normalizer(*_moments(zeta), *_moments(tau), *_moments(H), *_moments(delta))


def state_delta(zeta) -> np.ndarray:
    """Row-to-row change of a (..., T, 16) state history; angles wrapped, first row zero."""
    zeta = np.asarray(zeta, dtype=np.float64)
    d = np.zeros_like(zeta)
    d[..., 1:, :] = np.diff(zeta, axis=-2)
    d[..., 3:8] = P.wrap_angle(d[..., 3:8])
    return d


# ---------------------------------------------------------------------------
# Persistence

_FMT = "{:.17g}".format


def write_episode_csv(path, ep: Episode) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for j in range(len(ep)):
            row = [_FMT(ep.t[j])]
            for arr in (ep.chi, ep.chid, ep.tau, ep.H, ep.chi_ddot):
                row.extend(_FMT(v) for v in arr[j])
            row.append(_FMT(ep.m_p[j]))
            row.append(ep.labels[j])
            w.writerow(row)


def read_episode_csv(path, meta: dict | None = None) -> Episode:
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise CsvParseError(path, 1, "unexpected header")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise CsvParseError(path, line_no, f"expected {len(CSV_COLUMNS)} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row[:-1]]
            except ValueError as exc:
                raise CsvParseError(path, line_no, str(exc)) from exc
            if not all(np.isfinite(vals)):
                raise CsvParseError(path, line_no, "non-finite value")
            rows.append(vals)
            labels.append(row[-1])
    a = np.asarray(rows, dtype=np.float64).reshape(-1, len(CSV_COLUMNS) - 1)
    return Episode(
        a[:, 0], a[:, 1:9], a[:, 9:17], a[:, 17:25], a[:, 25:33], a[:, 33:41], a[:, 41],
        labels, dict(meta or {}),
    )


def save_dataset(path, episodes, manifest_extra: dict) -> dict:
    """Write one CSV per episode plus ``manifest.json``; returns the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries, inventory = [], {}
    for i, ep in enumerate(episodes):
        name = f"episode_{i:03d}.csv"
        write_episode_csv(root / name, ep)
        digest = hashlib.sha256((root / name).read_bytes()).hexdigest()
        entries.append({"file": name, "rows": len(ep), "sha256": digest, **ep.meta})
        for lab in ep.labels:
            inventory[lab] = inventory.get(lab, 0) + 1
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "columns": CSV_COLUMNS,
        "episodes": entries,
        "regime_inventory": dict(sorted(inventory.items())),
        **manifest_extra,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(path) -> tuple[dict, list[Episode]]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported dataset schema version {version!r}")
    episodes = []
    for entry in manifest["episodes"]:
        file = root / entry["file"]
        if not file.exists():
            raise IntegrityError(f"episode {entry['file']} listed in manifest is missing")
        ep = read_episode_csv(file, {k: v for k, v in entry.items() if k not in ("file", "rows", "sha256")})
        if len(ep) != entry["rows"]:
            raise IntegrityError(
                f"episode {entry['file']}: manifest says {entry['rows']} rows, file has {len(ep)}"
            )
        if "sha256" in entry and hashlib.sha256(file.read_bytes()).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"episode {entry['file']}: content hash mismatch")
        episodes.append(ep)
    return manifest, episodes


def manifest_hash(path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()
