"""Synthetic indoor radio environments and fingerprint datasets.

RSSI follows a log-distance path loss with Gaussian shadowing in dB. Shadowing
is either drawn i.i.d. per measurement or, for site-specific realism, as a
static spatially correlated field per AP (plus optional per-measurement noise).
Datasets are written in a small CSV dialect, see :func:`write_dataset`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_TAG = "#metagraphloc-v1"
DEFAULT_RSSI_FLOOR = -110.0


class NoInformationError(ValueError):
    """No detected AP to localize from."""


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ChannelParams:
    p_tx: float = 20.0
    pl0: float = 40.0
    beta: float = 3.0
    d0: float = 1.0
    sigma: float = 3.0

    def __post_init__(self):
        if not self.d0 > 0:
            raise ValueError("d0 must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def path_loss(channel: ChannelParams, distance, shadowing=0.0):
    """Log-distance path loss in dB.

    Distances <= 0 (device on top of the AP) are clamped to ``d0 / 100`` and
    logged. Accepts scalars or arrays.
    """
    d = np.asarray(distance, dtype=np.float64)
    bad = d <= 0
    if np.any(bad):
        log.warning("path_loss: %d non-positive distance(s) clamped to d0/100", int(np.sum(bad)))
        d = np.where(bad, channel.d0 / 100.0, d)
    pl = channel.pl0 + 10.0 * channel.beta * np.log10(d / channel.d0) + shadowing
    return float(pl) if np.ndim(pl) == 0 else pl


def received_power(channel: ChannelParams, distance, shadowing=0.0):
    pl = path_loss(channel, distance, shadowing)
    return channel.p_tx - pl


def rssi_likelihood(channel: ChannelParams, rssi: float, device_pos, ap_pos) -> float:
    """Gaussian density of a single RSSI reading given device and AP positions."""
    if channel.sigma == 0:
        raise ValueError("rssi_likelihood: sigma = 0 gives a degenerate density")
    d = float(np.linalg.norm(np.asarray(device_pos, float) - np.asarray(ap_pos, float)))
    if d == 0:
        raise ValueError("rssi_likelihood: device and AP positions coincide")
    mean = channel.p_tx - channel.pl0 - 10.0 * channel.beta * math.log10(d / channel.d0)
    r = (mean - rssi) / channel.sigma
    return math.exp(-0.5 * r * r) / (math.sqrt(2.0 * math.pi) * channel.sigma)


class SmoothField:
    """Seeded zero-mean random field with roughly unit variance.

    Random Fourier features of a squared-exponential kernel with length scale
    ``length``; evaluating at the same point always gives the same value.
    """

    def __init__(self, rng: np.random.Generator, n_out: int, length: float, n_features: int = 128):
        self.omega = rng.normal(0.0, 1.0 / length, size=(n_features, 2))
        self.phase = rng.uniform(0.0, 2.0 * math.pi, size=n_features)
        self.weights = rng.normal(size=(n_features, n_out)) * math.sqrt(2.0 / n_features)

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        return np.cos(xy[:, :2] @ self.omega.T + self.phase) @ self.weights


@dataclass(frozen=True)
class ImuModel:
    """Synthetic 9-channel IMU features.

    Channels: accelerometer (step dx, step dy, vertical), gyroscope (heading
    cos, heading sin, turn rate), magnetometer (3 axes, world frame: a
    constant geomagnetic field plus a position-dependent indoor anomaly). The
    magnetometer anomaly is what ties IMU readings to absolute position.
    ``d = 0`` disables IMU output entirely.
    """

    d: int = 9
    noise: float = 0.05
    mag_anomaly: float = 8.0
    mag_length: float = 6.0
    earth_field: tuple = (22.0, 0.0, -40.0)

    def __post_init__(self):
        if self.d not in (0, 9):
            raise ValueError("ImuModel supports d = 9 (full) or d = 0 (disabled)")


@dataclass(frozen=True)
class RadioEnvironment:
    ap_positions: np.ndarray
    width: float
    height: float
    channel: ChannelParams = field(default_factory=ChannelParams)
    detection_range: float = 25.0
    rssi_floor: float = DEFAULT_RSSI_FLOOR
    dropout: float = 0.0
    shadowing: str = "iid"
    corr_length: float = 5.0
    noise_sigma: float = 0.0
    floor: int = 0
    seed: int = 0

    def __post_init__(self):
        aps = np.asarray(self.ap_positions, dtype=np.float64)
        object.__setattr__(self, "ap_positions", aps)
        if aps.ndim != 2 or aps.shape[0] < 2 or aps.shape[1] not in (2, 3):
            raise ValueError("need at least two APs with 2-D or 3-D coordinates")
        if not self.detection_range > 0:
            raise ValueError("detection_range must be positive")
        if (aps[:, 0] < 0).any() or (aps[:, 0] > self.width).any() or (aps[:, 1] < 0).any() or (aps[:, 1] > self.height).any():
            raise ValueError("all APs must lie inside the floor extent")
        if self.shadowing not in ("iid", "correlated"):
            raise ValueError(f"unknown shadowing model {self.shadowing!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_aps(self) -> int:
        return self.ap_positions.shape[0]

    def distances(self, xy: np.ndarray) -> np.ndarray:
        """(N, M) device-to-AP distances in the horizontal plane."""
        diff = xy[:, None, :2] - self.ap_positions[None, :, :2]
        return np.sqrt((diff * diff).sum(axis=-1))

    def static_shadowing(self, xy: np.ndarray) -> np.ndarray:
        """Site-specific shadowing (N, M) in dB; zero for the i.i.d. model."""
        if self.shadowing == "iid" or self.channel.sigma == 0:
            return np.zeros((xy.shape[0], self.n_aps))
        field_ = SmoothField(np.random.default_rng([self.seed, 1, self.floor]), self.n_aps, self.corr_length)
        return self.channel.sigma * field_(xy)

    def mean_rssi(self, xy: np.ndarray) -> np.ndarray:
        """Noise-free RSSI (N, M) including the static shadowing field."""
        return self.channel.p_tx - path_loss(self.channel, self.distances(xy), self.static_shadowing(xy))


def random_environment(n_aps: int, width: float, height: float, seed: int, **kwargs) -> RadioEnvironment:
    """APs scattered uniformly over the floor, seeded."""
    rng = np.random.default_rng([seed, int(kwargs.get("floor", 0))])
    aps = np.column_stack([rng.uniform(0, width, n_aps), rng.uniform(0, height, n_aps)])
    return RadioEnvironment(ap_positions=aps, width=width, height=height, seed=seed, **kwargs)


@dataclass
class Fingerprint:
    position: np.ndarray
    rssi: np.ndarray
    imu: np.ndarray
    mask: np.ndarray


@dataclass
class FingerprintDataset:
    """Radio map: N labeled samples over M APs with d IMU channels.

    Arrays: positions (N, 3) with z = floor level, rssi (N, M) dBm,
    imu (N, d), mask (N, M) bool detection indicator.
    """

    positions: np.ndarray
    rssi: np.ndarray
    imu: np.ndarray
    mask: np.ndarray
    floor: int = 0
    extent: tuple = (0.0, 0.0)
    rssi_floor: float = DEFAULT_RSSI_FLOOR

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.rssi.shape[0] != n or self.imu.shape[0] != n or self.mask.shape != self.rssi.shape:
            raise ValueError("inconsistent sample counts")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def m(self) -> int:
        return self.rssi.shape[1]

    @property
    def d(self) -> int:
        return self.imu.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> Fingerprint:
        return Fingerprint(self.positions[i], self.rssi[i], self.imu[i], self.mask[i])

    def __iter__(self):
        for i in range(self.n):
            yield self[i]

    def subset(self, idx) -> FingerprintDataset:
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        return replace(self, positions=self.positions[idx], rssi=self.rssi[idx], imu=self.imu[idx], mask=self.mask[idx])

    def equals(self, other: FingerprintDataset) -> bool:
        return (
            self.floor == other.floor
            and self.rssi_floor == other.rssi_floor
            and tuple(self.extent) == tuple(other.extent)
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in ("positions", "rssi", "imu", "mask"))
        )


def concat_datasets(parts: list[FingerprintDataset]) -> FingerprintDataset:
    first = parts[0]
    return replace(
        first,
        positions=np.concatenate([p.positions for p in parts]),
        rssi=np.concatenate([p.rssi for p in parts]),
        imu=np.concatenate([p.imu for p in parts]),
        mask=np.concatenate([p.mask for p in parts]),
    )


def _grid_positions(env: RadioEnvironment, n: int) -> np.ndarray:
    nx = max(1, int(round(math.sqrt(n * env.width / env.height))))
    ny = int(math.ceil(n / nx))
    xs = (np.arange(nx) + 0.5) * env.width / nx
    ys = (np.arange(ny) + 0.5) * env.height / ny
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])[:n]


def _trajectory(env: RadioEnvironment, n: int, rng: np.random.Generator, step: float) -> np.ndarray:
    pos = np.empty((n, 2))
    cur = rng.uniform([0, 0], [env.width, env.height])
    goal = rng.uniform([0, 0], [env.width, env.height])
    for i in range(n):
        pos[i] = cur
        delta = goal - cur
        dist = math.hypot(*delta)
        while dist < step:
            goal = rng.uniform([0, 0], [env.width, env.height])
            delta = goal - cur
            dist = math.hypot(*delta)
        cur = cur + delta * (step / dist)
    return pos


def _imu_features(env: RadioEnvironment, imu: ImuModel, xy: np.ndarray, layout: str, rng) -> np.ndarray:
    n = xy.shape[0]
    if imu.d == 0:
        return np.zeros((n, 0))
    if layout == "trajectory":
        disp = np.vstack([np.zeros((1, 2)), np.diff(xy, axis=0)])
        if n > 1:
            disp[0] = disp[1]
        heading = np.arctan2(disp[:, 1], disp[:, 0])
    else:
        disp = np.zeros((n, 2))
        heading = np.zeros(n)
    turn = np.concatenate([[0.0], np.angle(np.exp(1j * np.diff(heading)))])
    c, s = np.cos(heading), np.sin(heading)
    ex, ey, ez = imu.earth_field
    anomaly = imu.mag_anomaly * SmoothField(np.random.default_rng([env.seed, 2, env.floor]), 3, imu.mag_length)(xy)
    mag = np.array([ex, ey, ez]) + anomaly
    feats = np.column_stack([disp[:, 0], disp[:, 1], np.full(n, 9.81), c, s, turn, mag])
    return feats + rng.normal(0.0, imu.noise, size=feats.shape)


def generate_dataset(
    env: RadioEnvironment,
    n_points: int,
    layout: str = "grid",
    imu_model: ImuModel | None = None,
    seed: int = 0,
    step: float = 1.0,
) -> FingerprintDataset:
    """Sample a radio map. Pure function of (env, n_points, layout, imu_model, seed)."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    imu_model = imu_model or ImuModel()
    rng = np.random.default_rng([seed, env.seed, env.floor])
    if layout == "grid":
        xy = _grid_positions(env, n_points)
    elif layout == "trajectory":
        xy = _trajectory(env, n_points, rng, step)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    dist = env.distances(xy)
    ch = env.channel
    if env.shadowing == "iid":
        shadow = rng.normal(0.0, ch.sigma, size=dist.shape) if ch.sigma > 0 else np.zeros_like(dist)
    else:
        shadow = env.static_shadowing(xy)
    if env.noise_sigma > 0:
        shadow = shadow + rng.normal(0.0, env.noise_sigma, size=dist.shape)
    rssi = ch.p_tx - path_loss(ch, dist, shadow)
    mask = dist <= env.detection_range
    if env.dropout > 0:
        mask &= rng.uniform(size=mask.shape) >= env.dropout
    rssi = np.where(mask, rssi, env.rssi_floor)
    imu = _imu_features(env, imu_model, xy, layout, rng)
    positions = np.column_stack([xy, np.full(n_points, float(env.floor))])
    return FingerprintDataset(positions, rssi, imu, mask, floor=env.floor, extent=(env.width, env.height), rssi_floor=env.rssi_floor)


def _candidate_grid(env: RadioEnvironment, grid_step: float) -> np.ndarray:
    xs = np.arange(0.0, env.width + 1e-9, grid_step)
    ys = np.arange(0.0, env.height + 1e-9, grid_step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def ml_baseline_locate(env: RadioEnvironment, fingerprint, grid_step: float = 0.5) -> np.ndarray:
    """Maximum-likelihood position on a candidate grid.

    Sums Gaussian log-likelihoods of the detected APs' RSSI under the
    environment's free-space LDPL model (no knowledge of site shadowing).
    With sigma = 0 the argmax of the residual sum of squares is returned,
    which is the sigma -> 0 limit of the same estimator.
    """
    return ml_baseline_locate_many(env, [fingerprint], grid_step)[0]


def ml_baseline_locate_many(env: RadioEnvironment, fingerprints, grid_step: float = 0.5) -> np.ndarray:
    grid = _candidate_grid(env, grid_step)
    ch = env.channel
    pred = ch.p_tx - path_loss(ch, np.maximum(env.distances(grid), ch.d0 / 100.0))  # (G, M)
    out = []
    for fp in fingerprints:
        mask = np.asarray(fp.mask, dtype=bool)
        if not mask.any():
            raise NoInformationError("all APs masked; nothing to localize from")
        resid = pred[:, mask] - np.asarray(fp.rssi)[mask]
        # log-likelihood up to constants; sigma only rescales so argmax is sigma-free
        score = -(resid * resid).sum(axis=1)
        out.append(grid[int(np.argmax(score))])
    return np.array(out)


# ---------------------------------------------------------------- file format


def write_dataset(ds: FingerprintDataset, path) -> None:
    """Write the CSV dialect.

    Header ``#metagraphloc-v1,M=<int>,D=<int>,FLOOR=<int>``, then comment lines
    carrying the placeholder RSSI and the floor extent, then one row per sample:
    ``x,y,z,rssi_1..rssi_M,imu_1..imu_D`` with shortest round-trip float repr.
    """
    lines = [
        f"{FORMAT_TAG},M={ds.m},D={ds.d},FLOOR={ds.floor}",
        f"#rssi_floor={ds.rssi_floor!r}",
        f"#extent={float(ds.extent[0])!r},{float(ds.extent[1])!r}",
    ]
    rows = np.hstack([ds.positions, ds.rssi, ds.imu])
    lines.extend(",".join(map(repr, r)) for r in rows.tolist())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> FingerprintDataset:
    """Parse the CSV dialect; raises :class:`DatasetFormatError` with the line number."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith(FORMAT_TAG + ","):
        raise DatasetFormatError("missing or malformed header", 1)
    try:
        meta = dict(kv.split("=", 1) for kv in text[0].split(",")[1:])
        m, d, floor = int(meta["M"]), int(meta["D"]), int(meta["FLOOR"])
    except (ValueError, KeyError):
        raise DatasetFormatError(f"malformed header {text[0]!r}", 1) from None
    if m < 1 or d < 0:
        raise DatasetFormatError("M must be >= 1 and D >= 0", 1)
    rssi_floor = DEFAULT_RSSI_FLOOR
    extent = (0.0, 0.0)
    width = 3 + m + d
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            if s.startswith("#rssi_floor="):
                rssi_floor = float(s.split("=", 1)[1])
            elif s.startswith("#extent="):
                w, h = s.split("=", 1)[1].split(",")
                extent = (float(w), float(h))
            continue
        parts = s.split(",")
        if len(parts) != width:
            raise DatasetFormatError(f"expected {width} values (x,y,z + {m} RSSI + {d} IMU), got {len(parts)}", lineno)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise DatasetFormatError("unparseable number", lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetFormatError("non-finite number", lineno)
        rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    rssi = arr[:, 3:3 + m]
    return FingerprintDataset(
        positions=arr[:, :3].copy(),
        rssi=rssi.copy(),
        imu=arr[:, 3 + m:].copy(),
        mask=rssi != rssi_floor,
        floor=floor,
        extent=extent,
        rssi_floor=rssi_floor,
    )
