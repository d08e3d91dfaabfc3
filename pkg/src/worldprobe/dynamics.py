"""Ground-truth trajectories for the two-body and harmonic-oscillator systems.

The two-body problem is reduced to a test particle (the planet, mass ``m1``)
orbiting a star of mass ``m2`` pinned at the origin.  Both systems are
integrated with velocity Verlet; ``dt`` is the observation interval and each
interval may be split into ``substeps`` integration steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

TWO_BODY = "two_body"
OSCILLATOR = "oscillator"
SYSTEM_KINDS = (TWO_BODY, OSCILLATOR)

SPLIT_ROLES = ("ssl_train", "probe_train", "ft_task", "ood_test")


class InvalidSpecError(ValueError):
    pass


class TrajectoryTruncatedError(RuntimeError):
    """The planet came closer to the star than ``r_min_guard``."""

    def __init__(self, step: int, radius: float):
        super().__init__(f"separation {radius:.4g} below guard at step {step}")
        self.step = step
        self.radius = radius


class UnsupportedTargetError(KeyError):
    pass


class InvalidSplitError(ValueError):
    pass


@dataclass(frozen=True)
class SystemSpec:
    system_kind: str = TWO_BODY
    G: float = 1.0
    m1: float = 1.0
    m2: float = 1.0
    k: float = 1.0
    dt: float = 1e-3
    steps: int = 1000
    r_min_guard: float = 0.3
    substeps: int = 1

    def __post_init__(self):
        if self.system_kind not in SYSTEM_KINDS:
            raise InvalidSpecError(f"unknown system kind {self.system_kind!r}")
        for name in ("G", "m1", "m2", "k", "dt"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidSpecError(f"{name} must be strictly positive, got {value}")
        if self.steps < 2:
            raise InvalidSpecError("steps must be >= 2")
        if self.substeps < 1:
            raise InvalidSpecError("substeps must be >= 1")
        if self.system_kind == TWO_BODY and not self.r_min_guard > 0:
            raise InvalidSpecError("r_min_guard must be > 0 for two_body")

    @property
    def obs_dim(self) -> int:
        return 2 if self.system_kind == TWO_BODY else 1


@dataclass
class Trajectory:
    spec: SystemSpec
    observations: np.ndarray  # (steps, obs_dim), positions only
    full_states: np.ndarray  # (steps, 2 * obs_dim), position then velocity
    targets: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (steps, k)
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        n = self.spec.steps
        if len(self.observations) != n or len(self.full_states) != n:
            raise ValueError("observation/state length does not match spec.steps")
        for name, series in self.targets.items():
            if len(series) != n:
                raise ValueError(f"target {name!r} has wrong length")

    @property
    def positions(self) -> np.ndarray:
        return self.full_states[:, : self.spec.obs_dim]

    @property
    def velocities(self) -> np.ndarray:
        return self.full_states[:, self.spec.obs_dim :]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.spec.steps) * self.spec.dt


@dataclass
class DatasetSplit:
    role: str
    trajectories: list[Trajectory]
    generator_ranges: dict[str, tuple[float, float]]
    system_kind: str = TWO_BODY
    seed: int = 0

    def __post_init__(self):
        if self.role not in SPLIT_ROLES:
            raise InvalidSplitError(f"unknown split role {self.role!r}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def param_values(self, name: str) -> np.ndarray:
        return np.array([t.params[name] for t in self.trajectories], dtype=np.float64)


# --------------------------------------------------------------------------
# integrators


def _two_body_accel(pos: np.ndarray, gm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(pos[..., 0] ** 2 + pos[..., 1] ** 2)
    acc = -(gm / r**3)[..., None] * pos
    return acc, r


def _verlet_two_body(pos, vel, gm, h, n_out, substeps, guard):
    """Batched velocity Verlet; returns states at every observation step.

    ``pos``/``vel`` have shape (B, 2) and ``gm`` shape (B,).  Elementwise
    arithmetic only, so a batch of one reproduces the batched result exactly.
    """
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    batch = pos.shape[0]
    out_pos = np.empty((batch, n_out, 2))
    out_vel = np.empty((batch, n_out, 2))
    fail_step = np.full(batch, -1, dtype=np.int64)
    fail_r = np.full(batch, np.nan)
    acc, r = _two_body_accel(pos, gm)
    bad = r < guard
    fail_step[bad] = 0
    fail_r[bad] = r[bad]
    out_pos[:, 0] = pos
    out_vel[:, 0] = vel
    for step in range(1, n_out):
        for _ in range(substeps):
            vel = vel + (0.5 * h) * acc
            pos = pos + h * vel
            acc, r = _two_body_accel(pos, gm)
            vel = vel + (0.5 * h) * acc
            bad = (r < guard) & (fail_step < 0)
            if bad.any():
                fail_step[bad] = step
                fail_r[bad] = r[bad]
        out_pos[:, step] = pos
        out_vel[:, step] = vel
    return out_pos, out_vel, fail_step, fail_r


def _verlet_oscillator(pos, vel, omega2, h, n_out, substeps):
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    out_pos = np.empty((pos.shape[0], n_out))
    out_vel = np.empty((pos.shape[0], n_out))
    out_pos[:, 0] = pos
    out_vel[:, 0] = vel
    acc = -omega2 * pos
    for step in range(1, n_out):
        for _ in range(substeps):
            vel = vel + (0.5 * h) * acc
            pos = pos + h * vel
            acc = -omega2 * pos
            vel = vel + (0.5 * h) * acc
        out_pos[:, step] = pos
        out_vel[:, step] = vel
    return out_pos, out_vel


def integrate(spec: SystemSpec, position, velocity, n: int, dt: float | None = None):
    """Advance one state ``n`` integration steps of size ``dt`` (may be negative).

    Returns the final (position, velocity).  Used for reversibility checks;
    no guard is applied.
    """
    h = spec.dt / spec.substeps if dt is None else float(dt)
    if spec.system_kind == TWO_BODY:
        p, v, _, _ = _verlet_two_body(
            np.reshape(position, (1, 2)), np.reshape(velocity, (1, 2)),
            np.array([spec.G * spec.m2]), h, 2, n, 0.0,
        )
        return p[0, -1], v[0, -1]
    p, v = _verlet_oscillator(
        np.reshape(position, (1,)), np.reshape(velocity, (1,)), spec.k / spec.m1, h, 2, n
    )
    return p[0, -1], v[0, -1]


def simulate_two_body(spec: SystemSpec, init_position, init_velocity) -> Trajectory:
    if spec.system_kind != TWO_BODY:
        raise InvalidSpecError("simulate_two_body needs a two_body spec")
    init_position = np.asarray(init_position, dtype=np.float64).reshape(2)
    init_velocity = np.asarray(init_velocity, dtype=np.float64).reshape(2)
    pos, vel, fail, fail_r = _verlet_two_body(
        init_position[None], init_velocity[None], np.array([spec.G * spec.m2]),
        spec.dt / spec.substeps, spec.steps, spec.substeps, spec.r_min_guard,
    )
    if fail[0] >= 0:
        raise TrajectoryTruncatedError(int(fail[0]), float(fail_r[0]))
    return Trajectory(spec, pos[0].copy(), np.hstack([pos[0], vel[0]]))


def simulate_oscillator(spec: SystemSpec, init_position: float, init_velocity: float) -> Trajectory:
    if spec.system_kind != OSCILLATOR:
        raise InvalidSpecError("simulate_oscillator needs an oscillator spec")
    pos, vel = _verlet_oscillator(
        np.array([float(init_position)]), np.array([float(init_velocity)]),
        spec.k / spec.m1, spec.dt / spec.substeps, spec.steps, spec.substeps,
    )
    return Trajectory(spec, pos[0][:, None].copy(), np.stack([pos[0], vel[0]], axis=1))


def energy_series(traj: Trajectory) -> np.ndarray:
    s = traj.spec
    x, v = traj.positions, traj.velocities
    kinetic = 0.5 * s.m1 * np.sum(v * v, axis=1)
    if s.system_kind == TWO_BODY:
        return kinetic - s.G * s.m1 * s.m2 / np.linalg.norm(x, axis=1)
    return kinetic + 0.5 * s.k * np.sum(x * x, axis=1)


def max_energy_deviation(traj: Trajectory) -> float:
    e = energy_series(traj)
    return float(np.max(np.abs(e - e[0])) / abs(e[0]))


def secular_energy_drift(energy: np.ndarray, window: int) -> float:
    """Relative change between the mean energy of the first and last ``window`` samples.

    With ``window`` spanning whole periods of the bounded Verlet energy
    oscillation, the oscillation averages out and only secular drift remains.
    """
    energy = np.asarray(energy, dtype=np.float64)
    if not 1 <= window <= len(energy):
        raise ValueError("window must fit inside the series")
    head = energy[:window].mean()
    tail = energy[-window:].mean()
    return float(abs(tail - head) / abs(energy[0]))


def angular_momentum(traj: Trajectory) -> np.ndarray:
    x, v = traj.positions, traj.velocities
    return traj.spec.m1 * (x[:, 0] * v[:, 1] - x[:, 1] * v[:, 0])


# --------------------------------------------------------------------------
# target functionals


def _two_body_target(name: str, spec: SystemSpec) -> Callable[[np.ndarray], np.ndarray]:
    gmm = spec.G * spec.m1 * spec.m2

    def force(s):
        r = np.sqrt(s[..., 0] ** 2 + s[..., 1] ** 2)
        return -(gmm / r**3)[..., None] * s[..., :2]

    table = {
        "force": force,
        "force_magnitude": lambda s: (gmm / (s[..., 0] ** 2 + s[..., 1] ** 2))[..., None],
        "speed": lambda s: np.sqrt(s[..., 2] ** 2 + s[..., 3] ** 2)[..., None],
        "radius": lambda s: np.sqrt(s[..., 0] ** 2 + s[..., 1] ** 2)[..., None],
        "momentum": lambda s: spec.m1 * s[..., 2:4],
        "kinetic_energy": lambda s: (0.5 * spec.m1 * (s[..., 2] ** 2 + s[..., 3] ** 2))[..., None],
        "potential_energy": lambda s: (-gmm / np.sqrt(s[..., 0] ** 2 + s[..., 1] ** 2))[..., None],
        "mass": lambda s: np.full(s.shape[:-1] + (1,), spec.m2),
    }
    table["energy"] = lambda s: table["kinetic_energy"](s) + table["potential_energy"](s)
    if name not in table:
        raise UnsupportedTargetError(name)
    return table[name]


def _oscillator_target(name: str, spec: SystemSpec) -> Callable[[np.ndarray], np.ndarray]:
    table = {
        "momentum": lambda s: spec.m1 * s[..., 1:2],
        "speed": lambda s: np.abs(s[..., 1:2]),
        "position": lambda s: s[..., 0:1],
        "force": lambda s: -spec.k * s[..., 0:1],
        "kinetic_energy": lambda s: 0.5 * spec.m1 * s[..., 1:2] ** 2,
        "potential_energy": lambda s: 0.5 * spec.k * s[..., 0:1] ** 2,
        "mass": lambda s: np.full(s.shape[:-1] + (1,), spec.m1),
    }
    table["energy"] = lambda s: table["kinetic_energy"](s) + table["potential_energy"](s)
    if name not in table:
        raise UnsupportedTargetError(name)
    return table[name]


def target_function(name: str, spec: SystemSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised map from full states (..., 2*obs_dim) to target values (..., k)."""
    if spec.system_kind == TWO_BODY:
        return _two_body_target(name, spec)
    return _oscillator_target(name, spec)


def target_dim(name: str, system_kind: str) -> int:
    if system_kind == TWO_BODY and name in ("force", "momentum"):
        return 2
    return 1


def compute_targets(traj: Trajectory, target_names: Iterable[str]) -> Trajectory:
    names = list(target_names)
    fns = {name: target_function(name, traj.spec) for name in names}
    targets = dict(traj.targets)
    for name, fn in fns.items():
        targets[name] = np.ascontiguousarray(fn(traj.full_states), dtype=np.float64)
    return replace(traj, targets=targets)


# --------------------------------------------------------------------------
# dataset sampling

DEFAULT_RANGES = {
    TWO_BODY: {
        "m2": (0.5, 2.0),
        "G": (1.0, 1.0),
        "m1": (1.0, 1.0),
        "speed_factor": (0.8, 1.2),
        "r0": (1.0, 1.5),
        "angle": (0.0, 2 * math.pi),
    },
    OSCILLATOR: {
        "amplitude": (0.5, 1.5),
        "phase": (0.0, 2 * math.pi),
        "k": (1.0, 1.0),
        "m1": (1.0, 1.0),
    },
}


def _check_ranges(ranges: Mapping[str, tuple[float, float]]) -> dict[str, tuple[float, float]]:
    out = {}
    for name, (lo, hi) in ranges.items():
        lo, hi = float(lo), float(hi)
        if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
            raise InvalidSplitError(f"empty or invalid interval for {name!r}: [{lo}, {hi}]")
        out[name] = (lo, hi)
    return out


def _contained(inner: Mapping, outer: Mapping) -> bool:
    for name, (lo, hi) in inner.items():
        if name not in outer:
            return False
        olo, ohi = outer[name]
        if lo < olo or hi > ohi:
            return False
    return True


def _has_disjoint(ranges: Mapping, reference: Mapping) -> bool:
    for name, (lo, hi) in ranges.items():
        if name in reference:
            rlo, rhi = reference[name]
            if hi < rlo or lo > rhi:
                return True
    return False


def sample_dataset(
    ranges: Mapping[str, tuple[float, float]],
    n_trajectories: int,
    role: str,
    seed: int,
    *,
    base: SystemSpec | None = None,
    reference: Mapping[str, tuple[float, float]] | None = None,
    targets: Iterable[str] = (),
) -> DatasetSplit:
    """Draw ``n_trajectories`` simulations with parameters uniform on ``ranges``.

    ``reference`` is the ssl_train range map; it is required for the
    ``probe_train`` (containment) and ``ood_test`` (disjointness) roles.
    Parameters absent from ``ranges`` take their defaults.
    """
    if n_trajectories < 0:
        raise InvalidSplitError("n_trajectories must be >= 0")
    if role not in SPLIT_ROLES:
        raise InvalidSplitError(f"unknown split role {role!r}")
    base = base or SystemSpec(dt=0.1, steps=48, substeps=100)
    kind = base.system_kind
    full = dict(DEFAULT_RANGES[kind])
    full.update(_check_ranges(ranges))
    if role == "probe_train":
        if reference is None or not _contained(full, _check_ranges(reference)):
            raise InvalidSplitError("probe_train ranges must lie inside the declared ssl_train ranges")
    if role == "ood_test":
        if reference is None or not _has_disjoint(full, _check_ranges(reference)):
            raise InvalidSplitError("ood_test needs an interval disjoint from the ssl_train ranges")

    rng = np.random.default_rng(seed)
    names = sorted(full)
    draws = {name: np.empty(n_trajectories) for name in names}
    for name in names:
        lo, hi = full[name]
        draws[name] = rng.uniform(lo, hi, size=n_trajectories) if hi > lo else np.full(n_trajectories, lo)

    if kind == TWO_BODY:
        trajs = _sample_two_body(base, draws, n_trajectories, rng)
    else:
        trajs = _sample_oscillator(base, draws, n_trajectories)
    if targets:
        trajs = [compute_targets(t, targets) for t in trajs]
    return DatasetSplit(role, trajs, full, kind, seed)


def _sample_two_body(base, draws, n, rng, max_retries=20):
    gm = draws["G"] * draws["m2"]
    theta = draws["angle"]
    r0 = draws["r0"]
    speed = draws["speed_factor"] * np.sqrt(gm / r0)
    pos = np.stack([r0 * np.cos(theta), r0 * np.sin(theta)], axis=1)
    vel = np.stack([-speed * np.sin(theta), speed * np.cos(theta)], axis=1)
    h = base.dt / base.substeps
    out_pos, out_vel, fail, _ = _verlet_two_body(pos, vel, gm, h, base.steps, base.substeps, base.r_min_guard)
    if (fail >= 0).any():
        raise TrajectoryTruncatedError(int(fail[fail >= 0][0]), float("nan"))
    trajs = []
    for i in range(n):
        spec = replace(base, G=float(draws["G"][i]), m1=float(draws["m1"][i]), m2=float(draws["m2"][i]))
        params = {name: float(values[i]) for name, values in draws.items()}
        params["trajectory_id"] = i
        trajs.append(
            Trajectory(spec, out_pos[i].copy(), np.hstack([out_pos[i], out_vel[i]]), {}, params)
        )
    return trajs


def _sample_oscillator(base, draws, n):
    omega2 = draws["k"] / draws["m1"]
    omega = np.sqrt(omega2)
    pos = draws["amplitude"] * np.cos(draws["phase"])
    vel = -draws["amplitude"] * omega * np.sin(draws["phase"])
    out_pos, out_vel = _verlet_oscillator(pos, vel, omega2, base.dt / base.substeps, base.steps, base.substeps)
    trajs = []
    for i in range(n):
        spec = replace(base, k=float(draws["k"][i]), m1=float(draws["m1"][i]))
        params = {name: float(values[i]) for name, values in draws.items()}
        params["trajectory_id"] = i
        trajs.append(
            Trajectory(spec, out_pos[i][:, None].copy(), np.stack([out_pos[i], out_vel[i]], axis=1), {}, params)
        )
    return trajs


def with_targets(split: DatasetSplit, target_names: Iterable[str]) -> DatasetSplit:
    names = list(target_names)
    return replace(split, trajectories=[compute_targets(t, names) for t in split.trajectories])


@dataclass
class DistributionStats:
    variable: str
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    variance: float
    n: int


def dataset_stats(split: DatasetSplit, variable: str, bins: int) -> DistributionStats:
    """Histogram and moments of a generator parameter or (pooled) target series."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if split.trajectories and variable in split.trajectories[0].params:
        values = split.param_values(variable)
    elif split.trajectories and variable in split.trajectories[0].targets:
        values = np.concatenate([np.ravel(t.targets[variable]) for t in split.trajectories])
    elif variable in split.generator_ranges and not split.trajectories:
        values = np.empty(0)
    else:
        raise KeyError(f"{variable!r} is neither a parameter nor a computed target")
    if values.size == 0:
        return DistributionStats(variable, np.zeros(bins, dtype=np.int64), np.linspace(0, 1, bins + 1),
                                 float("nan"), float("nan"), 0)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return DistributionStats(variable, counts, edges, float(values.mean()), float(values.var()), int(values.size))
