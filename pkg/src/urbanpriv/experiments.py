"""Experiment harness: count accuracy, sniffing, subway OD, self-id utility
and rotation properties. Every experiment returns a header and rows; the
CLI writes them as CSV.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import attack, crosslocality as xl
from .core import ValidationError
from .dp.noise import NoiseKind, NoiseSpec
from .dp.toeplitz import DEFAULT_DELTA, DEFAULT_T_MAX, batch_prefix_release, gaussian_sigma
from .dp.tree import BinaryTreeMechanism
from .query import RHO_TRACK_CONSERVATIVE, UNTRUSTED_OPERATOR_BOUND
from .runtime import ContainerConfig, ContainerSlot, Role

EXPERIMENTS = ("sniff", "count-accuracy", "subway-od", "selfid-utility", "rotation-props")

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int) -> int:
    """Child seed for a (cell, trial, ...) path: splitmix64 chained over the path."""
    s = splitmix64(master & _MASK64)
    for p in path:
        s = splitmix64(s ^ (p & _MASK64))
    return s


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


# default parameters per experiment: key -> (parser, default)
PARAMS: dict[str, dict[str, tuple[Callable, object]]] = {
    "count-accuracy": {
        "mechanism": (str, "toeplitz"),
        "windows": (_ints, tuple(range(1, 13))),
        "days": (int, 30),
        "bins_per_hour": (int, 4),
        "rate_per_hour": (float, 72.0),
        "amplitude": (float, 0.8),
        "rho_track": (float, RHO_TRACK_CONSERVATIVE),
        "untrusted_bound": (float, UNTRUSTED_OPERATOR_BOUND),
        "delta": (float, DEFAULT_DELTA),
        "t_max": (int, DEFAULT_T_MAX),
        "max_ec_sys_hours": (int, 24),
    },
    "sniff": {
        "max_ec": (_ints, attack.DEFAULT_MAX_EC_SWEEP),
        "profiles": (lambda s: tuple(x.strip() for x in s.split(",")), tuple(k.value for k in attack.ProfileKind)),
        "rows": (int, 45),
        "cols": (int, 12),
        "intensity": (float, 1.0),
        "duration": (int, 3600),
        "hub_gain": (float, 1.0),
        "hub_radius": (float, 500.0),
    },
    "subway-od": {
        "epsilons": (_floats, tuple(float(e) for e in range(1, 11)) + (math.inf,)),
        "batches": (lambda s: tuple(x.strip() for x in s.split(",")), ("hour", "day", "week")),
        "riders": (int, 100_000),
        "stations": (int, 80),
        "weeks": (int, 4),
        "eps_rep": (float, xl.DEFAULT_EPS_REP),
        "b": (float, xl.DEFAULT_LAPLACE_B),
        "population_config": (str, ""),
    },
    "selfid-utility": {
        "a_grid": (_floats, tuple(round(0.05 * i, 2) for i in range(21))),
        "p_grid": (_floats, (0.0, 0.5, 1.0)),
        "riders": (int, 100_000),
        "stations": (int, 80),
        "weeks": (int, 4),
        "hubs": (int, 8),
        "transfer_ratio": (float, xl.DEFAULT_TRANSFER_RATIO),
        "b": (float, xl.DEFAULT_LAPLACE_B),
    },
    "rotation-props": {
        "steps": (int, 10_000),
        "max_ec_hi": (int, 64),
    },
}

DEFAULT_TRIALS = {"count-accuracy": 1000, "sniff": 1, "subway-od": 1, "selfid-utility": 1, "rotation-props": 20}


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    trials: int | None = None
    output_path: str | None = None
    overrides: dict[str, str] = field(default_factory=dict)
    params: dict = field(init=False)

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.trials is None:
            self.trials = DEFAULT_TRIALS[self.experiment]
        if self.trials <= 0:
            raise ConfigError("trials must be positive")
        spec = PARAMS[self.experiment]
        self.params = {k: default for k, (_, default) in spec.items()}
        for k, v in self.overrides.items():
            if k not in spec:
                raise ConfigError(f"unknown parameter {k!r} for {self.experiment}; known: {', '.join(sorted(spec))}")
            try:
                self.params[k] = spec[k][0](v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from exc


@dataclass
class ExperimentResult:
    header: tuple[str, ...]
    rows: list[tuple]


def format_cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def write_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(result.header)
        for row in result.rows:
            w.writerow([format_cell(x) for x in row])


# --- count accuracy ----------------------------------------------------------


def synthetic_count_stream(days: int = 30, bins_per_hour: int = 4, rate_per_hour: float = 72.0,
                           amplitude: float = 0.8, seed: int = 0) -> np.ndarray:
    """Poisson counts with a daily sinusoid peaking mid-afternoon."""
    rng = np.random.Generator(np.random.PCG64(seed))
    t = np.arange(days * 24 * bins_per_hour) / bins_per_hour
    lam = rate_per_hour / bins_per_hour * (1 + amplitude * np.sin(2 * np.pi * (t - 9) / 24))
    return rng.poisson(np.clip(lam, 0, None)).astype(float)


COUNT_CONFIGS = (("trusted", 1.0), ("trusted", 0.1), ("untrusted", 1.0))


def _window_truth(stream: np.ndarray, bins_per_window: int) -> np.ndarray:
    n = len(stream) // bins_per_window
    return stream[: n * bins_per_window].reshape(n, bins_per_window).sum(axis=1)


def mean_rmsre(estimates: np.ndarray, truth: np.ndarray) -> float:
    """Average over trials (rows) of the per-trial RMSRE over positive-truth windows."""
    pos = truth > 0
    rel = (estimates[:, pos] - truth[pos]) / truth[pos]
    return float(np.mean(np.sqrt(np.mean(rel**2, axis=1))))


def _toeplitz_windows(truth: np.ndarray, sens: float, eps: float, trials: int, seed: int,
                      delta: float, t_max: int) -> np.ndarray:
    sigma = gaussian_sigma(sens, eps, delta, t_max)
    z = sigma * np.random.Generator(np.random.PCG64(seed)).standard_normal((trials, len(truth)))
    prefix = batch_prefix_release(truth, z, t_max)
    return np.diff(prefix, axis=1, prepend=0.0)


def _tree_windows(truth: np.ndarray, n: int, sens: float, eps: float, trials: int, seed: int) -> np.ndarray:
    eps_node = eps / (math.log2(n) + 2)
    tree = BinaryTreeMechanism(n, NoiseSpec(NoiseKind.LAPLACE, sens / eps_node, seed))
    leaves = []
    for y in truth:
        recs = tree.add_leaf(np.full(trials, y))
        leaves.append(next(r.noisy_value for r in recs if r.depth == tree.h))
        if tree.leaf_idx == n:
            tree.container_end()
    return np.stack(leaves, axis=1)


def run_count_accuracy(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    mech = p["mechanism"]
    if mech not in ("toeplitz", "tree"):
        raise ConfigError("mechanism must be toeplitz or tree")
    stream = synthetic_count_stream(p["days"], p["bins_per_hour"], p["rate_per_hour"], p["amplitude"],
                                    derive_seed(cfg.seed, 0))
    # the untrusted operator bound clamps each raw record before aggregation
    clamped = np.clip(stream, 0, p["untrusted_bound"])
    rows = []
    for wi, hours in enumerate(p["windows"]):
        if hours <= 0:
            raise ConfigError("window lengths must be positive")
        n_leaves = None
        if mech == "tree":
            span = p["max_ec_sys_hours"]
            if span % hours or not _is_pow2(span // hours) or span // hours < 2:
                raise ConfigError(f"window {hours} h is not a dyadic fraction of {span} h")
            n_leaves = span // hours
        for ci, (mode, eps) in enumerate(COUNT_CONFIGS):
            src = stream if mode == "trusted" else clamped
            sens = p["rho_track"] if mode == "trusted" else p["untrusted_bound"]
            truth = _window_truth(src, hours * p["bins_per_hour"])
            if mech == "tree":
                truth = truth[: len(truth) - len(truth) % n_leaves]
            if len(truth) > p["t_max"] and mech == "toeplitz":
                raise ConfigError(f"{len(truth)} windows exceed t_max={p['t_max']}")
            seed = derive_seed(cfg.seed, 1, wi, ci)
            if mech == "tree":
                est = _tree_windows(truth, n_leaves, sens, eps, cfg.trials, seed)
            else:
                est = _toeplitz_windows(truth, sens, eps, cfg.trials, seed, p["delta"], p["t_max"])
            rows.append((hours, mode, eps, sens, mech, mean_rmsre(est, truth)))
    return ExperimentResult(("window_hours", "mode", "epsilon", "sensitivity", "mechanism", "rmsre"), rows)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


# --- sniffing ----------------------------------------------------------------


def run_sniff(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    try:
        kinds = [attack.ProfileKind(k) for k in p["profiles"]]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if any(ec <= 0 for ec in p["max_ec"]):
        raise ConfigError("max_ec values must be positive")
    grid = attack.CityGrid(p["rows"], p["cols"])
    rows = []
    for trial in range(cfg.trials):
        traffic = attack.generate_traffic(grid, p["intensity"], derive_seed(cfg.seed, trial), p["duration"],
                                          p["hub_gain"], p["hub_radius"])
        for kind, ec, frac, n in attack.sniff_sweep(grid, traffic, kinds, p["max_ec"]):
            rows.append((trial, kind, ec, frac, n))
    return ExperimentResult(("trial", "profile", "maxEC_seconds", "captureFraction", "intersectionsVisited"), rows)


# --- subway OD -----------------------------------------------------------------


def _population(p: dict, seed: int) -> xl.RiderPopulation:
    if p.get("population_config"):
        cfg = xl.read_kv_file(p["population_config"])
        cfg.setdefault("seed", str(seed))
        return xl.population_from_config(cfg)
    return xl.RiderPopulation(riders=p["riders"], stations=p["stations"], seed=seed)


def run_subway_od(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    if any(not e > 0 for e in p["epsilons"]):
        raise ConfigError("epsilons must be positive")
    try:
        batches = [xl.Batch(b) for b in p["batches"]]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = []
    for trial in range(cfg.trials):
        pop = _population(p, derive_seed(cfg.seed, trial, 0) % (1 << 32))
        trips = xl.generate_trips(pop, p["weeks"], derive_seed(cfg.seed, trial, 1))
        truths = {b: xl.od_counts(trips, b) for b in batches}
        for eps in p["epsilons"]:
            mask = xl.simulate_reports(trips, eps, p["eps_rep"])
            for b in batches:
                rep = xl.od_counts(trips, b, mask)
                rows.append((trial, eps, b.value, xl.expected_rmsre(rep.bins, truths[b].bins, p["b"]),
                             1.0 - float(mask.mean()), float(truths[b].bins[truths[b].bins > 0].mean())))
    return ExperimentResult(("trial", "epsilon", "batch", "rmsre", "suppressed_fraction", "mean_bin_count"), rows)


# --- self identification -----------------------------------------------------


def run_selfid(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    rows = []
    for trial in range(cfg.trials):
        pop = xl.RiderPopulation(riders=p["riders"], stations=p["stations"],
                                 seed=derive_seed(cfg.seed, trial, 0) % (1 << 32))
        trips = xl.generate_trips(pop, p["weeks"], derive_seed(cfg.seed, trial, 1))
        truth = xl.od_counts(trips, xl.Batch.WEEK)
        transfers = xl.generate_transfers(truth, xl.hub_stations(pop, p["hubs"]), p["transfer_ratio"])
        for a, pp, f1, r in xl.selfid_sweep(truth, transfers, p["a_grid"], p["p_grid"], p["b"]):
            rows.append((trial, a, pp, f1, r))
    return ExperimentResult(("trial", "a", "p", "f1", "rmsre"), rows)


# --- rotation properties -------------------------------------------------------


@dataclass
class RotationReport:
    min_ec: int
    max_ec: int
    steps: int
    min_window: int
    max_window: int
    max_live: int
    stale_frames: int
    readable_after_teardown: int
    tumbling_partition: bool | None


def check_rotation(min_ec: int, max_ec: int, steps: int, emit_every: int = 1) -> RotationReport:
    """Drive one slot and assert nothing; returns the observed extremes."""
    with warnings.catch_warnings():
        # random configs routinely have min_ec > max_ec / 2
        warnings.simplefilter("ignore")
        slot = ContainerSlot(ContainerConfig(min_ec, max_ec, Role.APPLICATION, max_ec_app=max_ec), name="rot")
    lo, hi, live_max, stale, leaked = math.inf, 0, 0, 0, 0
    emitted = []
    for i in range(steps):
        events = slot.advance_frame(i)
        live_max = max(live_max, len(slot.live_instances()))
        win = slot.visible_window()
        if not win.warming:
            lo, hi = min(lo, len(win)), max(hi, len(win))
        stale += sum(1 for j in win.indices if j < i - max_ec + 1)
        if events:
            torn = {iid for ev, iid in events if ev.value == "tornDown"}
            leaked += sum(1 for rec in emitted if rec.producer_instance in torn and slot.buffer.readable(rec))
            emitted = [rec for rec in emitted if rec.producer_instance not in torn]
        if i % emit_every == 0:
            emitted.append(slot.emit_output(b"x"))
    tumbling = None
    if min_ec == 0:
        tumbling = _tumbling_ok(slot, steps, max_ec)
    return RotationReport(min_ec, max_ec, steps, 0 if lo is math.inf else int(lo), hi, live_max, stale,
                          leaked, tumbling)


def _tumbling_ok(slot: ContainerSlot, steps: int, max_ec: int) -> bool:
    """With minEC = 0 each instance must see one disjoint block of maxEC frames."""
    starts = [inst.first_frame for inst in slot.history]
    expected = list(range(0, steps, max_ec))
    seen_counts = [inst.frame_count for inst in slot.history]
    full = all(c == max_ec for c in seen_counts[:-1]) and 0 < seen_counts[-1] <= max_ec
    return starts == expected and full and sum(seen_counts) == steps


def run_rotation_props(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, 0)))
    rows = []
    for trial in range(cfg.trials):
        max_ec = int(rng.integers(2, p["max_ec_hi"] + 1))
        # every fourth config is tumbling
        min_ec = 0 if trial % 4 == 0 else int(rng.integers(1, max_ec // 2 + 1))
        r = check_rotation(min_ec, max_ec, p["steps"], emit_every=int(rng.integers(1, 4)))
        rows.append((trial, r.min_ec, r.max_ec, r.steps, r.min_window, r.max_window, r.max_live,
                     r.stale_frames, r.readable_after_teardown,
                     "" if r.tumbling_partition is None else r.tumbling_partition))
    return ExperimentResult(("trial", "minEC", "maxEC", "steps", "minWindow", "maxWindow", "maxLive",
                             "staleFrames", "readableAfterTeardown", "tumblingPartition"), rows)


RUNNERS = {
    "count-accuracy": run_count_accuracy,
    "sniff": run_sniff,
    "subway-od": run_subway_od,
    "selfid-utility": run_selfid,
    "rotation-props": run_rotation_props,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    try:
        return RUNNERS[cfg.experiment](cfg)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
