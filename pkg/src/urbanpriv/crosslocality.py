"""Device-mediated origin-destination measurement on a synthetic metro.

Riders enter and exit stations; each exit produces a report charged against
the rider's weekly budget. Reports past the budget become nulls. Exit
stations aggregate reports into OD histograms per batch (hour, day, week) and
add Laplace noise.

Each synthetic rider stands for ``weight`` identical riders, so bin counts
reach realistic magnitudes without simulating millions of devices.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .core import ValidationError
from .dp.noise import NoiseKind, NoiseSampler, NoiseSpec
from .ledger import DeviceLedger, ReportOutcome

DEFAULT_EPS_REP = 0.5
DEFAULT_LAPLACE_B = 2.0
TARGET_WEEKLY_BIN_MEAN = 1140.0
# transfer events relative to trips in the reference dataset (13.6M / 29.2M)
DEFAULT_TRANSFER_RATIO = 13.6 / 29.2

HOURS_PER_DAY = 24
DAYS_PER_WEEK = 7


@dataclass(frozen=True)
class Measurement:
    """Registered cross-locality measurement, broadcast by entry stations."""

    measurement_id: str
    eps_rep: float = DEFAULT_EPS_REP

    def __post_init__(self) -> None:
        if not self.eps_rep > 0:
            raise ValidationError("eps_rep must be positive")

    def entry_instruction(self, station: int, t: int) -> dict:
        return {"op": "recordEntry", "measurement": self.measurement_id, "station": station, "time": t}

    def exit_instruction(self, entry_station: int, elapsed: int) -> dict:
        return {"op": "reportTrip", "measurement": self.measurement_id,
                "entryStation": entry_station, "elapsed": elapsed}


class Batch(str, enum.Enum):
    HOUR = "hour"
    DAY = "day"
    WEEK = "week"


def weekly_trip_pmf(max_trips: int = 120, regular_share: float = 0.93,
                    regular_p: float = 0.55, heavy_r: float = 1.5, heavy_mean: float = 7.0) -> np.ndarray:
    """Weekly trip-count distribution.

    A ``regular_share`` of riders make 1..10 trips (1 + Binomial(9, p)); the
    rest make 11 + NegBin trips. P(<= 10 trips) equals ``regular_share``.
    """
    k = np.arange(max_trips + 1)
    reg = np.zeros(max_trips + 1)
    reg[1:11] = stats.binom.pmf(np.arange(10), 9, regular_p)
    heavy = np.zeros(max_trips + 1)
    heavy[11:] = stats.nbinom.pmf(k[11:] - 11, heavy_r, heavy_r / (heavy_r + heavy_mean))
    heavy /= heavy.sum()
    pmf = regular_share * reg + (1 - regular_share) * heavy
    return pmf / pmf.sum()


def default_hour_profile() -> np.ndarray:
    """Relative trip intensity per hour; the metro is closed 00:00-06:00."""
    h = np.arange(HOURS_PER_DAY)
    prof = (1.0 + 1.2 * np.exp(-0.5 * ((h - 8) / 1.3) ** 2)
            + 1.0 * np.exp(-0.5 * ((h - 18) / 1.5) ** 2))
    prof[h < 6] = 0.0
    return prof / prof.sum()


@dataclass
class RiderPopulation:
    riders: int = 100_000
    stations: int = 80
    trip_pmf: np.ndarray = field(default_factory=weekly_trip_pmf)
    od_propensity: np.ndarray | None = None
    hour_profile: np.ndarray = field(default_factory=default_hour_profile)
    weight: int | None = None
    popularity_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.riders <= 0 or self.stations <= 1:
            raise ValidationError("population needs at least one rider and two stations")
        pmf = np.asarray(self.trip_pmf, dtype=float)
        if np.any(pmf < 0) or not math.isclose(pmf.sum(), 1.0, rel_tol=1e-9):
            raise ValidationError("trip distribution must be a probability vector")
        self.trip_pmf = pmf
        if self.od_propensity is None:
            self.od_propensity = default_od_propensity(self.stations, self.popularity_sigma, self.seed)
        prop = np.asarray(self.od_propensity, dtype=float)
        if prop.shape != (self.stations, self.stations) or np.any(prop < 0):
            raise ValidationError("OD propensity must be a non-negative S x S matrix")
        self.od_propensity = prop / prop.sum(axis=1, keepdims=True)
        if self.weight is None:
            self.weight = calibrate_weight(self)

    @property
    def mean_weekly_trips(self) -> float:
        return float(np.dot(np.arange(len(self.trip_pmf)), self.trip_pmf))

    def flat_od(self) -> np.ndarray:
        """Joint P(origin, dest): origins uniform, rows from the propensity."""
        joint = self.od_propensity / self.stations
        return (joint / joint.sum()).ravel()


_POP_KEYS = {"riders": int, "stations": int, "weight": int, "popularity_sigma": float, "seed": int,
             "regular_share": float, "regular_p": float, "heavy_r": float, "heavy_mean": float,
             "max_trips": int}


def read_kv_file(path) -> dict[str, str]:
    """Flat ``key=value`` text; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def population_from_config(cfg: dict) -> RiderPopulation:
    unknown = set(cfg) - set(_POP_KEYS)
    if unknown:
        raise ValidationError(f"unknown population keys: {sorted(unknown)}")
    try:
        vals = {k: _POP_KEYS[k](v) for k, v in cfg.items()}
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    pmf_args = {k: vals.pop(k) for k in ("regular_share", "regular_p", "heavy_r", "heavy_mean", "max_trips")
                if k in vals}
    return RiderPopulation(trip_pmf=weekly_trip_pmf(**pmf_args), **vals)


def default_od_propensity(stations: int, sigma: float = 0.1, seed: int = 0) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5EED))
    pop = rng.lognormal(0.0, sigma, size=stations)
    prop = np.outer(pop, pop)
    np.fill_diagonal(prop, 0.0)
    return prop / prop.sum(axis=1, keepdims=True)


def calibrate_weight(pop: RiderPopulation, target: float = TARGET_WEEKLY_BIN_MEAN) -> int:
    """Replication factor that puts the weekly mean off-diagonal bin near ``target``."""
    bins = pop.stations * (pop.stations - 1)
    return max(1, int(round(target * bins / (pop.riders * pop.mean_weekly_trips))))


@dataclass
class TripTable:
    """Trips sorted by (rider, time). ``t`` is seconds since the start of week 0."""

    rider: np.ndarray
    t: np.ndarray
    origin: np.ndarray
    dest: np.ndarray
    weeks: int
    stations: int
    weight: int = 1

    def __len__(self) -> int:
        return len(self.rider)

    @property
    def week(self) -> np.ndarray:
        return self.t // (DAYS_PER_WEEK * 86_400)

    @property
    def day(self) -> np.ndarray:
        return self.t // 86_400

    @property
    def hour(self) -> np.ndarray:
        return self.t // 3600

    def weekly_counts(self, riders: int) -> np.ndarray:
        out = np.zeros((riders, self.weeks), dtype=np.int64)
        np.add.at(out, (self.rider, self.week), 1)
        return out


def generate_trips(pop: RiderPopulation, weeks: int = 4, seed: int = 0) -> TripTable:
    if pop.riders <= 0:
        raise ValidationError("empty population")
    if weeks <= 0:
        raise ValidationError("weeks must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    counts = rng.choice(len(pop.trip_pmf), size=(pop.riders, weeks), p=pop.trip_pmf)
    total = int(counts.sum())
    rider = np.repeat(np.repeat(np.arange(pop.riders), weeks), counts.ravel())
    week = np.repeat(np.tile(np.arange(weeks), pop.riders), counts.ravel())
    day = rng.integers(0, DAYS_PER_WEEK, size=total)
    hour = rng.choice(HOURS_PER_DAY, size=total, p=pop.hour_profile)
    sec = rng.integers(0, 3600, size=total)
    t = ((week * DAYS_PER_WEEK + day) * HOURS_PER_DAY + hour) * 3600 + sec
    od = rng.choice(pop.stations**2, size=total, p=pop.flat_od())
    order = np.lexsort((t, rider))
    return TripTable(rider[order], t[order], (od // pop.stations)[order], (od % pop.stations)[order],
                     weeks, pop.stations, int(pop.weight))


def _rank_within_week(trips: TripTable) -> np.ndarray:
    key = trips.rider.astype(np.int64) * (trips.weeks + 1) + trips.week
    starts = np.r_[0, np.flatnonzero(np.diff(key)) + 1]
    first = np.repeat(starts, np.diff(np.r_[starts, len(key)]))
    return np.arange(len(key)) - first


def reports_per_epoch(epsilon: float, eps_rep: float = DEFAULT_EPS_REP) -> float:
    if math.isinf(epsilon):
        return math.inf
    return math.floor(epsilon / eps_rep * (1 + 1e-12))


def simulate_reports(trips: TripTable, epsilon: float, eps_rep: float = DEFAULT_EPS_REP,
                     use_ledger: bool = False) -> np.ndarray:
    """Boolean mask of trips that produce real reports.

    Budgets are weekly and consumed chronologically. With ``use_ledger`` each
    rider runs an actual :class:`DeviceLedger`; the default computes the same
    outcome from within-week trip ranks.
    """
    if not eps_rep > 0:
        raise ValidationError("eps_rep must be positive")
    if use_ledger:
        ledgers: dict[int, DeviceLedger] = {}
        mask = np.zeros(len(trips), dtype=bool)
        weeks = trips.week
        for i, (r, w) in enumerate(zip(trips.rider.tolist(), weeks.tolist())):
            led = ledgers.get(r)
            if led is None:
                led = ledgers[r] = DeviceLedger(str(r), epoch_capacity=epsilon)
            mask[i] = led.charge_report(w, eps_rep) is ReportOutcome.REAL
        return mask
    allowed = reports_per_epoch(epsilon, eps_rep)
    if math.isinf(allowed):
        return np.ones(len(trips), dtype=bool)
    return _rank_within_week(trips) < allowed


def batch_index(trips: TripTable, batch: Batch | str) -> tuple[np.ndarray, int]:
    batch = Batch(batch)
    if batch is Batch.WEEK:
        return trips.week, trips.weeks
    if batch is Batch.DAY:
        return trips.day, trips.weeks * DAYS_PER_WEEK
    return trips.hour, trips.weeks * DAYS_PER_WEEK * HOURS_PER_DAY


@dataclass
class ODHistogram:
    """Counts per (batch, entry station, exit station)."""

    bins: np.ndarray
    batch: Batch

    @property
    def stations(self) -> int:
        return self.bins.shape[-1]


def od_counts(trips: TripTable, batch: Batch | str, mask: np.ndarray | None = None) -> ODHistogram:
    idx, nb = batch_index(trips, batch)
    S = trips.stations
    sel = slice(None) if mask is None else mask
    flat = (idx[sel] * S + trips.origin[sel]) * S + trips.dest[sel]
    counts = np.bincount(flat, minlength=nb * S * S).reshape(nb, S, S) * trips.weight
    return ODHistogram(counts.astype(np.int64), Batch(batch))


def aggregate_od(reported: ODHistogram, b: float | None = DEFAULT_LAPLACE_B, seed: int = 0) -> ODHistogram:
    """Add independent Laplace(b) noise to every bin; ``b=None`` is noiseless."""
    if b is None:
        return ODHistogram(reported.bins.astype(float), reported.batch)
    if not b > 0:
        raise ValidationError("Laplace scale must be positive")
    noise = NoiseSampler(NoiseSpec(NoiseKind.LAPLACE, b, seed)).draw(reported.bins.shape)
    return ODHistogram(reported.bins + noise, reported.batch)


def _check_shapes(a: ODHistogram, b: ODHistogram) -> None:
    if a.bins.shape != b.bins.shape or a.batch != b.batch:
        raise ValidationError("histograms differ in shape or batch")


def rmsre(noisy: ODHistogram, truth: ODHistogram) -> float:
    """RMS of relative errors over bins with positive truth."""
    _check_shapes(noisy, truth)
    pos = truth.bins > 0
    if not pos.any():
        raise ValidationError("RMSRE undefined: truth has no positive bins")
    rel = (noisy.bins[pos] - truth.bins[pos]) / truth.bins[pos]
    return float(np.sqrt(np.mean(rel**2)))


def zero_bin_mass(noisy: ODHistogram, truth: ODHistogram) -> float:
    """Absolute estimated mass that lands in truth-zero bins."""
    _check_shapes(noisy, truth)
    return float(np.abs(noisy.bins[truth.bins == 0]).sum())


def expected_rmsre(estimate_mean: np.ndarray, truth: np.ndarray, b: float | None = DEFAULT_LAPLACE_B) -> float:
    """Exact RMSRE in expectation: bias from the mean estimate plus ``2 b^2`` noise."""
    truth = np.asarray(truth, dtype=float)
    pos = truth > 0
    if not pos.any():
        raise ValidationError("RMSRE undefined: truth has no positive bins")
    noise_var = 0.0 if b is None else 2.0 * b * b
    bias = np.asarray(estimate_mean, dtype=float)[pos] - truth[pos]
    return float(np.sqrt(np.mean((bias**2 + noise_var) / truth[pos] ** 2)))


def noise_floor(truth: np.ndarray, b: float = DEFAULT_LAPLACE_B) -> float:
    return expected_rmsre(truth, truth, b)


# --- self-identification error model ----------------------------------------


@dataclass(frozen=True)
class SelfIdModel:
    """Detection rate ``a`` (recall; false-positive rate ``1 - a``) and the
    share ``p`` of transfer traffic that passes near exits."""

    a: float
    p: float

    def __post_init__(self) -> None:
        if not (0 <= self.a <= 1 and 0 <= self.p <= 1):
            raise ValidationError("a and p must lie in [0, 1]")

    @property
    def recall(self) -> float:
        return self.a

    @property
    def false_positive_rate(self) -> float:
        return 1.0 - self.a


def selfid_expected_error(model: SelfIdModel, n_true, n_transfer=0.0):
    """Expected signed per-bin error: missed exits plus spurious exits."""
    return (model.a - 1.0) * np.asarray(n_true, dtype=float) + (1.0 - model.a) * model.p * np.asarray(n_transfer, dtype=float)


def selfid_f1(model: SelfIdModel, total_true: float, total_transfer: float) -> float:
    tp = model.a * total_true
    fp = model.p * (1.0 - model.a) * total_transfer
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    return 2 * precision * model.a / (precision + model.a)


def hub_stations(pop: RiderPopulation, k: int = 8) -> np.ndarray:
    inflow = pop.od_propensity.sum(axis=0)
    return np.sort(np.argsort(-inflow, kind="stable")[:k])


def generate_transfers(truth: ODHistogram, hubs: Sequence[int],
                       ratio: float = DEFAULT_TRANSFER_RATIO) -> np.ndarray:
    """Transfer passengers per (batch, origin, hub) bin.

    Each batch carries ``ratio`` times its trip volume as transfers, spread
    evenly over origin -> hub pairs. Transfers are only observed at hubs.
    """
    bins = truth.bins.astype(float)
    nb, S, _ = bins.shape
    mask = np.zeros((S, S), dtype=bool)
    mask[:, list(hubs)] = True
    np.fill_diagonal(mask, False)
    per_batch = ratio * bins.reshape(nb, -1).sum(axis=1) / mask.sum()
    return per_batch[:, None, None] * mask[None, :, :]


def selfid_sweep(truth: ODHistogram, transfers: np.ndarray, a_grid: Iterable[float],
                 p_grid: Iterable[float], b: float = DEFAULT_LAPLACE_B) -> list[tuple[float, float, float, float]]:
    """Rows of ``(a, p, f1, rmsre)`` under the expected-error model plus noise floor."""
    a_grid, p_grid = list(a_grid), list(p_grid)
    if not a_grid or not p_grid:
        raise ValidationError("grids must be non-empty")
    t = truth.bins.astype(float)
    tot_true, tot_tr = float(t.sum()), float(np.sum(transfers))
    rows = []
    for p in p_grid:
        for a in a_grid:
            model = SelfIdModel(a, p)
            est = t + selfid_expected_error(model, t, transfers)
            rows.append((a, p, selfid_f1(model, tot_true, tot_tr), expected_rmsre(est, t, b)))
    return rows
