import math

import numpy as np
import pytest

from urbanpriv import crosslocality as xl
from urbanpriv.core import ValidationError


@pytest.fixture(scope="module")
def small():
    pop = xl.RiderPopulation(riders=2000, stations=10, seed=3)
    return pop, xl.generate_trips(pop, 2, seed=4)


def test_pmf_coverage():
    pmf = xl.weekly_trip_pmf()
    assert pmf[:11].sum() == pytest.approx(0.93)
    assert pmf[0] == 0.0


def test_generated_coverage_over_1e5_riders():
    pop = xl.RiderPopulation(seed=0)
    trips = xl.generate_trips(pop, 1, seed=1)
    counts = trips.weekly_counts(pop.riders)[:, 0]
    assert abs(np.mean(counts <= 10) - 0.93) <= 0.01
    assert counts.sum() == len(trips)


def test_single_rider_one_trip():
    pmf = np.zeros(3)
    pmf[1] = 1.0
    pop = xl.RiderPopulation(riders=1, stations=2, trip_pmf=pmf, weight=1)
    trips = xl.generate_trips(pop, 1, seed=0)
    assert len(trips) == 1 and trips.origin[0] != trips.dest[0]


def test_generation_deterministic(small):
    pop, trips = small
    again = xl.generate_trips(pop, 2, seed=4)
    assert np.array_equal(trips.t, again.t) and np.array_equal(trips.dest, again.dest)


def test_od_follows_propensity():
    pop = xl.RiderPopulation(riders=20000, stations=5, seed=9, weight=1)
    trips = xl.generate_trips(pop, 1, seed=2)
    emp = xl.od_counts(trips, "week").bins[0].astype(float)
    emp /= emp.sum(axis=1, keepdims=True)
    assert np.allclose(emp, pop.od_propensity, atol=0.02)


def test_rejects_bad_population():
    with pytest.raises(ValidationError):
        xl.RiderPopulation(riders=0)
    with pytest.raises(ValidationError):
        xl.RiderPopulation(trip_pmf=np.array([0.5, 0.4]))


def test_suppression_first_trips():
    pmf = np.zeros(6)
    pmf[5] = 1.0
    pop = xl.RiderPopulation(riders=1, stations=3, trip_pmf=pmf, weight=1)
    trips = xl.generate_trips(pop, 1, seed=0)
    mask = xl.simulate_reports(trips, 1.0, 0.5)
    assert mask.tolist() == [True, True, False, False, False]
    assert np.all(np.diff(trips.t) >= 0)
    assert xl.simulate_reports(trips, math.inf).all()


def test_vectorized_matches_ledger(small):
    _, trips = small
    for eps in (0.5, 1.0, 2.5, 5.0):
        assert np.array_equal(xl.simulate_reports(trips, eps), xl.simulate_reports(trips, eps, use_ledger=True))


def test_reported_fraction_monotone_and_conserved(small):
    _, trips = small
    fracs = [xl.simulate_reports(trips, e).mean() for e in (1, 2, 5, 10)]
    assert fracs == sorted(fracs)
    m = xl.simulate_reports(trips, 1.0)
    assert m.sum() + (~m).sum() == len(trips)


def test_aggregate_noise_mse():
    truth = xl.ODHistogram(np.zeros((1, 100, 1000), dtype=np.int64), xl.Batch.WEEK)
    noisy = xl.aggregate_od(truth, 2.0, seed=5).bins
    assert np.mean(noisy**2) == pytest.approx(8.0, rel=0.02)
    # sign balance in zero bins
    assert abs(np.mean(noisy > 0) - 0.5) < 0.01
    assert np.array_equal(xl.aggregate_od(truth, None).bins, truth.bins)


def test_rmsre_basics():
    t = xl.ODHistogram(np.array([[[10, 0], [0, 0]]]), xl.Batch.WEEK)
    n = xl.ODHistogram(np.array([[[11.0, 2.0], [0, -1.0]]]), xl.Batch.WEEK)
    assert xl.rmsre(n, t) == pytest.approx(0.1)
    assert xl.rmsre(t, t) == 0.0
    assert xl.zero_bin_mass(n, t) == 3.0
    with pytest.raises(ValidationError):
        xl.rmsre(t, xl.ODHistogram(np.zeros((1, 2, 2)), xl.Batch.WEEK))
    with pytest.raises(ValidationError):
        xl.rmsre(n, xl.ODHistogram(t.bins, xl.Batch.DAY))


def test_noise_floor_uniform_1140():
    truth = np.full((80, 80), 1140.0)
    assert xl.noise_floor(truth, 2.0) == pytest.approx(math.sqrt(8) / 1140)
    assert xl.noise_floor(truth, 2.0) == pytest.approx(0.0025, rel=0.01)


def test_selfid_error_formula():
    assert xl.selfid_expected_error(xl.SelfIdModel(1.0, 1.0), 100, 200) == 0
    assert xl.selfid_expected_error(xl.SelfIdModel(0.5, 1.0), 100, 200) == 50
    assert xl.selfid_expected_error(xl.SelfIdModel(0.5, 0.0), 100, 200) == -50
    with pytest.raises(ValidationError):
        xl.SelfIdModel(1.5, 0)


def test_selfid_f1():
    assert xl.selfid_f1(xl.SelfIdModel(1.0, 1.0), 100, 50) == 1.0
    # a=0.5, p=1: precision 50 / (50 + 25) = 2/3
    assert xl.selfid_f1(xl.SelfIdModel(0.5, 1.0), 100, 50) == pytest.approx(2 * (2 / 3) * 0.5 / (2 / 3 + 0.5))


def test_batch_refinement_order():
    pop = xl.RiderPopulation(riders=20000, stations=20, seed=1)
    trips = xl.generate_trips(pop, 2, seed=2)
    floors = [xl.noise_floor(xl.od_counts(trips, b).bins) for b in ("hour", "day", "week")]
    assert floors[0] >= floors[1] >= floors[2]


def test_population_config(tmp_path):
    p = tmp_path / "pop.cfg"
    p.write_text("# desk run\nriders = 500\nstations=6\nregular_p=0.5\n")
    pop = xl.population_from_config(xl.read_kv_file(p))
    assert pop.riders == 500 and pop.stations == 6
    with pytest.raises(ValidationError):
        xl.population_from_config({"bogus": "1"})


def test_measurement_instructions():
    m = xl.Measurement("m1")
    assert m.eps_rep == 0.5
    assert m.exit_instruction(3, 600)["entryStation"] == 3
    with pytest.raises(ValidationError):
        xl.Measurement("m2", eps_rep=0)
