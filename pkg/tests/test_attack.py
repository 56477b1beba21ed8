import math

import numpy as np
import pytest

from urbanpriv import attack
from urbanpriv.core import ValidationError


@pytest.fixture(scope="module")
def city():
    grid = attack.CityGrid()
    return grid, attack.generate_traffic(grid, seed=3)


def test_grid_shape(city):
    grid, _ = city
    assert grid.size == 540
    xs, ys = grid.positions.T
    assert 3000 < xs.max() < 4000 and 3000 < ys.max() < 4000


def test_traffic_scaling_and_conservation():
    grid = attack.CityGrid(6, 5)
    a = attack.generate_traffic(grid, 1.0, seed=1, duration=600)
    b = attack.generate_traffic(grid, 2.0, seed=1, duration=600)
    assert b.total == pytest.approx(2 * a.total, rel=1e-12)
    assert a.total == pytest.approx(a.presence.sum())
    assert attack.generate_traffic(grid, 0.0, seed=1, duration=60).total == 0.0


def test_hub_is_busiest(city):
    grid, traffic = city
    per_node = traffic.cumulative[:, -1]
    assert np.argmax(attack.hub_weights(grid)) == grid.hub
    assert per_node[grid.hub] > np.median(per_node)


def test_static_route_single_node(city):
    grid, _ = city
    prof = attack.AttackerProfile.default("static", grid)
    assert attack.greedy_route(grid, prof, 3600) == [(0.0, grid.hub)]


def test_route_kinematics(city):
    grid, _ = city
    prof = attack.AttackerProfile.default("cyclist", grid)
    route = attack.greedy_route(grid, prof, 600, max_ec=60)
    for (t0, a), (t1, b) in zip(route, route[1:]):
        assert grid.distances[a, b] in (grid.row_spacing, grid.col_spacing)
        assert t1 - t0 == pytest.approx(grid.distances[a, b] / prof.speed)


def test_car_visits_more_than_pedestrian(city):
    grid, _ = city
    n = {k: len({v for _, v in attack.greedy_route(grid, attack.AttackerProfile.default(k, grid), 3600, 300)})
         for k in ("pedestrian", "car")}
    assert n["car"] > n["pedestrian"]


def test_capture_bounds_and_determinism(city):
    grid, traffic = city
    prof = attack.AttackerProfile.default("car", grid)
    a = attack.run_attack(grid, traffic, prof, 120)
    b = attack.run_attack(grid, traffic, prof, 120)
    assert a == b
    assert 0 <= a.fraction <= 1
    reach = math.ceil(3600 * prof.speed / grid.block_length) + 1
    assert len(a.visited_intersections) <= reach


def test_small_max_ec_limit(city):
    grid, traffic = city
    prof = attack.AttackerProfile.default("car", grid)
    tiny = attack.run_attack(grid, traffic, prof, 1e-3).fraction
    assert tiny < 1e-5


def test_static_invariance(city):
    grid, traffic = city
    prof = attack.AttackerProfile.default("static", grid)
    fr = {attack.run_attack(grid, traffic, prof, ec).fraction for ec in attack.DEFAULT_MAX_EC_SWEEP}
    assert len(fr) == 1


def test_invalid_inputs(city):
    grid, traffic = city
    with pytest.raises(ValidationError):
        attack.run_attack(grid, traffic, attack.AttackerProfile.default("car", grid), 0)
    with pytest.raises(ValidationError):
        attack.generate_traffic(grid, -1.0)
    with pytest.raises(ValidationError):
        attack.CityGrid(1, 1)


def test_sweep_csv(tmp_path):
    grid = attack.CityGrid(5, 5)
    traffic = attack.generate_traffic(grid, seed=0, duration=300)
    rows = attack.sniff_sweep(grid, traffic, max_ecs=(30, 60))
    p = tmp_path / "s.csv"
    attack.write_sweep_csv(rows, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "profile,maxEC_seconds,captureFraction,intersectionsVisited"
    assert len(lines) == 1 + 4 * 2
