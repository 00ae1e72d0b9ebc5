import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evcharge.domain import ConfigError, eta
from evcharge.scenario import (
    GeneratorConfig,
    Scenario,
    demand_table,
    future_demand,
    generate,
    load,
    reference_config,
    reference_split,
    save,
)

from conftest import request, scenario, station


def small(**kw):
    kw.setdefault("n_stations", 6)
    kw.setdefault("n_days", 2)
    kw.setdefault("seed", 7)
    return GeneratorConfig(**kw)


def test_generate_is_deterministic():
    a = generate(GeneratorConfig(n_stations=10, n_days=1, seed=7))
    b = generate(GeneratorConfig(n_stations=10, n_days=1, seed=7))
    assert a == b


def test_flat_intensity_request_count_within_three_sigma():
    sc = generate(GeneratorConfig(n_days=1, demand_curve=(0.1,) * 1440, seed=3))
    assert abs(len(sc.episodes[0]) - 144) <= 36


def test_day_count_and_invariants():
    sc = generate(small())
    assert sc.n_days == 2
    for day in sc.episodes:
        keys = [(r.arrival_minute, r.id) for r in day]
        assert keys == sorted(keys)
        for r in day:
            gt = eta(r.location, sc.stations[r.ground_truth_station].location, sc.speed)
            assert all(gt <= eta(r.location, s.location, sc.speed) for s in sc.stations)


def test_generator_rejects_degenerate_configs():
    with pytest.raises(ConfigError):
        GeneratorConfig(n_stations=0)
    with pytest.raises(ConfigError):
        GeneratorConfig(demand_curve=(0.0,) * 1440)


def test_round_trip(tmp_path):
    sc = generate(small())
    save(sc, tmp_path / "a")
    back = load(tmp_path / "a")
    assert back == sc
    save(back, tmp_path / "b")
    for name in ("stations.csv", "prices.csv", "requests.csv"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def _rewrite(path, old, new):
    text = path.read_text()
    assert old in text
    path.write_text(text.replace(old, new, 1))


def test_load_rejects_price_gap(tmp_path):
    sc = scenario([station(0, 0)], [])
    save(sc, tmp_path)
    (tmp_path / "prices.csv").write_text(
        "station_id,start_minute,end_minute,cny_per_kwh\n0,0,700,1.5\n0,720,1440,1.5\n")
    with pytest.raises(ConfigError, match=r"gap \(700,720\)"):
        load(tmp_path)


def test_load_rejects_unsorted_requests(tmp_path):
    sc = scenario([station(0, 0)], [request(0, 10, 1.0), request(1, 20, 1.0)])
    save(sc, tmp_path)
    lines = (tmp_path / "requests.csv").read_text().splitlines()
    (tmp_path / "requests.csv").write_text("\n".join([lines[0], lines[2], lines[1]]) + "\n")
    with pytest.raises(ConfigError, match="requests.csv:3"):
        load(tmp_path)


def test_load_errors_name_the_problem(tmp_path):
    with pytest.raises(ConfigError, match="stations.csv"):
        load(tmp_path)
    sc = scenario([station(0, 0)], [request(0, 10, 1.0)])
    save(sc, tmp_path)
    _rewrite(tmp_path / "stations.csv", "id,x_km", "ident,x_km")
    with pytest.raises(ConfigError, match="header"):
        load(tmp_path)


def test_future_demand_examples():
    st0 = station(0, 0.5, 0.5)
    sc = scenario([st0], [request(0, 105, 0.6, 0.4), request(1, 106, 2.5, 0.5),
                          request(2, 130, 0.5, 0.5)])
    assert future_demand(sc, 0, 0, 200) == 0
    assert future_demand(sc, 0, 0, 100) == 1
    # the third request sits two cells east and never counts
    assert future_demand(sc, 0, 0, 101) == 1


def _brute(sc, day, sid, minute):
    cx, cy = (math.floor(c / sc.grid_cell_km) for c in sc.stations[sid].location)
    n = 0
    for r in sc.episodes[day]:
        rx, ry = (math.floor(c / sc.grid_cell_km) for c in r.location)
        if minute < r.arrival_minute <= minute + 15 and abs(rx - cx) <= 1 and abs(ry - cy) <= 1:
            n += 1
    return n


def test_demand_table_matches_brute_force():
    sc = generate(small(n_days=1, mean_rate=0.3))
    table = demand_table(sc, 0)
    rng = np.random.default_rng(0)
    for sid in range(sc.n_stations):
        for minute in rng.integers(0, 1440, size=40):
            assert table[sid, minute] == _brute(sc, 0, sid, int(minute)) == future_demand(sc, 0, sid, int(minute))


@given(st.lists(st.tuples(st.integers(0, 60), st.floats(0, 8.999), st.floats(0, 8.999)), max_size=40),
       st.integers(0, 50))
def test_disjoint_blocks_partition_the_window(reqs, minute):
    # stations at the centres of a 3x3 tiling of 3x3-cell blocks
    stations = [station(i, 1.5 + 3 * (i % 3), 1.5 + 3 * (i // 3)) for i in range(9)]
    reqs = sorted(reqs)
    day = [request(i, m, x, y) for i, (m, x, y) in enumerate(reqs)]
    sc = scenario(stations, day)
    total = sum(1 for r in day if minute < r.arrival_minute <= minute + 15)
    assert sum(future_demand(sc, 0, s, minute) for s in range(9)) == total


def test_reference_split_shape():
    tr, va, te = reference_split()
    assert (len(tr), len(va), len(te)) == (20, 2, 5)
    assert reference_config().n_stations == 10
    assert reference_config().capacity_range == (2, 2)
