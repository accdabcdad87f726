"""Smoke test for the pymdcsim extension module.

Build and run:
    maturin develop -m crates/py/Cargo.toml --features extension-module
    python crates/py/python/smoke_test.py
"""

import json
import tempfile
from pathlib import Path

import pymdcsim as m


def main():
    city = m.ScenarioMap.synthetic(1500.0, 1200.0, 6, 5, 9, seed=4)
    assert len(city.hospitals) == 9
    assert m.ScenarioMap.from_json(city.to_json()).to_json() == city.to_json()

    trace = m.generate_trace(city, seed=4, wave_size=10, duration=1200.0)
    assert trace.n_agents == 70, trace.n_agents
    t, agent, x, y = trace.records()[0]
    assert trace.position_at(0, t) is not None

    grid = m.build_presence_grid(trace, city)
    assert grid.resolution == 40 and grid.positive_cells() > 0
    assert len(grid.rows()) == 40

    km = m.weighted_kmeans([(0.0, 0.0), (1.0, 0.0), (10.0, 10.0), (11.0, 10.0)], [1, 1, 1, 1], k=2, seed=1)
    assert sorted(km.centroids) == [(0.5, 0.0), (10.5, 10.0)], km.centroids
    assert all(b <= a for a, b in zip(km.inertia_history, km.inertia_history[1:]))

    base = m.place(grid, 12, 3, seed=4)
    runs = {}
    for tag in m.SCENARIO_TAGS:
        p = m.derive_scenario(base, city, tag)
        assert p.serving_mdc(*p.aps[0]) == p.ap_to_mdc[0]
        runs[tag] = m.run_simulation(trace, p, seed=4, duration=1200.0)
    for row in runs["C3"].samples():
        assert row["power_w"] == 470 + 48 * row["busy_pus"]

    with tempfile.TemporaryDirectory() as d:
        summary = json.loads(m.build_report(runs, warmup=300.0, out_dir=d))
        assert set(summary["scenarios"]) == set(m.SCENARIO_TAGS)
        assert (Path(d) / "H9" / "power.svg").is_file()
        runs["H1"].write_dir(Path(d) / "raw")
        back = m.SimulationResults.read_dir(Path(d) / "raw")
        assert back.n_mdcs == 1

    try:
        m.derive_scenario(base, city, "X7")
    except ValueError as e:
        assert "X7" in str(e)
    else:
        raise AssertionError("unknown tag accepted")

    print("pymdcsim smoke test passed:", {k: round(v["mean_power_w"], 1) for k, v in summary["scenarios"].items()})


if __name__ == "__main__":
    main()
