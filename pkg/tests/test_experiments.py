import numpy as np
import pytest

from sdspp.harness.config import default_config, merge
from sdspp.harness.experiments import (
    MAE_CONFIGURATIONS,
    MaeTable,
    RuntimeTable,
    ShapeArm,
    ShapeReport,
    mae_experiment,
    paired_comparison,
    runtime_benchmark,
    synthesize_graph,
    time_phases,
)
from sdspp.world_model import NodeKind

LEVELS = (0.1, 0.2, 0.5, 1.0, 2.0)


def test_paired_comparison_statistics():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    b = np.array([0.5, 1.0, 2.5, 3.0])
    d = a - b
    pc = paired_comparison(a, b)
    assert pc.mean_difference == pytest.approx(d.mean())
    assert pc.std_error == pytest.approx(d.std(ddof=1) / 2.0)
    assert pc.z == pytest.approx(d.mean() / (d.std(ddof=1) / 2.0))
    same = paired_comparison(a, a)
    assert same.z == 0.0 and not same.distinguishable(1.96)
    shift = paired_comparison(a + 1.0, a)
    assert shift.z == np.inf and shift.distinguishable(1.96)


def synthetic_table(rng, lm_gain_low=0.0, lm_gain_high=0.05, ll_gain=0.02, full_gain=0.06, seeds=20):
    configs = tuple(MAE_CONFIGURATIONS)
    vals = np.zeros((4, len(LEVELS), seeds))
    for j, lv in enumerate(LEVELS):
        base = 0.1 * lv + rng.normal(0, 0.01, seeds)
        lm = lm_gain_low if lv <= 0.1 else lm_gain_high * lv
        vals[0, j] = base
        vals[1, j] = base - lm + rng.normal(0, 0.002, seeds)
        vals[2, j] = base - ll_gain * 0.1 * lv * 10 + rng.normal(0, 0.002, seeds)
        vals[3, j] = np.minimum(vals[1, j], vals[2, j]) - full_gain * 0.01
    return MaeTable(configs, LEVELS, tuple(range(seeds)), vals)


def test_mae_table_checks_on_synthetic_data():
    table = synthetic_table(np.random.default_rng(0))
    assert all(table.checks().values())
    # a landmark gain that is large at low noise breaks the indistinguishability check
    table = synthetic_table(np.random.default_rng(0), lm_gain_low=0.05)
    assert not table.checks()["landmarks_no_gain_at_low_noise"]
    # the full configuration losing anywhere breaks the first check
    bad = synthetic_table(np.random.default_rng(0))
    bad.values[3, 2] += 1.0
    assert not bad.checks()["all_measurements_best"]


def test_mae_table_summary_and_round_trip(tmp_path):
    table = synthetic_table(np.random.default_rng(1), seeds=5)
    rows = table.summary()
    assert len(rows) == 4 * len(LEVELS)
    r = rows[0]
    v = table.cell(r["configuration"], r["level"])
    assert r["mean_mae"] == pytest.approx(v.mean())
    assert r["std_error"] == pytest.approx(v.std(ddof=1) / np.sqrt(5))
    back = MaeTable.from_csv(table.to_csv(tmp_path / "mae.csv"))
    assert back.configurations == table.configurations and back.levels == table.levels
    assert np.array_equal(back.values, table.values)
    assert table.summary_to_csv(tmp_path / "s.csv").exists()


def test_small_mae_experiment_runs_and_pairs_streams():
    cfg = merge(default_config(), {"experiments": {"mae": {"duration": 3.0}}})
    table = mae_experiment(seeds=2, levels=[0.5], config=cfg)
    assert table.values.shape == (4, 1, 2)
    assert np.all(np.isfinite(table.values)) and np.all(table.values >= 0)
    with pytest.raises(ValueError):
        mae_experiment(seeds=1, levels=[0.5])


@pytest.mark.parametrize("n_nodes,n_lines", [(25, 0), (25, 3), (60, 20)])
def test_synthesized_graph_has_exact_node_count(n_nodes, n_lines):
    g, timings = synthesize_graph(n_nodes, n_lines, seed=0)
    assert len(g.nodes) == n_nodes
    assert sum(1 for n in g.nodes.values() if n.kind is NodeKind.LL) == n_lines
    assert timings["graph_build"] >= 0
    g.audit()
    with pytest.raises(ValueError):
        synthesize_graph(5, 3, seed=0)


def test_time_phases_and_small_benchmark(tmp_path):
    t = time_phases(25, 2, 0)
    assert set(t) == {"graph_build", "optimize", "apf", "total"}
    assert t["total"] == pytest.approx(t["graph_build"] + t["optimize"] + t["apf"])
    table = runtime_benchmark([25, 50], repeats=1, line_counts=[(50, 0), (50, 5)])
    assert {(r["nodes"], r["lines"]) for r in table.rows} >= {(25, 3), (50, 3), (50, 0), (50, 5)}
    back = RuntimeTable.from_csv(table.to_csv(tmp_path / "rt.csv"))
    assert back.rows == [{k: (float(v) if k not in ("nodes", "lines", "repeats") else v) for k, v in r.items()}
                         for r in table.rows]
    with pytest.raises(ValueError):
        runtime_benchmark([50, 25], repeats=1)


def test_runtime_checks_logic():
    rows = [
        {"nodes": 25, "lines": 3, "repeats": 1, "graph_build": 1, "optimize": 1, "apf": 1, "total": 3},
        {"nodes": 50, "lines": 3, "repeats": 1, "graph_build": 2, "optimize": 2, "apf": 2, "total": 6},
        {"nodes": 50, "lines": 0, "repeats": 1, "graph_build": 1, "optimize": 1, "apf": 1, "total": 3},
        {"nodes": 50, "lines": 20, "repeats": 1, "graph_build": 3, "optimize": 3, "apf": 3, "total": 9},
    ]
    t = RuntimeTable(rows)
    assert t.checks(3, 50, (0, 20), budget=10) == {"monotone": True, "within_budget": True, "lines_slower": True}
    rows[1]["optimize"] = 0.5
    assert not RuntimeTable(rows).checks(3, 50, (0, 20))["monotone"]


def test_shape_report_checks_logic(tmp_path):
    def arm(lane, rep, dev, clr):
        return ShapeArm(lane, rep, dev, clr, 30.0, 3.0, 1.0, False)

    rep = ShapeReport([
        arm("ego", "wide", 3.5, 2.0), arm("ego", "narrow", 1.0, 0.2), arm("ego", "bbox", 3.5, 1.0),
        arm("adjacent", "wide", 1.0, 3.0), arm("adjacent", "narrow", 0.0, 3.0), arm("adjacent", "bbox", 0.1, 3.0),
    ])
    assert all(rep.checks().values())
    assert rep.to_csv(tmp_path / "s.csv").read_text().count("\n") == 7
    with pytest.raises(KeyError):
        rep.arm("ego", "disc")
