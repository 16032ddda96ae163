import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from robust_dta.core import inverse_logit, logit
from robust_dta.simulation import (
    MethodOutcome,
    ScenarioSpec,
    SpecError,
    aggregate,
    dump_specs,
    generate_dataset,
    generate_dataset_with_truth,
    load_specs,
    metrics_csv,
    run_replicate,
    run_scenario,
    scenario_catalog,
    with_reps,
)


def test_catalog_has_fifteen_settings():
    cat = scenario_catalog()
    assert len(cat) == 15
    assert len({s.seed for s in cat}) == 15
    by_name = {s.name: s for s in cat}
    assert (by_name["D-N12"].k1, by_name["D-N12"].k2) == (2, 1)
    assert (by_name["E-N16"].k1, by_name["E-N16"].k2) == (1, 2)
    assert by_name["A-N8"].n_studies == 8 and by_name["A-N8"].k1 == 0


@pytest.mark.parametrize(
    "changes",
    [
        {"n_studies": 1},
        {"k1": 5, "k2": 3},
        {"se_normal": 1.0},
        {"prevalence_range": (0.6, 0.5)},
        {"size_range": (0, 10)},
        {"rho": 1.5},
        {"n_reps": 0},
    ],
)
def test_spec_validation(changes):
    with pytest.raises(SpecError):
        ScenarioSpec(**changes)


def test_spec_json_roundtrip(tmp_path):
    specs = scenario_catalog(n_reps=3, sizes=(8,), scenarios="AB")
    path = tmp_path / "specs.json"
    dump_specs(path, specs)
    assert load_specs(path) == specs
    with pytest.raises(SpecError, match="unknown"):
        ScenarioSpec.from_dict({"name": "x", "studies": 4})
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(SpecError):
        load_specs(path)
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(SpecError):
        load_specs(path)


def test_generator_is_reproducible_and_stream_specific():
    spec = ScenarioSpec(name="B-N8", k1=2)
    assert generate_dataset(spec, 3) == generate_dataset(spec, 3)
    assert generate_dataset(spec, 3) != generate_dataset(spec, 4)


def test_generator_layout():
    spec = ScenarioSpec(name="D-N12", n_studies=12, k1=2, k2=1)
    counts, truths = generate_dataset_with_truth(spec, 0)
    assert [t.group for t in truths[:4]] == ["outlier-se", "outlier-se", "outlier-sp", "normal"]
    for c, t in zip(counts, truths):
        assert 53 <= t.n_total <= 351
        assert c.tp + c.fn == t.n_diseased
        assert c.tp + c.fn + c.fp + c.tn == t.n_total


def test_generator_law_of_large_numbers():
    spec = ScenarioSpec(name="big", n_studies=400, k1=100, k2=0, size_range=(100000, 100000))
    counts, truths = generate_dataset_with_truth(spec, 0)
    theta = np.array([t.theta for t in truths])
    normal = theta[100:]
    np.testing.assert_allclose(normal.mean(axis=0), [logit(0.61), logit(0.82)], atol=0.06)
    assert theta[:100, 0].mean() == pytest.approx(logit(0.27), abs=0.1)
    np.testing.assert_allclose(np.cov(normal.T), spec.sigma, atol=0.04)
    # huge arms: empirical proportions track the latent probabilities
    obs = np.array([c.tp / (c.tp + c.fn) for c in counts])
    np.testing.assert_allclose(obs, inverse_logit(theta[:, 0]), atol=0.02)
    n_dis = np.array([t.n_diseased for t in truths]) / 100000
    assert np.all((n_dis >= 0.13) & (n_dis <= 0.53))


def _outcome(est, lo, hi):
    return MethodOutcome("m", True, est, {"wald": ((lo[0], hi[0]), (lo[1], hi[1])), "hksj": ((lo[0], hi[0]), (lo[1], hi[1]))})


def test_aggregate_against_hand_computation():
    spec = ScenarioSpec(se_normal=0.5, sp_normal=0.8, n_reps=4)
    ests = [(0.4, 0.8), (0.6, 0.9), (0.55, 0.7), (0.45, 0.85)]
    reps = [[_outcome(e, (e[0] - 0.05, e[1] - 0.05), (e[0] + 0.05, e[1] + 0.05))] for e in ests]
    reps.append([MethodOutcome("m", False)])
    res = aggregate(spec, ("m",), reps)
    m = res.get("m", "se")
    x = np.array([e[0] for e in ests])
    assert m.n_converged == 4 and m.convergence_rate == pytest.approx(0.8)
    assert m.bias == pytest.approx(x.mean() - 0.5)
    assert m.variance == pytest.approx(np.var(x))
    assert m.rmse**2 == pytest.approx(m.bias**2 + m.variance)
    assert m.mcse_bias == pytest.approx(np.std(x, ddof=1) / 2)
    assert m.coverage["wald"] == pytest.approx(0.5)
    assert m.mcse_coverage["wald"] == pytest.approx(math.sqrt(0.25 / 4))
    assert m.mean_ci_width["hksj"] == pytest.approx(0.1)


def test_unavailable_method_reported():
    res = aggregate(ScenarioSpec(), ("m",), [[MethodOutcome("m", False)]])
    assert res.get("m", "se") is None
    assert ("A-N8", "m", "se", "available", 0.0) in res.tidy_rows()


def test_single_replicate_per_method():
    spec = ScenarioSpec(n_reps=1)
    res = run_scenario(spec, ("BNN-ML", "BNN-DPD(GES)"))
    assert len(res.replicates) == 1
    assert [o.method for o in res.replicates[0]] == ["BNN-ML", "BNN-DPD(GES)"]


def test_run_is_independent_of_parallelism():
    spec = ScenarioSpec(name="C-N8", k2=2, n_reps=6)
    serial = metrics_csv([run_scenario(spec, ("BNN-REML", "BNN-DPD(GES)"))])
    with ThreadPoolExecutor(3) as pool:
        threaded = metrics_csv([run_scenario(spec, ("BNN-REML", "BNN-DPD(GES)"), executor=pool)])
    assert serial == threaded
    assert serial == metrics_csv([run_scenario(spec, ("BNN-REML", "BNN-DPD(GES)"))])


def test_replicate_outcomes_are_probabilities():
    out = run_replicate(ScenarioSpec(name="B-N8", k1=2), 0, ("BNN-REML", "BNN-DPD(GES)", "BNN-DPD(H)"), grid="0.1:0.5:0.2")
    for o in out:
        assert o.converged
        assert all(0 < p < 1 for p in o.estimate)
        for kind in ("wald", "hksj"):
            for (lo, hi), p in zip(o.intervals[kind], o.estimate):
                assert lo <= p <= hi
    assert out[1].alpha == pytest.approx(1 / 3)
    assert out[2].alpha in (0.1, 0.3, 0.5)


def test_unknown_method():
    with pytest.raises(ValueError):
        run_scenario(ScenarioSpec(n_reps=1), ("BNN-Bayes",))


def test_with_reps_overrides():
    specs = with_reps(scenario_catalog(sizes=(8,), scenarios="AB"), 5, 100)
    assert [(s.n_reps, s.seed) for s in specs] == [(5, 100), (5, 101)]
