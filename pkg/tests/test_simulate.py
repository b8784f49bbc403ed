import math

import numpy as np
import pytest
from scipy.special import expit

import frailtyph.simulate as sim
from frailtyph.sampler import ChainControls, Hyperparameters
from frailtyph.simulate import (
    ScenarioSpec,
    StudyMethod,
    generate_scenario_I,
    generate_scenario_II,
    run_study,
    sample_positive_stable,
    weighted_ise,
)


# ---- positive stable sampler --------------------------------------------------


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.8])
@pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
def test_positive_stable_laplace_transform(alpha, s):
    rng = np.random.default_rng(int(alpha * 100 + s * 7))
    x = sample_positive_stable(alpha, rng, size=100_000)
    vals = np.exp(-s * x)
    want = math.exp(-(s**alpha))
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - want) < 3 * se


def test_positive_stable_concentrates_as_alpha_to_one():
    rng = np.random.default_rng(9)
    x = sample_positive_stable(0.99, rng, size=20_000)
    assert 0.5 < np.median(x) < 2.0


def test_positive_stable_rejects_bad_alpha():
    rng = np.random.default_rng(0)
    for bad in (0.0, 1.0, -0.3, 1.7):
        with pytest.raises(ValueError):
            sample_positive_stable(bad, rng)


def test_positive_stable_vector_alpha():
    rng = np.random.default_rng(1)
    alphas = np.array([0.3, 0.6, 0.9])
    x = sample_positive_stable(alphas, rng)
    assert x.shape == (3,)
    assert np.all(x > 0)


def test_positive_stable_deterministic():
    a = sample_positive_stable(0.5, np.random.default_rng(7), size=10)
    b = sample_positive_stable(0.5, np.random.default_rng(7), size=10)
    assert np.array_equal(a, b)


# ---- scenario I ---------------------------------------------------------------


def test_scenario_i_shapes_and_determinism():
    spec = ScenarioSpec(scenario="I", n_clusters=20, cluster_size=5, replicates=1, seed=2)
    d1, _ = generate_scenario_I(spec, np.random.default_rng(10))
    d2, _ = generate_scenario_I(spec, np.random.default_rng(10))
    assert d1.n_records == 100 and d1.n_clusters == 20
    assert np.array_equal(d1.times, d2.times)
    assert np.array_equal(d1.events, d2.events)
    assert d1.covariate_names == ("w1", "w2", "x")


def test_scenario_i_frailty_moments_at_x_zero():
    """Mixture 0.5 N(-mu,1) + 0.5 N(mu,1), mu = e^{0.4 x}: mean 0 and
    variance 1 + e^{0.8 x}; checked by direct draws at x = 0."""
    rng = np.random.default_rng(3)
    n = 200_000
    mu = 1.0  # x = 0
    comp = rng.integers(0, 2, size=n)
    e = rng.normal(np.where(comp == 1, mu, -mu), 1.0)
    se_mean = e.std(ddof=1) / math.sqrt(n)
    assert abs(e.mean()) < 3 * se_mean
    want_var = 1.0 + math.exp(0.8 * 0.0)
    m4 = np.mean((e - e.mean()) ** 4)
    se_var = math.sqrt((m4 - e.var() ** 2) / n)
    assert abs(e.var(ddof=1) - want_var) < 3 * se_var


def test_scenario_i_censoring_fraction():
    fractions = []
    for r in range(200):
        spec = ScenarioSpec(scenario="I", replicates=1, seed=1)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=55, spawn_key=(r,)))
        data, _ = generate_scenario_I(spec, rng)
        fractions.append(1.0 - data.events.mean())
    assert abs(np.mean(fractions) - 0.35) < 0.03


def test_scenario_i_truth_survival_matches_monte_carlo():
    spec = ScenarioSpec(scenario="I")
    _, truth = generate_scenario_I(
        ScenarioSpec(scenario="I", n_clusters=2, cluster_size=2, replicates=1, seed=1),
        np.random.default_rng(0),
    )
    profile = np.array([0.5, 1.0, 1.0])
    rng = np.random.default_rng(12)
    n = 400_000
    mu = math.exp(0.4 * profile[-1])
    comp = rng.integers(0, 2, size=n)
    e = rng.normal(np.where(comp == 1, mu, -mu), 1.0)
    lin = float(np.array([1.0, 0.5, 1.0]) @ profile)
    t_event = rng.exponential(size=n) / np.exp(lin + e)
    for t0 in (0.2, 0.5, 1.0, 3.0):
        emp = float((t_event > t0).mean())
        se = math.sqrt(emp * (1 - emp) / n)
        assert truth.survival(t0, profile) == pytest.approx(emp, abs=3 * se + 1e-4)


def test_scenario_i_truth_inverse_survival_roundtrip():
    _, truth = generate_scenario_I(
        ScenarioSpec(scenario="I", n_clusters=2, cluster_size=2, replicates=1, seed=1),
        np.random.default_rng(0),
    )
    profile = np.array([0.0, 1.0, 2.0])
    for s in (0.9, 0.5, 0.1, 0.01):
        t = truth.inverse_survival(s, profile)
        assert truth.survival(t, profile) == pytest.approx(s, abs=1e-9)


# ---- scenario II ---------------------------------------------------------------


def test_scenario_ii_alpha_link():
    assert expit(0.5 + 0.5 * 1.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)))
    spec = ScenarioSpec(scenario="II", n_clusters=30, cluster_size=4, replicates=1, seed=4)
    data, truth = generate_scenario_II(spec, np.random.default_rng(5))
    assert data.n_records == 120
    x = data.cluster_design[:, 0]
    assert np.all((0 <= x) & (x <= 2))


def test_scenario_ii_censoring_fraction():
    """The stated generating process implies an exact censoring rate of
    21.3% (E[(e^{-r/4} - e^{-4r}) / (3.75 r)] with r = e^{w1 + w2/2} under
    the marginal exponential law); the commonly quoted 'about 25%' rounds
    this up.  The generator must match the exact value."""
    fractions = []
    for r in range(200):
        spec = ScenarioSpec(scenario="II", replicates=1, seed=1)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=56, spawn_key=(r,)))
        data, _ = generate_scenario_II(spec, rng)
        fractions.append(1.0 - data.events.mean())
    assert abs(np.mean(fractions) - 0.2129) < 0.01


def test_scenario_ii_marginal_truth_vs_kaplan_meier():
    """The positive-stable construction integrates out to
    S(t | w~) = exp(-t e^{w~'eta}) regardless of x; a Kaplan-Meier curve of
    simulated data at fixed subject covariates must track it."""
    from statsmodels.duration.survfunc import SurvfuncRight

    rng = np.random.default_rng(21)
    n = 4000
    eta = np.array([1.0, 0.5])
    w_tilde = np.array([1.0, 1.0])
    x = rng.uniform(0, 2, size=n)
    alpha = expit(0.5 + 0.5 * x)
    v = sample_positive_stable(alpha, rng)
    t_event = (rng.exponential(size=n) / (v * np.exp(float(w_tilde @ eta) / alpha))) ** alpha
    c = rng.uniform(0.25, 4.0, size=n)
    times = np.minimum(t_event, c)
    events = (t_event <= c).astype(int)

    km = SurvfuncRight(times, events)
    rate = math.exp(float(w_tilde @ eta))
    with np.errstate(divide="ignore"):  # statsmodels logs a zero tail bound
        lo, hi = km.simultaneous_cb()
    grid = np.quantile(times[events == 1], np.linspace(0.05, 0.9, 20))
    inside = 0
    for t0 in grid:
        idx = np.searchsorted(km.surv_times, t0, side="right") - 1
        truth_val = math.exp(-rate * t0)
        inside += lo[idx] <= truth_val <= hi[idx]
    assert inside >= 18


def test_scenario_ii_marginal_truth_closed_form():
    _, truth = generate_scenario_II(
        ScenarioSpec(scenario="II", n_clusters=2, cluster_size=2, replicates=1, seed=1),
        np.random.default_rng(0),
    )
    profile = np.array([0.0, 1.0, 1.5])
    rate = math.exp(0.5)
    for t0 in (0.3, 1.0, 2.0):
        assert truth.survival(t0, profile) == pytest.approx(math.exp(-rate * t0), abs=1e-14)
    assert truth.inverse_survival(0.25, profile) == pytest.approx(-math.log(0.25) / rate)


# ---- weighted ISE ----------------------------------------------------------------


def exponential_truth():
    return sim.StableMarginalTruth(np.array([0.0, 0.0]))  # rate e^0 = 1


def test_ise_zero_iff_equal():
    truth = exponential_truth()
    profile = np.zeros(3)
    assert weighted_ise(lambda t: np.exp(-t), truth, profile) == pytest.approx(0.0, abs=1e-28)
    assert weighted_ise(lambda t: np.exp(-1.1 * t), truth, profile) > 0


def test_ise_closed_form_oracle():
    """S_hat = S^2 with S = exp(-t): the weighted error integral equals
    1/5 - 1/2 + 1/3 = 1/30 in closed form."""
    truth = exponential_truth()
    got = weighted_ise(lambda t: np.exp(-2.0 * t), truth, np.zeros(3))
    assert got == pytest.approx(1.0 / 30.0, abs=1e-10)


def test_ise_rejects_nonmonotone_curve():
    truth = exponential_truth()
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="nonincreasing"):
        weighted_ise(lambda t: rng.random(t.size), truth, np.zeros(3))


# ---- study harness ----------------------------------------------------------------


def tiny_controls():
    return ChainControls(iterations=300, burn_in=100, thin=5, seed=0)


def tiny_scenario(replicates):
    return ScenarioSpec(
        scenario="I", n_clusters=12, cluster_size=4, replicates=replicates, seed=31
    )


def tiny_methods():
    hyper = Hyperparameters()
    return [
        StudyMethod(name="ldtfp", frailty="ldtfp", n_intervals=3, depth=2, hyper=hyper),
        StudyMethod(name="gaussian", frailty="gaussian", n_intervals=3, depth=2, hyper=hyper),
    ]


def test_run_study_zero_replicates():
    result = run_study(tiny_scenario(0), tiny_methods(), tiny_controls(), jobs=1)
    assert result.results == []
    assert result.table() == []
    assert result.aggregate()["n_failed"] == 0


def test_run_study_deterministic_across_jobs():
    a = run_study(tiny_scenario(2), tiny_methods(), tiny_controls(), jobs=1)
    b = run_study(tiny_scenario(2), tiny_methods(), tiny_controls(), jobs=2)
    assert a.table() == b.table()
    assert a.aggregate() == b.aggregate()
    for ra, rb in zip(a.results, b.results):
        assert ra.estimates == rb.estimates
        assert ra.ise == rb.ise


def test_run_study_structure_and_coverage_fields():
    result = run_study(tiny_scenario(2), tiny_methods(), tiny_controls(), jobs=1)
    assert result.n_failed == 0
    rows = result.table()
    # one row per (replicate, method, profile)
    assert len(rows) == 2 * 2 * 2
    agg = result.aggregate()
    coef = agg["methods"]["ldtfp"]["coefficients"]
    assert set(coef) == {"w1", "w2", "x"}
    assert "bias" in coef["w1"] and "cp" in coef["w1"]
    assert set(agg["methods"]["ldtfp"]["ise"]) == {"(2,1,-2)", "(0,1,2)"}


def test_run_study_records_failures(monkeypatch):
    calls = {"n": 0}
    real = sim.run_chain

    def flaky(spec, controls, **kw):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RuntimeError("synthetic failure")
        return real(spec, controls, **kw)

    monkeypatch.setattr(sim, "run_chain", flaky)
    result = run_study(tiny_scenario(2), tiny_methods(), tiny_controls(), jobs=1)
    assert result.n_failed == 1
    statuses = {(r.replicate, r.method): r.status for r in result.results}
    assert sum(1 for s in statuses.values() if s.startswith("failed")) == 1
    agg = result.aggregate()
    assert agg["n_failed"] == 1
    # the failed replicate is excluded from aggregates but still recorded
    assert agg["methods"]["ldtfp"]["n_ok"] == 1
    assert len([r for r in result.results if r.method == "ldtfp"]) == 2
