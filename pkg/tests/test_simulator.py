import io
import json
import math

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from femtolb import analytic as an
from femtolb import optimizer as opt
from femtolb import simulator as sim
from femtolb.model import ControlParams, NetworkConfig, service_area

OA40 = sim.SchemeSpec("OA", params=ControlParams(rho=0.3, d_f=40.0))


def _drop(fbs, users, cfg, fms=None):
    fbs = np.asarray(fbs, dtype=float).reshape(-1, 2)
    users = np.asarray(users, dtype=float).reshape(-1, 2)
    fms = fbs.copy() + 5.0 if fms is None else np.asarray(fms, dtype=float).reshape(-1, 2)
    return sim.Drop(fbs=fbs, fms=fms, users=users, home=sim._home_index(users, fbs, cfg.home_radius),
                    seed=0, macro_radius=cfg.macro_radius)


# deployment --------------------------------------------------------------

def test_no_femtocells_means_all_macro():
    cfg = NetworkConfig(fbs_mean=0.0)
    drop = sim.generate_drop(cfg, 5)
    assert drop.fbs.shape == (0, 2)
    cell = sim.associate(drop, OA40, cfg).cell
    assert np.all(cell == -1)


def test_spacing_and_home_disks(cfg):
    for seed in range(200):
        drop = sim.generate_drop(cfg, seed)
        assert pdist(drop.fbs).min() >= 2 * cfg.home_radius
        assert np.all(np.hypot(*(drop.fms - drop.fbs).T) <= cfg.home_radius)
        assert np.all(np.hypot(*drop.users.T) <= cfg.macro_radius)


def test_mean_femtocell_count(cfg):
    counts = np.array([sim.generate_drop(cfg, s).inside.sum() for s in range(10_000)])  # about 30 s
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - cfg.fbs_mean) <= 3 * se


def test_placement_failure_is_reported(monkeypatch):
    monkeypatch.setattr(sim, "MAX_ATTEMPTS", 20)
    cfg = NetworkConfig(macro_radius=50.0, home_radius=20.0, fbs_mean=60.0)
    with pytest.raises(sim.PlacementError):
        sim.generate_drop(cfg, 0)


def _hetero_counts(seed, drops):
    cfg = NetworkConfig(indoor_density_factor=5.0)
    x = service_area(40.0, cfg.lambda_f)
    expect = an.hetero_counts(x, 5.0, cfg.lambda_u_outdoor, cfg)
    est = sim.run_campaign(sim.SchemeSpec("OA", params=ControlParams(rho=0.3, d_f=40.0)), cfg, drops, seed)
    counts = est.mean_counts()
    per_cell, se = est.ratio("o_count", "f_count")
    return expect, (counts["m_count"], per_cell), se


def test_heterogeneous_counts_match_analysis_on_poisson_field(monkeypatch):
    # the counting formulas assume unconstrained Poisson fBSs
    monkeypatch.setattr(sim, "_hard_core", lambda rng, n, radius, spacing: sim._uniform_disk(rng, n, radius))
    (n_m, n_o), (m, o), _ = _hetero_counts(4, 1000)
    assert m == pytest.approx(n_m, rel=0.02)
    assert o == pytest.approx(n_o, rel=0.02)


def test_heterogeneous_counts_with_spacing():
    # spacing spreads the cells apart, so each one collects about 2 % more users
    (n_m, n_o), (m, o), se = _hetero_counts(4, 600)
    assert m == pytest.approx(n_m, rel=0.02)
    assert abs(o - n_o) <= 0.02 * n_o + 3 * se
    assert o > n_o


# association -------------------------------------------------------------

@pytest.mark.parametrize("scheme", ["OA", "HA", "CoRSSI", "CoLB", "DivRSSI"])
def test_colocated_user_joins_femtocell(cfg, scheme):
    params = ControlParams(rho=0.3, d_f=30.0) if scheme in sim.PROPOSED else None
    spec = sim.SchemeSpec(scheme, params=params)
    drop = _drop([[300.0, 0.0], [-300.0, 100.0]], [[300.0, 0.0], [0.0, 10.0]], cfg)
    cell = sim.associate(drop, spec, cfg).cell
    assert cell[0] == 0
    assert cell[1] == -1


def test_biased_association_without_bias_equals_rssi(cfg):
    for seed in range(20):
        drop = sim.generate_drop(cfg, seed)
        a = sim.associate(drop, sim.SchemeSpec("CoLB", delta_db=0.0), cfg).cell
        b = sim.associate(drop, sim.SchemeSpec("CoRSSI"), cfg).cell
        assert np.array_equal(a, b)


def test_closed_access_never_admits_macro_users(cfg):
    drop = sim.generate_drop(cfg, 1)
    assert np.all(sim.associate(drop, sim.SchemeSpec("CoCA"), cfg).cell == -1)


def test_offload_fraction_matches_coverage(cfg):
    frac = []
    for seed in range(400):
        drop = sim.generate_drop(cfg, seed)
        cell = sim.associate(drop, OA40, cfg).cell
        frac.append(np.mean(cell >= 0))
    frac = np.array(frac)
    expect = cfg.lambda_f * service_area(40.0, cfg.lambda_f)
    assert abs(frac.mean() - expect) <= 3 * frac.std(ddof=1) / math.sqrt(frac.size)


def test_admission_cap_respected(cfg):
    spec = sim.SchemeSpec("OA", params=ControlParams(rho=0.3, d_f=120.0), n_max=3)
    for seed in range(10):
        drop = sim.generate_drop(cfg, seed)
        cell = sim.associate(drop, spec, cfg, np.random.default_rng(seed)).cell
        load = np.bincount(cell[cell >= 0], minlength=drop.fbs.shape[0])
        assert load.max(initial=0) <= 2
        # overflow users move on to a farther fBS inside the radius or to the mBS
        d = np.hypot(*(drop.users[cell >= 0] - drop.fbs[cell[cell >= 0]]).T)
        assert np.all(d <= 120.0)


# per-drop evaluation -----------------------------------------------------

def test_lone_macro_user_without_noise_gets_top_rate():
    cfg = NetworkConfig(fbs_mean=0.0, noise_density=-400.0)
    drop = _drop(np.zeros((0, 2)), [[100.0, 50.0]], cfg, fms=np.zeros((0, 2)))
    spec = sim.SchemeSpec("OA", params=ControlParams(rho=0.0, d_f=20.0))
    res = sim.evaluate_drop(drop, sim.associate(drop, spec, cfg), spec, cfg)
    assert res.throughputs(spec, cfg).tolist() == pytest.approx([cfg.bandwidth * cfg.rates.top], rel=1e-12)


def test_full_dedication_starves_foreign_users(cfg):
    spec = sim.SchemeSpec("HA", params=ControlParams(rho=0.4, d_f=80.0, beta=1.0))
    drop = sim.generate_drop(cfg, 3)
    res = sim.evaluate_drop(drop, sim.associate(drop, spec, cfg), spec, cfg)
    tp = res.throughputs(spec, cfg)
    assert np.all(tp[res.role == sim.OMS] == 0.0)
    owners = res.role == sim.FMS
    assert tp[owners] == pytest.approx(0.4 * cfg.bandwidth * res.se[owners])


def test_cell_shares_sum_to_one(cfg):
    for scheme in ("OA", "CoRSSI"):
        params = ControlParams(rho=0.3, d_f=60.0) if scheme == "OA" else None
        spec = sim.SchemeSpec(scheme, params=params)
        drop = sim.generate_drop(cfg, 8)
        res = sim.evaluate_drop(drop, sim.associate(drop, spec, cfg), spec, cfg)
        for c in np.unique(res.cell):
            assert res.share[res.cell == c].sum() == pytest.approx(1.0)


def test_sampled_fading_matches_macro_ccdf(cfg):
    drop = _drop(np.zeros((0, 2)), [[400.0, 0.0]], cfg, fms=np.zeros((0, 2)))
    spec = sim.SchemeSpec("OA", params=ControlParams(rho=0.3, d_f=20.0))
    res = sim.evaluate_drop(drop, sim.associate(drop, spec, cfg), spec, cfg, fading_samples=1_000_000,
                            rng=np.random.default_rng(0))
    gam = cfg.rates.thresholds
    assert res.outage[0] == pytest.approx(1 - an.ccdf_mms(gam[0], 400.0, cfg), abs=5e-3)
    exact = cfg.rates.increments @ an.ccdf_mms(gam, 400.0, cfg)
    assert res.se[0] == pytest.approx(exact, rel=5e-3)


def test_sampled_fading_matches_exact_average():
    cfg = NetworkConfig(fbs_mean=10.0, user_mean=40.0)
    spec = sim.SchemeSpec("CoRSSI")
    drop = sim.generate_drop(cfg, 12)
    asg = sim.associate(drop, spec, cfg)
    exact = sim.evaluate_drop(drop, asg, spec, cfg)
    sampled = sim.evaluate_drop(drop, asg, spec, cfg, fading_samples=20_000, rng=np.random.default_rng(1))
    assert np.max(np.abs(exact.se - sampled.se)) < 0.1
    assert np.max(np.abs(exact.outage - sampled.outage)) < 0.02


# campaigns ---------------------------------------------------------------

def test_campaign_independent_of_workers(cfg):
    a = sim.run_campaign(OA40, cfg, 40, 9, workers=1, chunk_size=8)
    b = sim.run_campaign(OA40, cfg, 40, 9, workers=2, chunk_size=8)
    assert np.array_equal(a.records, b.records)


def test_campaign_stream(cfg):
    buf = io.StringIO()
    est = sim.run_campaign(OA40, cfg, 5, 2, stream=buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["drop"] for r in rows] == list(range(5))
    assert rows[3]["m_count"] == est.records[3, sim.RECORD_FIELDS.index("m_count")]


def test_standard_error_shrinks_with_drops(cfg):
    est = sim.run_campaign(OA40, cfg, 800, 6)
    half = sim.SimEstimate(OA40, cfg, 6, est.records[:400])
    ratio = est.metrics()["tput_mms"][1] / half.metrics()["tput_mms"][1]
    assert 0.55 < ratio < 0.9


def test_optimised_split_transfers_to_simulation(cfg):
    res = opt.solve_oa(cfg)
    spec = sim.SchemeSpec("OA", params=res.params)
    m = sim.run_campaign(spec, cfg, 300, 7).metrics()
    (t_f, se_f), (t_m, se_m) = m["tput_fms"], m["tput_mms"]
    assert t_f >= cfg.benefit_ratio * t_m - 3 * math.hypot(se_f, cfg.benefit_ratio * se_m)


def test_split_calibration(cfg):
    cal = sim.calibrate_div(cfg, "DivCA", 150, 5)
    assert cal.feasible
    m0 = cal.estimate.metrics(rho=0.0)
    assert m0["tput_fms"][0] < cfg.benefit_ratio * m0["tput_mms"][0]
    m = cal.estimate.metrics()
    (t_f, se_f), (t_m, se_m) = m["tput_fms"], m["tput_mms"]
    assert t_f >= cfg.benefit_ratio * t_m - 3 * math.hypot(se_f, cfg.benefit_ratio * se_m)
    assert cal.objective <= opt.solve_oa(cfg).objective


def test_bias_calibration_outage_non_decreasing():
    cfg = NetworkConfig(fbs_mean=10.0)
    cal = sim.calibrate_colb(cfg, 60, 1, grid_db=(0, 3, 6, 9))
    assert np.all(np.diff(cal.outage) >= -3 * np.nanmax(cal.outage_se))


@pytest.mark.parametrize("kw", [dict(scheme="CoLB", delta_db=-1.0), dict(scheme="OA"),
                                dict(scheme="CoRSSI", n_max=0), dict(scheme="nope")])
def test_scheme_spec_validation(kw):
    with pytest.raises(ValueError):
        sim.SchemeSpec(**kw)
