import math
import os
import tempfile

from panelgp import evaluate
from panelgp.ArdKernel import ArdKernel, Interval
from panelgp.fit import fit_piecewise_constant
from panelgp.FitResult import FitConfig, FitResult
from panelgp.objective import panel_loglik
from panelgp.PanelDataset import IntensitySpec, PanelDataset, PanelSubject, simulate_datasets
from panelgp.SparseVariationalGP import SparseVariationalGP, sample_function

import numpy as np
import pandas as pd
import pytest
from scipy.special import gammaln

DOMAIN = Interval(0.0, 10.0)


def gp_fit(model="gp4c", chol_scale=0.3, weights=None, subject_ids=()):
    z = np.linspace(DOMAIN.start, DOMAIN.end, 11)
    mu = 1.5 + 0.5 * np.sin(z / 2.0)
    gp = SparseVariationalGP(z, mu, chol_scale * np.eye(z.size), ArdKernel(1.0, 2.0))
    return FitResult(model=model, domain=DOMAIN, config=FitConfig(), gp=gp, weights=weights, subject_ids=subject_ids)


def held_out(n_subjects=5, seed=0):
    return simulate_datasets(IntensitySpec.constant(2.0), n_subjects, DOMAIN, n_intervals=4, seed=seed).panel


def log_factorials(data):
    return float(sum(np.sum(gammaln(s.counts + 1.0)) for s in data))


def test_mise_values():
    zero = lambda x: np.zeros_like(x)  # noqa: E731
    assert evaluate.mise(zero, zero, DOMAIN) == 0.0
    assert evaluate.mise(lambda x: np.full_like(x, 0.5), zero, DOMAIN) == pytest.approx(0.25 * 10.0)
    assert evaluate.mise(lambda x: np.full_like(x, 5.0), zero, Interval(0.0, 15.0)) == pytest.approx(375.0)
    h = IntensitySpec.square_wave()
    flat = IntensitySpec.constant(4.5)
    domain = Interval(0.0, 60.0)
    assert evaluate.mise(h, flat, domain) == pytest.approx(evaluate.mise(flat, h, domain))


def test_empty_test_set():
    report = evaluate.test_log_likelihood(gp_fit(), PanelDataset(()), U=3, path_grid=101, quad_points=11)
    assert report.test_ll == 0.0
    assert report.per_subject_ll == ()


def test_single_path_matches_plug_in():
    fit, data = gp_fit(), held_out()
    report = evaluate.test_log_likelihood(fit, data, U=1, path_grid=301, quad_points=101, seed=3)
    grid = np.linspace(DOMAIN.start, DOMAIN.end, 301)
    path = sample_function(fit.gp, grid, 3, 1)[0] ** 2
    expected = panel_loglik(lambda x: np.interp(x, grid, path), data, quad_points=101) + log_factorials(data)
    assert report.test_ll == pytest.approx(expected, rel=1e-9, abs=1e-9)
    assert math.isnan(report.jackknife_se)


def test_per_subject_terms_sum_to_total():
    report = evaluate.test_log_likelihood(gp_fit(), held_out(8), U=20, path_grid=301, quad_points=51)
    assert sum(v for _, v in report.per_subject_ll) == pytest.approx(report.test_ll, rel=1e-10, abs=1e-10)
    assert report.jackknife_se >= 0.0


def test_subject_order_does_not_matter():
    data = held_out(6, seed=1)
    reordered = PanelDataset(tuple(reversed(data.subjects)))
    a = evaluate.test_log_likelihood(gp_fit(), data, U=10, path_grid=301, quad_points=51)
    b = evaluate.test_log_likelihood(gp_fit(), reordered, U=10, path_grid=301, quad_points=51)
    assert a.test_ll == pytest.approx(b.test_ll, rel=1e-12)
    assert dict(a.per_subject_marginal_ll) == pytest.approx(dict(b.per_subject_marginal_ll), rel=1e-12)


def test_near_deterministic_posterior():
    fit, data = gp_fit(chol_scale=1e-4), held_out(4, seed=2)
    report = evaluate.test_log_likelihood(fit, data, U=20, path_grid=501, quad_points=101)
    plug_in = panel_loglik(evaluate.mean_intensity(fit), data, quad_points=101) + log_factorials(data)
    assert report.test_ll == pytest.approx(plug_in, rel=1e-2)


def test_step_fit_is_scored_by_plug_in():
    data = held_out(6, seed=4)
    fit = fit_piecewise_constant(data, n_bins=1, max_iters=3)
    report = evaluate.test_log_likelihood(fit, data, U=7)
    assert report.test_ll == pytest.approx(panel_loglik(fit.step, data) + log_factorials(data), rel=1e-10)
    assert report.jackknife_se == 0.0


def test_weighted_fit_scores_unseen_subjects_with_training_weights():
    data = PanelDataset(
        (
            PanelSubject("quiet", DOMAIN, ((DOMAIN, 0),)),
            PanelSubject("busy", DOMAIN, ((DOMAIN, 20),)),
            PanelSubject("c", DOMAIN, ((DOMAIN, 3),)),
        )
    )
    fit = gp_fit(model="gp4cw", weights=np.array([0.5, 1.0, 4.0]), subject_ids=("a", "b", "c"))
    np.testing.assert_array_equal(evaluate.test_weights(fit, data), [1.0, 1.0, 4.0])

    report = evaluate.test_log_likelihood(fit, data, U=5, path_grid=201, quad_points=51)
    plain = evaluate.test_log_likelihood(gp_fit(), data, U=5, path_grid=201, quad_points=51)
    marginal = dict(report.per_subject_marginal_ll)
    unweighted = dict(plain.per_subject_marginal_ll)
    # median weight 1 leaves unseen subjects scored exactly as under GP4C
    assert marginal["quiet"] == pytest.approx(unweighted["quiet"], rel=1e-12)
    assert marginal["busy"] == pytest.approx(unweighted["busy"], rel=1e-12)
    assert marginal["quiet"] < -1.0
    assert marginal["c"] != pytest.approx(unweighted["c"])


def test_report_files():
    truth = IntensitySpec.constant(2.0)
    report = evaluate.test_log_likelihood(gp_fit(), held_out(3), U=4, path_grid=201, quad_points=51, truth=truth)
    assert report.mise == pytest.approx(evaluate.mise(evaluate.mean_intensity(gp_fit()), truth, DOMAIN))
    with tempfile.TemporaryDirectory() as tmpdir:
        report.save_json(os.path.join(tmpdir, "report.json"))
        report.save_per_subject_csv(os.path.join(tmpdir, "per_subject.csv"))
        frame = pd.read_csv(os.path.join(tmpdir, "per_subject.csv"), dtype={"subject_id": str})
    assert list(frame.columns) == ["subject_id", "test_ll", "marginal_ll"]
    assert frame["subject_id"].tolist() == ["0", "1", "2"]
    assert report.as_dict()["n_subjects"] == 3


def test_rejects_bad_path_count():
    with pytest.raises(ValueError):
        evaluate.test_log_likelihood(gp_fit(), held_out(), U=0)
