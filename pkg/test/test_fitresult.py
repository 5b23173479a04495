import io
import json
import os
import tempfile

from panelgp.ArdKernel import Interval
from panelgp.fit import fit_gp4c, fit_gp4cw, fit_piecewise_constant, predict_intensity
from panelgp.FitResult import MODEL_HEADER, FitConfig, FitResult
from panelgp.funcs import DataFormatError
from panelgp.PanelDataset import PanelDataset, PanelSubject

import numpy as np
import pytest

TINY = FitConfig(n_pseudo=5, max_vem_iters=3, inner_opt_iters=15)


def small_panel():
    def subject(sid, counts):
        edges = np.linspace(0.0, 10.0, len(counts) + 1)
        return PanelSubject(sid, Interval(0.0, 10.0), tuple((Interval(float(edges[i]), float(edges[i + 1])), m) for i, m in enumerate(counts)))

    return PanelDataset((subject("s1", [2, 5, 1]), subject("s2", [0, 3, 4]), subject("s3", [1, 1, 1])))


def assert_same_predictions(a, b):
    grid = np.linspace(0.0, 10.0, 25)
    pa = predict_intensity(a, grid, mc_samples=300, seed=4)
    pb = predict_intensity(b, grid, mc_samples=300, seed=4)
    for x, y in zip(pa, pb):
        assert np.allclose(x, y, rtol=0.0, atol=1e-12)


def test_text_round_trip():
    fit = fit_gp4c(small_panel(), TINY)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "model.txt")
        fit.save(path)
        with open(path, "r") as f:
            assert f.readline().strip() == MODEL_HEADER
        loaded = FitResult.load(path)
    assert loaded.model == "gp4c"
    assert loaded.config == fit.config
    assert loaded.bound_trajectory == fit.bound_trajectory
    assert np.array_equal(loaded.gp.mu, fit.gp.mu)
    assert_same_predictions(fit, loaded)


def test_msgpack_round_trip():
    fit = fit_gp4cw(small_panel(), TINY)
    loaded = FitResult.load(io.BytesIO(bytes(fit)))
    assert loaded.subject_ids == ("s1", "s2", "s3")
    assert np.array_equal(loaded.weights, fit.weights)
    assert_same_predictions(fit, loaded)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "model.msgpack")
        fit.save(path)
        assert FitResult.load(path).weight_of("s2") == fit.weight_of("s2")


def test_pwc_round_trip():
    fit = fit_piecewise_constant(small_panel(), n_bins=3, max_iters=10)
    loaded = FitResult.load(fit.to_text().encode("utf-8"))
    assert loaded.gp is None
    assert np.array_equal(loaded.step.rates, fit.step.rates)
    assert loaded.summary()["gamma"] is None


def test_summary_json():
    fit = fit_gp4c(small_panel(), TINY)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "summary.json")
        fit.save_json(path)
        with open(path) as f:
            summary = json.load(f)
    assert set(summary) == {"final_bound", "gamma", "a", "iterations", "wall_time_s", "converged", "model"}
    assert summary["final_bound"] == fit.final_bound
    assert summary["gamma"] == fit.kernel.variance


def test_load_rejects_bad_input():
    fit = fit_piecewise_constant(small_panel(), n_bins=2, max_iters=3)
    text = fit.to_text()
    with pytest.raises(DataFormatError):
        FitResult.load(text.replace(MODEL_HEADER, "PANELGP-MODEL v0").encode("utf-8"))
    with pytest.raises(DataFormatError):
        FitResult.load((MODEL_HEADER + "\nmodel: \"pwc\"\n").encode("utf-8"))
    with pytest.raises(DataFormatError):
        FitResult.load((MODEL_HEADER + "\nmodel \"pwc\"\n").encode("utf-8"))
    with pytest.raises(DataFormatError):
        FitResult.load(b"\x81\xa3abc\x01")
    with pytest.raises(ValueError):
        FitResult.load(12)


def test_fit_result_validation():
    fit = fit_piecewise_constant(small_panel(), n_bins=2, max_iters=3)
    with pytest.raises(ValueError):
        FitResult(model="gp4c", domain=fit.domain, config=fit.config, step=fit.step)
    with pytest.raises(ValueError):
        FitResult(model="nope", domain=fit.domain, config=fit.config, step=fit.step)
