import io
import os
import tempfile

from panelgp.ArdKernel import ArdKernel, Interval
from panelgp.funcs import DataFormatError
from panelgp.PanelDataset import (
    IntensitySpec,
    PanelDataset,
    PanelSubject,
    RecurrentDataset,
    censor_to_panel,
    draw_gp_intensity,
    sample_ipp,
    simulate_datasets,
    square_wave_h1,
    synthetic_intensity,
    train_test_split,
)

import numpy as np
import pytest
from scipy.stats import chisquare, poisson


def test_square_wave_values():
    assert square_wave_h1(0.0) == 7.0
    assert square_wave_h1(9.999) == 7.0
    assert square_wave_h1(10.0) == 2.0
    assert square_wave_h1(25.0) == 7.0
    h = synthetic_intensity("synthetic_a")
    assert np.array_equal(h(np.array([0.0, 10.0, 20.0, 35.0])), [7.0, 2.0, 7.0, 2.0])
    with pytest.raises(ValueError):
        synthetic_intensity("synthetic_z")


def test_read_panel_csv():
    text = "subject_id,t_start,t_end,count\nb,2,5,3\na,0,1,0\nb,0,2,1\na,1,4,2\n"
    data = PanelDataset.load(io.StringIO(text))
    assert data.subject_ids == ["b", "a"]
    assert data["b"].window == Interval(0.0, 5.0)
    assert np.array_equal(data["b"].counts, [1, 3])
    assert data.total_count == 6


def test_read_panel_csv_header_only():
    data = PanelDataset.load(io.StringIO("subject_id,t_start,t_end,count\n"))
    assert len(data) == 0


@pytest.mark.parametrize(
    "row, column",
    [
        ("a,0,1,-1", "count"),
        ("a,0,1,1.5", "count"),
        ("a,0,x,1", "t_end"),
        ("a,2,1,1", "t_start"),
        (",0,1,1", "subject_id"),
    ],
)
def test_read_panel_csv_rejects_bad_rows(row, column):
    text = "subject_id,t_start,t_end,count\na,1,2,0\n{}\n".format(row)
    with pytest.raises(DataFormatError) as e:
        PanelDataset.load(io.StringIO(text))
    assert e.value.row == 3
    assert e.value.column == column


def test_read_panel_csv_rejects_gaps_and_overlaps():
    with pytest.raises(DataFormatError):
        PanelDataset.load(io.StringIO("subject_id,t_start,t_end,count\na,0,1,0\na,1.5,2,0\n"))
    with pytest.raises(DataFormatError):
        PanelDataset.load(io.StringIO("subject_id,t_start,t_end,count\na,0,1,0\na,0.5,2,0\n"))
    with pytest.raises(DataFormatError):
        PanelDataset.load(io.StringIO("subject_id,t_start\na,0\n"))


def test_panel_csv_round_trip():
    data = PanelDataset.load(io.StringIO("subject_id,t_start,t_end,count\ns1,0,0.1,2\ns1,0.1,3.3333333333333335,0\ns2,1,2,5\n"))
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "panel.csv")
        data.save(path)
        loaded = PanelDataset.load(path)
    assert loaded.subject_ids == data.subject_ids
    for a, b in zip(loaded, data):
        assert a.records == b.records


def test_simulated_csv_round_trips_are_exact():
    sim = simulate_datasets(synthetic_intensity("synthetic_a"), 20, Interval(0.0, 60.0), seed=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        panel_path, recurrent_path = os.path.join(tmpdir, "panel.csv"), os.path.join(tmpdir, "recurrent.csv")
        sim.panel.save(panel_path)
        sim.recurrent.save(recurrent_path)
        panel = PanelDataset.load(panel_path)
        recurrent = RecurrentDataset.load(recurrent_path)
    for a, b in zip(panel, sim.panel):
        assert a.records == b.records
    for a, b in zip(recurrent, sim.recurrent):
        assert np.array_equal(a.timestamps, b.timestamps)


def test_panel_csv_reads_shortest_repr_exactly():
    rng = np.random.default_rng(5)
    values = np.sort(rng.uniform(0.0, 60.0, 2000))
    text = "subject_id,t_start,t_end,count\n" + "".join("s,{!r},{!r},1\n".format(float(s), float(e)) for s, e in zip(values[:-1], values[1:]))
    data = PanelDataset.load(io.StringIO(text))
    assert np.array_equal([iv.start for iv in data["s"].intervals], values[:-1])


def test_recurrent_csv_round_trip():
    text = "subject_id,t\nx,0.5\nx,2.25\n#windows\nsubject_id,window_start,window_end\nx,0,3\ny,1,4\n"
    data = RecurrentDataset.load(io.StringIO(text))
    assert data.subject_ids == ["x", "y"]
    assert data["y"].timestamps.size == 0
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "recurrent.csv")
        data.save(path)
        loaded = RecurrentDataset.load(path)
    assert np.array_equal(loaded["x"].timestamps, [0.5, 2.25])
    assert loaded["y"].window == Interval(1.0, 4.0)


def test_recurrent_csv_errors():
    with pytest.raises(DataFormatError):
        RecurrentDataset.load(io.StringIO("subject_id,t\nx,0.5\n"))
    with pytest.raises(DataFormatError):
        RecurrentDataset.load(io.StringIO("subject_id,t\nz,0.5\n#windows\nsubject_id,window_start,window_end\nx,0,3\n"))
    with pytest.raises(DataFormatError):
        RecurrentDataset.load(io.StringIO("subject_id,t\nx,5\n#windows\nsubject_id,window_start,window_end\nx,0,3\n"))


def test_duplicate_subject_ids():
    window = Interval(0.0, 1.0)
    subject = PanelSubject("a", window, ((window, 1),))
    with pytest.raises(DataFormatError):
        PanelDataset((subject, subject))


def test_sample_ipp_zero_intensity():
    assert sample_ipp(IntensitySpec.constant(0.0), Interval(0.0, 10.0), 1).size == 0


def test_sample_ipp_constant_intensity():
    window = Interval(0.0, 50.0)
    counts = np.array([sample_ipp(IntensitySpec.constant(3.0), window, seed).size for seed in range(200)])
    expected = 3.0 * window.length
    assert abs(counts.mean() - expected) < 4 * np.sqrt(expected / counts.size)
    events = np.concatenate([sample_ipp(IntensitySpec.constant(3.0), window, seed) for seed in range(20)])
    observed, _ = np.histogram(events, bins=10, range=(window.start, window.end))
    assert chisquare(observed).pvalue > 0.001


def test_sample_ipp_square_wave():
    window = Interval(0.0, 60.0)
    events = np.concatenate([sample_ipp(IntensitySpec.square_wave(), window, seed) for seed in range(50)])
    high = np.sum(np.mod(np.floor(events / 10.0), 2) == 0)
    low = events.size - high
    # each phase covers 30 time units: expected 7 * 30 * 50 vs 2 * 30 * 50
    assert abs(high - 10500) < 4 * np.sqrt(10500)
    assert abs(low - 3000) < 4 * np.sqrt(3000)


def test_censor_to_panel_keeps_totals():
    window = Interval(5.0, 55.0)
    events = sample_ipp(IntensitySpec.constant(2.0), window, 3)
    subject = censor_to_panel(events, window, 10, np.ones(10), seed=4)
    assert subject.total_count == events.size
    assert len(subject.records) == 10
    assert subject.records[0][0].start == 5.0 and subject.records[-1][0].end == 55.0
    single = censor_to_panel(np.array([55.0]), window, 1, np.ones(1), seed=0)
    assert single.counts[0] == 1
    with pytest.raises(ValueError):
        censor_to_panel(events, window, 3, np.ones(2), seed=0)


def test_censored_counts_are_poisson_in_the_integrated_intensity():
    window = Interval(5.0, 25.0)
    intensity = IntensitySpec.square_wave()
    # fixed cut points, fresh events every replicate
    replicates = [censor_to_panel(sample_ipp(intensity, window, seed), window, 4, np.ones(4), seed=9) for seed in range(2000)]
    counts = np.array([s.counts for s in replicates])
    for j, (iv, _) in enumerate(replicates[0].records):
        mids = iv.start + (np.arange(200000) + 0.5) * (iv.length / 200000)
        expected_mean = float(np.mean(intensity(mids))) * iv.length
        low, high = poisson.ppf([0.01, 0.99], expected_mean).astype(int)
        ks = np.arange(low, high + 1)
        probs = poisson.pmf(ks, expected_mean)
        probs[0] += poisson.cdf(low - 1, expected_mean)
        probs[-1] += poisson.sf(high, expected_mean)
        observed = np.bincount(np.clip(counts[:, j], low, high) - low, minlength=ks.size)
        assert chisquare(observed, probs * counts.shape[0]).pvalue > 1e-3


def test_draw_gp_intensity():
    domain = Interval(0.0, 10.0)
    h = draw_gp_intensity(ArdKernel(1.0, 2.0), domain, 201, seed=5)
    xs = np.linspace(0.0, 10.0, 201)
    assert np.all(h(xs) >= 0)
    assert np.array_equal(h(xs), draw_gp_intensity(ArdKernel(1.0, 2.0), domain, 201, seed=5)(xs))
    assert h.upper_bound(domain) >= np.max(h(xs))
    with pytest.raises(ValueError):
        draw_gp_intensity(ArdKernel(1.0, 2.0), domain, 1, seed=5)


def test_intensity_table_round_trip():
    domain = Interval(0.0, 60.0)
    h = IntensitySpec.square_wave().scaled(0.5)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "truth.csv")
        h.save_table(path, domain, points=601)
        loaded = IntensitySpec.load_table(path)
    xs = np.linspace(0.0, 60.0, 601)
    assert np.array_equal(loaded.params["xs"], xs)
    assert np.allclose(loaded(xs), h(xs))


def test_simulate_datasets_is_deterministic():
    window = Interval(5.0, 55.0)
    a = simulate_datasets(IntensitySpec.square_wave(), 6, window, seed=8, multiplier_range=(0.5, 1.5))
    b = simulate_datasets(IntensitySpec.square_wave(), 6, window, seed=8, multiplier_range=(0.5, 1.5))
    assert np.array_equal(a.multipliers, b.multipliers)
    for x, y in zip(a.recurrent, b.recurrent):
        assert np.array_equal(x.timestamps, y.timestamps)
    for r, p in zip(a.recurrent, a.panel):
        assert r.timestamps.size == p.total_count
    assert np.all((a.multipliers >= 0.5) & (a.multipliers <= 1.5))


def test_train_test_split():
    sim = simulate_datasets(IntensitySpec.constant(1.0), 10, Interval(0.0, 10.0), n_intervals=3, seed=1)
    train, test = train_test_split(sim.panel, 0.5, seed=2)
    assert len(train) == 5 and len(test) == 5
    assert set(train.subject_ids).isdisjoint(test.subject_ids)
    again, _ = train_test_split(sim.panel, 0.5, seed=2)
    assert again.subject_ids == train.subject_ids
    with pytest.raises(ValueError):
        train_test_split(sim.panel, 1.0, seed=2)
