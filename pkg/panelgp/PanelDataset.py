import io
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

from panelgp.ArdKernel import ArdKernel, Interval, gram
from panelgp.funcs import DataFormatError, cholesky_escalating, make_rng

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PANEL_COLUMNS = ["subject_id", "t_start", "t_end", "count"]
EVENT_COLUMNS = ["subject_id", "t"]
WINDOW_COLUMNS = ["subject_id", "window_start", "window_end"]
WINDOWS_MARKER = "#windows"
FLOAT_FORMAT = "%.17g"
# gaps and overlaps smaller than this between consecutive intervals are closed on ingestion
GAP_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class PanelSubject:
    id: str
    window: Interval
    records: tuple

    def __post_init__(self):
        records = tuple((iv, int(m)) for iv, m in self.records)
        if not records:
            raise DataFormatError("a panel subject needs at least one interval", subject=self.id)
        for iv, m in records:
            if m < 0:
                raise DataFormatError("negative count {} on {}".format(m, iv), subject=self.id)
        for (prev, _), (cur, _) in zip(records, records[1:]):
            if abs(cur.start - prev.end) > GAP_TOLERANCE:
                kind = "overlap" if cur.start < prev.end else "gap"
                raise DataFormatError("{} between {} and {}".format(kind, prev, cur), subject=self.id)
        if abs(records[0][0].start - self.window.start) > GAP_TOLERANCE or abs(records[-1][0].end - self.window.end) > GAP_TOLERANCE:
            raise DataFormatError("intervals do not cover the window {}".format(self.window), subject=self.id)
        object.__setattr__(self, "records", records)

    @classmethod
    def from_records(cls, subject_id, records):
        """Build a subject from unsorted (Interval, count) pairs, closing roundoff gaps."""
        ordered = sorted(records, key=lambda r: (r[0].start, r[0].end))
        closed = []
        for iv, m in ordered:
            if closed:
                prev = closed[-1][0]
                diff = iv.start - prev.end
                if diff < -GAP_TOLERANCE:
                    raise DataFormatError("overlap between {} and {}".format(prev, iv), subject=subject_id)
                if diff > GAP_TOLERANCE:
                    raise DataFormatError("gap between {} and {}".format(prev, iv), subject=subject_id)
                if diff != 0.0:
                    iv = Interval(prev.end, max(prev.end, iv.end))
            closed.append((iv, m))
        if not closed:
            raise DataFormatError("a panel subject needs at least one interval", subject=subject_id)
        window = Interval(closed[0][0].start, closed[-1][0].end)
        return cls(str(subject_id), window, tuple(closed))

    @property
    def intervals(self):
        return [iv for iv, _ in self.records]

    @property
    def counts(self):
        return np.array([m for _, m in self.records], dtype=int)

    @property
    def total_count(self):
        return int(sum(m for _, m in self.records))


class PanelArrays(NamedTuple):
    subject_index: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    counts: np.ndarray


class _Subjects:
    subjects: tuple

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, key):
        if isinstance(key, str):
            for s in self.subjects:
                if s.id == key:
                    return s
            raise KeyError("no such subject: {}".format(key))
        return self.subjects[key]

    @property
    def subject_ids(self):
        return [s.id for s in self.subjects]

    def select(self, ids):
        wanted = set(ids)
        return type(self)(tuple(s for s in self.subjects if s.id in wanted))

    @property
    def domain(self):
        if not self.subjects:
            raise ValueError("empty dataset has no domain")
        return Interval(min(s.window.start for s in self.subjects), max(s.window.end for s in self.subjects))

    @property
    def total_length(self):
        return float(sum(s.window.length for s in self.subjects))


@dataclass(frozen=True, eq=False)
class PanelDataset(_Subjects):
    subjects: tuple = field(default_factory=tuple)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate subject ids")
        object.__setattr__(self, "subjects", subjects)

    @property
    def total_count(self):
        return int(sum(s.total_count for s in self.subjects))

    def arrays(self):
        subject_index, starts, ends, counts = [], [], [], []
        for k, s in enumerate(self.subjects):
            for iv, m in s.records:
                subject_index.append(k)
                starts.append(iv.start)
                ends.append(iv.end)
                counts.append(m)
        return PanelArrays(np.array(subject_index, dtype=int), np.array(starts, dtype=float), np.array(ends, dtype=float), np.array(counts, dtype=int))

    @classmethod
    def load(cls, filelike):
        return read_panel_csv(filelike)

    def save(self, filename):
        write_panel_csv(self, filename)

    def __str__(self):
        return "PanelDataset({} subjects, {} intervals, {} events)".format(len(self), sum(len(s.records) for s in self.subjects), self.total_count)


@dataclass(frozen=True, eq=False)
class RecurrentSubject:
    id: str
    window: Interval
    timestamps: np.ndarray

    def __post_init__(self):
        ts = np.sort(np.asarray(self.timestamps, dtype=float).reshape(-1))
        if ts.size and (ts[0] < self.window.start or ts[-1] > self.window.end):
            raise DataFormatError("timestamps outside the window {}".format(self.window), subject=self.id)
        object.__setattr__(self, "timestamps", ts)


@dataclass(frozen=True, eq=False)
class RecurrentDataset(_Subjects):
    subjects: tuple = field(default_factory=tuple)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate subject ids")
        object.__setattr__(self, "subjects", subjects)

    @property
    def total_count(self):
        return int(sum(s.timestamps.size for s in self.subjects))

    @classmethod
    def load(cls, filelike):
        return read_recurrent_csv(filelike)

    def save(self, filename):
        write_recurrent_csv(self, filename)

    def __str__(self):
        return "RecurrentDataset({} subjects, {} events)".format(len(self), self.total_count)


def _parse_float(text):
    # float() is correctly rounded, so "%.17g" output reads back bit for bit
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def _numeric_column(df, column, row_offset, integer=False):
    values = df[column].map(_parse_float).to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise DataFormatError("'{}' is not a finite number".format(df[column].iloc[idx]), row=idx + row_offset, column=column)
    if integer:
        frac = values != np.round(values)
        if frac.any():
            idx = int(np.flatnonzero(frac)[0])
            raise DataFormatError("count {} is not an integer".format(values[idx]), row=idx + row_offset, column=column)
        return values.astype(np.int64)
    return values


def _read_frame(text, columns, row_offset):
    try:
        df = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataFormatError("missing header", row=row_offset - 1) from None
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataFormatError("missing column(s) {}".format(", ".join(missing)), row=row_offset - 1)
    empty_ids = (df["subject_id"].str.strip() == "").to_numpy()
    if empty_ids.any():
        raise DataFormatError("empty subject id", row=int(np.flatnonzero(empty_ids)[0]) + row_offset, column="subject_id")
    return df


def _read_text(filelike):
    if isinstance(filelike, io.StringIO):
        return filelike.getvalue()
    with open(filelike, "r", encoding="utf-8") as f:
        return f.read()


def read_panel_csv(filelike):
    """Read ``subject_id,t_start,t_end,count`` rows into a PanelDataset.

    Rows need not be grouped; subjects keep their order of first appearance
    and records are sorted by start time.
    """
    df = _read_frame(_read_text(filelike), PANEL_COLUMNS, 2)
    starts = _numeric_column(df, "t_start", 2)
    ends = _numeric_column(df, "t_end", 2)
    counts = _numeric_column(df, "count", 2, integer=True)

    grouped = {}
    for row, (sid, s, e, m) in enumerate(zip(df["subject_id"].str.strip(), starts, ends, counts)):
        if m < 0:
            raise DataFormatError("negative count {}".format(m), row=row + 2, column="count")
        if s > e:
            raise DataFormatError("t_start {} is after t_end {}".format(s, e), row=row + 2, column="t_start")
        grouped.setdefault(sid, []).append((Interval(float(s), float(e)), int(m)))
    return PanelDataset(tuple(PanelSubject.from_records(sid, records) for sid, records in grouped.items()))


def write_panel_csv(data, filename):
    rows = [(s.id, iv.start, iv.end, m) for s in data for iv, m in s.records]
    df = pd.DataFrame(rows, columns=PANEL_COLUMNS)
    df.to_csv(filename, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_recurrent_csv(filelike):
    """Read event rows ``subject_id,t``, then a ``#windows`` line and ``subject_id,window_start,window_end`` rows."""
    lines = _read_text(filelike).split("\n")
    try:
        marker = next(i for i, line in enumerate(lines) if line.strip() == WINDOWS_MARKER)
    except StopIteration:
        raise DataFormatError("missing '{}' section".format(WINDOWS_MARKER)) from None

    events = _read_frame("\n".join(lines[:marker]), EVENT_COLUMNS, 2)
    windows = _read_frame("\n".join(lines[marker + 1 :]), WINDOW_COLUMNS, marker + 3)
    ts = _numeric_column(events, "t", 2)
    w_start = _numeric_column(windows, "window_start", marker + 3)
    w_end = _numeric_column(windows, "window_end", marker + 3)

    window_of = {}
    for row, (sid, s, e) in enumerate(zip(windows["subject_id"].str.strip(), w_start, w_end)):
        if sid in window_of:
            raise DataFormatError("duplicate window", row=row + marker + 3, subject=sid)
        if s > e:
            raise DataFormatError("window_start {} is after window_end {}".format(s, e), row=row + marker + 3)
        window_of[sid] = Interval(float(s), float(e))

    times = {sid: [] for sid in window_of}
    for row, (sid, t) in enumerate(zip(events["subject_id"].str.strip(), ts)):
        if sid not in times:
            raise DataFormatError("event for a subject without a window", row=row + 2, subject=sid)
        times[sid].append(float(t))
    return RecurrentDataset(tuple(RecurrentSubject(sid, window_of[sid], np.array(times[sid])) for sid in window_of))


def write_recurrent_csv(data, filename):
    events = pd.DataFrame([(s.id, t) for s in data for t in s.timestamps], columns=EVENT_COLUMNS)
    windows = pd.DataFrame([(s.id, s.window.start, s.window.end) for s in data], columns=WINDOW_COLUMNS)
    with open(filename, "w", encoding="utf-8", newline="\n") as f:
        events.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        f.write(WINDOWS_MARKER + "\n")
        windows.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def square_wave_h1(x):
    """7 where floor(x / 10) is even, 2 otherwise."""
    return 7.0 if math.floor(x / 10.0) % 2 == 0 else 2.0


@dataclass(frozen=True, eq=False)
class IntensitySpec:
    """A nonnegative intensity on the time axis.

    kinds: ``square_wave`` (high, low, period), ``constant`` (value),
    ``table`` (xs, values; linear interpolation). ``scale`` multiplies any kind.
    """

    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in ("square_wave", "constant", "table"):
            raise ValueError("unknown intensity kind: {}".format(self.kind))
        if self.kind == "table":
            xs = np.asarray(self.params["xs"], dtype=float)
            values = np.asarray(self.params["values"], dtype=float)
            if xs.size < 2 or xs.shape != values.shape or np.any(np.diff(xs) <= 0):
                raise ValueError("table intensity needs >= 2 strictly increasing xs with matching values")
            if np.any(values < 0):
                raise ValueError("table intensity values must be nonnegative")
        elif self.kind == "constant" and self.params["value"] < 0:
            raise ValueError("constant intensity must be nonnegative")
        if self.params.get("scale", 1.0) < 0:
            raise ValueError("intensity scale must be nonnegative")

    @classmethod
    def square_wave(cls, high=7.0, low=2.0, period=10.0):
        return cls("square_wave", {"high": high, "low": low, "period": period})

    @classmethod
    def constant(cls, value):
        return cls("constant", {"value": float(value)})

    @classmethod
    def table(cls, xs, values):
        return cls("table", {"xs": np.asarray(xs, dtype=float), "values": np.asarray(values, dtype=float)})

    @classmethod
    def gp_draw(cls, kernel, domain, grid_size=3001, seed=0):
        return draw_gp_intensity(kernel, domain, grid_size, seed)

    def scaled(self, factor):
        params = dict(self.params)
        params["scale"] = params.get("scale", 1.0) * factor
        return IntensitySpec(self.kind, params)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "square_wave":
            value = np.where(np.mod(np.floor(x / p["period"]), 2) == 0, p["high"], p["low"])
        elif self.kind == "constant":
            value = np.full_like(x, p["value"])
        else:
            value = np.interp(x, p["xs"], p["values"])
        return value * p.get("scale", 1.0)

    def upper_bound(self, window):
        p = self.params
        if self.kind == "square_wave":
            bound = max(p["high"], p["low"])
        elif self.kind == "constant":
            bound = p["value"]
        else:
            inside = (p["xs"] >= window.start) & (p["xs"] <= window.end)
            ends = np.interp([window.start, window.end], p["xs"], p["values"])
            bound = max(float(np.max(p["values"][inside])) if inside.any() else 0.0, float(np.max(ends)))
        return float(bound) * p.get("scale", 1.0)

    def save_table(self, filename, domain, points=6001):
        xs = np.linspace(domain.start, domain.end, points)
        pd.DataFrame({"x": xs, "intensity": self(xs)}).to_csv(filename, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    @classmethod
    def load_table(cls, filename):
        df = _read_frame_numeric(filename, ["x", "intensity"])
        return cls.table(df["x"].to_numpy(), df["intensity"].to_numpy())


def _read_frame_numeric(filename, columns):
    df = pd.read_csv(filename, dtype=str, keep_default_na=False, skipinitialspace=True)
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataFormatError("missing column(s) {} in {}".format(", ".join(missing), filename))
    return pd.DataFrame({c: _numeric_column(df, c, 2) for c in columns})


def draw_gp_intensity(kernel, domain, grid_size, seed):
    """Square of a zero-mean GP path on an evenly spaced grid, as a table intensity."""
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2, got {}".format(grid_size))
    grid = np.linspace(domain.start, domain.end, grid_size)
    chol = cholesky_escalating(gram(kernel, grid, grid))
    path = chol @ make_rng(seed).standard_normal(grid_size)
    return IntensitySpec.table(grid, path**2)


def sample_ipp(intensity, window, seed):
    """Lewis thinning: homogeneous candidates at the upper bound, kept with probability lambda(t) / bound."""
    bound = intensity.upper_bound(window)
    if bound <= 0 or window.length <= 0:
        return np.array([], dtype=float)
    rng = make_rng(seed)
    n = rng.poisson(bound * window.length)
    candidates = np.sort(rng.uniform(window.start, window.end, n))
    keep = rng.uniform(0.0, 1.0, n) * bound < intensity(candidates)
    return candidates[keep]


def censor_to_panel(events, window, n_intervals, theta, seed, subject_id="0"):
    """Cut the window at cumulative Dirichlet(theta) weights and count events per interval."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if n_intervals < 1 or theta.size != n_intervals:
        raise ValueError("theta must have n_intervals >= 1 entries")
    if n_intervals == 1:
        weights = np.ones(1)
    else:
        weights = make_rng(seed).dirichlet(theta)
    edges = window.start + np.concatenate([[0.0], np.cumsum(weights)]) * window.length
    edges[-1] = window.end
    events = np.asarray(events, dtype=float)
    # half-open [start, end); the window end itself belongs to the last interval
    index = np.clip(np.searchsorted(edges, events, side="right") - 1, 0, n_intervals - 1)
    counts = np.bincount(index, minlength=n_intervals)
    records = tuple((Interval(float(edges[i]), float(edges[i + 1])), int(counts[i])) for i in range(n_intervals))
    return PanelSubject(str(subject_id), window, records)


def train_test_split(data, train_fraction, seed):
    """Subject-level random split; the training set gets round(K * fraction) subjects."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1), got {}".format(train_fraction))
    K = len(data)
    if K < 2:
        raise ValueError("need at least 2 subjects to split, got {}".format(K))
    n_train = min(max(int(math.floor(K * train_fraction + 0.5)), 1), K - 1)
    order = make_rng(seed).permutation(K)
    train_idx = set(int(i) for i in order[:n_train])
    train = type(data)(tuple(s for k, s in enumerate(data.subjects) if k in train_idx))
    test = type(data)(tuple(s for k, s in enumerate(data.subjects) if k not in train_idx))
    return train, test


@dataclass(frozen=True, eq=False)
class SimulatedData:
    recurrent: RecurrentDataset
    panel: PanelDataset
    multipliers: np.ndarray


def simulate_datasets(intensity, n_subjects, window, n_intervals=10, theta=None, seed=0, multiplier_range=None):
    """Recurrent events per subject by thinning, then Dirichlet censoring into panel counts.

    ``multiplier_range=(low, high)`` scales each subject's intensity by a
    uniform draw, giving heterogeneous subjects.
    """
    theta = np.ones(n_intervals) if theta is None else np.asarray(theta, dtype=float)
    seeds = np.random.SeedSequence(seed).generate_state(2 * n_subjects + 1, dtype=np.uint64)
    if multiplier_range is None:
        multipliers = np.ones(n_subjects)
    else:
        low, high = multiplier_range
        multipliers = make_rng(int(seeds[-1])).uniform(low, high, n_subjects)

    recurrent, panel = [], []
    for k in range(n_subjects):
        sid = str(k)
        events = sample_ipp(intensity.scaled(multipliers[k]), window, int(seeds[2 * k]))
        recurrent.append(RecurrentSubject(sid, window, events))
        panel.append(censor_to_panel(events, window, n_intervals, theta, int(seeds[2 * k + 1]), subject_id=sid))
    logger.info("simulated %d subjects with %d events", n_subjects, sum(r.timestamps.size for r in recurrent))
    return SimulatedData(RecurrentDataset(tuple(recurrent)), PanelDataset(tuple(panel)), multipliers)


SYNTHETIC_DOMAIN = Interval(0.0, 60.0)
_SYNTHETIC_GP = {
    "synthetic_b": (ArdKernel(2.0, 5.0), 1),
    "synthetic_c": (ArdKernel(4.0, 2.5), 2),
}


def synthetic_intensity(name):
    """Truth intensity of a named synthetic design on [0, 60]."""
    if name == "synthetic_a":
        return IntensitySpec.square_wave()
    if name in _SYNTHETIC_GP:
        kernel, seed = _SYNTHETIC_GP[name]
        return draw_gp_intensity(kernel, SYNTHETIC_DOMAIN, 3001, seed)
    raise ValueError("unknown synthetic design: {}".format(name))
