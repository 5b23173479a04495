import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from panelgp.ArdKernel import ArdKernel, Interval
from panelgp.funcs import DataFormatError, msg_pack, msg_unpack
from panelgp.SparseVariationalGP import SparseVariationalGP

import numpy as np

MODEL_HEADER = "PANELGP-MODEL v1"
MODEL_KINDS = ("gp4c", "gp3", "gp4cw", "pwc")


@dataclass(frozen=True)
class FitConfig:
    n_pseudo: int = 30
    b: float = 0.3
    max_vem_iters: int = 100
    inner_opt_iters: int = 50
    rel_tol: float = 1e-6
    jitter: float = 1e-6
    seed: int = 0
    weight_floor: float = 1e-6
    # piecewise-constant baseline; None picks ceil(sqrt(total intervals))
    n_bins: Optional[int] = None
    pwc_iters: int = 500

    def __post_init__(self):
        if self.n_pseudo < 2:
            raise ValueError("n_pseudo must be at least 2, got {}".format(self.n_pseudo))
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must lie in [0, 1], got {}".format(self.b))
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive, got {}".format(self.rel_tol))
        if not self.jitter > 0:
            raise ValueError("jitter must be positive, got {}".format(self.jitter))
        if not self.weight_floor > 0:
            raise ValueError("weight_floor must be positive, got {}".format(self.weight_floor))
        if self.max_vem_iters < 1 or self.inner_opt_iters < 1 or self.pwc_iters < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.n_bins is not None and self.n_bins < 1:
            raise ValueError("n_bins must be at least 1, got {}".format(self.n_bins))


def bin_overlaps(edges, starts, ends):
    """|[start_i, end_i] ∩ bin_j| for every interval i and bin j, shape (N, B)."""
    edges = np.asarray(edges, dtype=float)
    starts = np.asarray(starts, dtype=float).reshape(-1, 1)
    ends = np.asarray(ends, dtype=float).reshape(-1, 1)
    lo = np.maximum(starts, edges[None, :-1])
    hi = np.minimum(ends, edges[None, 1:])
    return np.maximum(hi - lo, 0.0)


@dataclass(frozen=True, eq=False)
class StepIntensity:
    """Intensity constant on consecutive bins ``[edges[j], edges[j+1])``; zero outside."""

    edges: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float).reshape(-1)
        rates = np.asarray(self.rates, dtype=float).reshape(-1)
        if edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("step edges must be at least 2 strictly increasing values")
        if rates.size != edges.size - 1 or np.any(rates < 0):
            raise ValueError("need one nonnegative rate per bin")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "rates", rates)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        index = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, self.rates.size - 1)
        inside = (x >= self.edges[0]) & (x <= self.edges[-1])
        return np.where(inside, self.rates[index], 0.0)

    def integral(self, starts, ends):
        return bin_overlaps(self.edges, starts, ends) @ self.rates


@dataclass(frozen=True, eq=False)
class FitResult:
    """A fitted model: GP posterior (or step function), trajectories and timing.

    ``bound_trajectory[0]`` is the objective at initialization, one entry per
    completed vEM iteration follows. For ``pwc`` fits the trajectory holds the
    panel log-likelihood.
    """

    model: str
    domain: Interval
    config: FitConfig
    gp: Optional[SparseVariationalGP] = None
    step: Optional[StepIntensity] = None
    bound_trajectory: tuple = ()
    hyper_trajectory: tuple = ()
    weights: Optional[np.ndarray] = None
    subject_ids: tuple = ()
    wall_time: float = 0.0
    converged: bool = False
    iterations: int = 0
    n_evaluations: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError("unknown model kind: {}".format(self.model))
        if (self.model == "pwc") != (self.step is not None) or (self.model != "pwc") != (self.gp is not None):
            raise ValueError("{} fits need {}".format(self.model, "a step intensity" if self.model == "pwc" else "a GP"))
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float)
            if weights.shape != (len(self.subject_ids),):
                raise ValueError("need one weight per subject id")
            if np.any(weights < self.config.weight_floor):
                raise ValueError("weights must be at least the weight floor {}".format(self.config.weight_floor))
            object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bound_trajectory", tuple(float(v) for v in self.bound_trajectory))
        object.__setattr__(self, "hyper_trajectory", tuple((float(g), float(a)) for g, a in self.hyper_trajectory))
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))

    @property
    def kernel(self):
        return None if self.gp is None else self.gp.kernel

    @property
    def final_bound(self):
        return self.bound_trajectory[-1] if self.bound_trajectory else float("nan")

    def weight_of(self, subject_id):
        if self.weights is None:
            return 1.0
        try:
            return float(self.weights[self.subject_ids.index(str(subject_id))])
        except ValueError:
            raise KeyError("no weight for subject: {}".format(subject_id)) from None

    def summary(self):
        kernel = self.kernel
        return {
            "model": self.model,
            "final_bound": self.final_bound,
            "gamma": None if kernel is None else kernel.variance,
            "a": None if kernel is None else kernel.lengthscale,
            "iterations": self.iterations,
            "wall_time_s": self.wall_time,
            "converged": self.converged,
        }

    def to_dict(self):
        data = {
            "model": self.model,
            "domain": [self.domain.start, self.domain.end],
            "config": asdict(self.config),
            "bound_trajectory": list(self.bound_trajectory),
            "hyper_trajectory": [list(h) for h in self.hyper_trajectory],
            "weights": None if self.weights is None else self.weights.tolist(),
            "subject_ids": list(self.subject_ids),
            "wall_time": self.wall_time,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_evaluations": self.n_evaluations,
            "extra": self.extra,
        }
        if self.gp is not None:
            data["gp"] = {
                "pseudo_inputs": self.gp.pseudo_inputs.tolist(),
                "mu": self.gp.mu.tolist(),
                "chol_sigma": self.gp.chol_sigma.tolist(),
                "variance": self.gp.kernel.variance,
                "lengthscale": self.gp.kernel.lengthscale,
                "jitter": self.gp.jitter,
            }
        if self.step is not None:
            data["step"] = {"edges": self.step.edges.tolist(), "rates": self.step.rates.tolist()}
        return data

    @classmethod
    def from_dict(cls, data):
        try:
            gp = None
            if data.get("gp") is not None:
                g = data["gp"]
                gp = SparseVariationalGP(
                    np.array(g["pseudo_inputs"], dtype=float),
                    np.array(g["mu"], dtype=float),
                    np.array(g["chol_sigma"], dtype=float),
                    ArdKernel(g["variance"], g["lengthscale"]),
                    g["jitter"],
                )
            step = None
            if data.get("step") is not None:
                step = StepIntensity(np.array(data["step"]["edges"]), np.array(data["step"]["rates"]))
            return cls(
                model=data["model"],
                domain=Interval(*data["domain"]),
                config=FitConfig(**data["config"]),
                gp=gp,
                step=step,
                bound_trajectory=data["bound_trajectory"],
                hyper_trajectory=data["hyper_trajectory"],
                weights=None if data["weights"] is None else np.array(data["weights"], dtype=float),
                subject_ids=data["subject_ids"],
                wall_time=data["wall_time"],
                converged=data["converged"],
                iterations=data["iterations"],
                n_evaluations=data.get("n_evaluations", 0),
                extra=data.get("extra", {}),
            )
        except (KeyError, TypeError) as e:
            raise DataFormatError("incomplete fitted model: {}".format(e)) from None

    @classmethod
    def load(cls, filelike):
        """Load a fitted model from a path, bytes or BytesIO, text or msgpack encoded."""
        if isinstance(filelike, str):
            with open(filelike, "br") as f:
                raw = f.read()
        elif isinstance(filelike, bytes):
            raw = filelike
        elif isinstance(filelike, io.BytesIO):
            raw = filelike.getvalue()
        else:
            raise ValueError("unsupported input. type:{}".format(type(filelike)))

        if raw.startswith(MODEL_HEADER.encode("ascii")):
            return cls.from_dict(_parse_text(raw.decode("utf-8")))
        try:
            data = msg_unpack(raw)
        except (ValueError, TypeError) as e:
            raise DataFormatError("not a fitted model file: {}".format(e)) from None
        if not isinstance(data, dict) or data.get("format") != MODEL_HEADER:
            raise DataFormatError("not a fitted model file")
        return cls.from_dict(data["fit"])

    def __bytes__(self):
        serialized, _ = msg_pack({"format": MODEL_HEADER, "fit": self.to_dict()})
        return serialized

    def to_text(self):
        lines = [MODEL_HEADER]
        for key, value in self.to_dict().items():
            lines.append("{}: {}".format(key, json.dumps(value)))
        return "\n".join(lines) + "\n"

    def save(self, filename):
        if str(filename).endswith(".msgpack"):
            with open(filename, "bw+") as f:
                f.write(bytes(self))
        else:
            with open(filename, "w", encoding="utf-8", newline="\n") as f:
                f.write(self.to_text())

    def save_json(self, filename):
        with open(filename, "w+") as f:
            json.dump(self.summary(), f, indent=2)

    def __str__(self):
        if self.gp is None:
            return "FitResult(pwc, {} bins, loglik {:.6g})".format(self.step.rates.size, self.final_bound)
        return "FitResult({}, R={}, gamma={:.4g}, a={:.4g}, bound {:.6g})".format(self.model, self.gp.size, self.gp.kernel.variance, self.gp.kernel.lengthscale, self.final_bound)


def _parse_text(text):
    lines = text.split("\n")
    if lines[0].strip() != MODEL_HEADER:
        raise DataFormatError("unsupported model header: {}".format(lines[0].strip()), row=1)
    data = {}
    for row, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise DataFormatError("expected 'key: value'", row=row)
        try:
            data[key.strip()] = json.loads(value)
        except json.JSONDecodeError as e:
            raise DataFormatError("invalid value: {}".format(e.msg), row=row, column=key.strip()) from None
    return data
