"""Structural causal model for the lung-nodule prognosis scenario.

Variables (all normals parameterized by standard deviation)::

    u1 ~ N(0, sd_u1)                        aggressiveness (unobserved)
    u2 ~ N(0, sd_u2)                        fitness (unobserved)
    z  ~ N(0, sd_z)                         heterogeneity (prognostic)
    x  ~ N(u1 - u2, sd_x)                   size (collider)
    t  ~ Bern(logistic(N(t_slope*u2 + t_offset, t_noise_sd)))
    y  ~ N(y_treat_coef*t + y_z_coef*z + y_u1_coef*u1 + y_offset, y_noise_sd)

Each subject ``i`` consumes eight uniforms from its own substream block (see
:mod:`collidernet.streams`), in the column order u1, u2, z, x-noise, t-noise,
t-draw, y-noise, spare.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np
from scipy.special import expit, ndtri

from . import ols, streams


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ScmParams:
    sd_u1: float = 0.7071
    sd_u2: float = 0.7071
    sd_z: float = 1.0
    sd_x: float = 0.05
    t_slope: float = 1.828
    t_offset: float = -0.5
    t_noise_sd: float = 0.25
    y_treat_coef: float = 1.0
    y_z_coef: float = -1.0
    y_u1_coef: float = -2.0
    y_offset: float = -0.5
    y_noise_sd: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ParameterError(f"{f.name} must be finite, got {v}")
            if (f.name.startswith("sd_") or f.name.endswith("_sd")) and v <= 0:
                raise ParameterError(f"{f.name} must be > 0, got {v}")

    @classmethod
    def from_dict(cls, d: dict) -> "ScmParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown SCM parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class Subject:
    u1: float
    u2: float
    z: float
    x: float
    t: int
    y: float


COLUMNS = ("u1", "u2", "z", "x", "t", "y")


@dataclass
class Cohort:
    """Column-major cohort; ``subjects`` gives the record view."""

    u1: np.ndarray
    u2: np.ndarray
    z: np.ndarray
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    seed: int
    params: ScmParams = field(default_factory=ScmParams)
    stream: int = 0

    def __len__(self) -> int:
        return int(self.y.size)

    def __iter__(self) -> Iterator[Subject]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Subject:
        return Subject(float(self.u1[i]), float(self.u2[i]), float(self.z[i]),
                       float(self.x[i]), int(self.t[i]), float(self.y[i]))

    @property
    def subjects(self) -> list[Subject]:
        return list(self)

    def columns(self) -> dict[str, np.ndarray]:
        return {c: getattr(self, c) for c in COLUMNS}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(self)):
            w.writerow([repr(float(self.u1[i])), repr(float(self.u2[i])), repr(float(self.z[i])),
                        repr(float(self.x[i])), int(self.t[i]), repr(float(self.y[i]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def manifest(self) -> dict:
        return {"n": len(self), "seed": self.seed, "stream": self.stream,
                "params": asdict(self.params)}

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read_csv(cls, path, seed: int = 0, params: ScmParams | None = None) -> "Cohort":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cols = {c: np.array([float(r[c]) for r in rows]) for c in COLUMNS}
        cols["t"] = cols["t"].astype(np.int8)
        return cls(**cols, seed=seed, params=params or ScmParams())


def logistic(v):
    """Standard logistic sigmoid 1 / (1 + exp(-v)); saturates without overflow."""
    return expit(v)


def _noise(n: int, seed: int, stream: int) -> np.ndarray:
    u = streams.block_uniforms(seed, (streams.COHORT, stream), 0, n)
    out = ndtri(u)
    out[:, 5] = u[:, 5]  # the Bernoulli draw stays uniform
    return out


def _assign(params: ScmParams, e: np.ndarray, t_forced: float | None = None):
    u1 = params.sd_u1 * e[:, 0]
    u2 = params.sd_u2 * e[:, 1]
    z = params.sd_z * e[:, 2]
    x = u1 - u2 + params.sd_x * e[:, 3]
    if t_forced is None:
        p_t = logistic(params.t_slope * u2 + params.t_offset + params.t_noise_sd * e[:, 4])
        t = (e[:, 5] < p_t).astype(np.int8)
    else:
        t = np.full(e.shape[0], t_forced)
    y = (params.y_treat_coef * t + params.y_z_coef * z + params.y_u1_coef * u1
         + params.y_offset + params.y_noise_sd * e[:, 6])
    return u1, u2, z, x, t, y


def sample_cohort(params: ScmParams, n: int, seed: int, stream: int = 0) -> Cohort:
    """Draw ``n`` subjects; identical (params, n, seed, stream) give identical cohorts."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    params.validate()
    u1, u2, z, x, t, y = _assign(params, _noise(n, seed, stream))
    return Cohort(u1, u2, z, x, t, y, seed=seed, params=params, stream=stream)


def interventional_ate(params: ScmParams, n: int, seed: int, stream: int = 0) -> float:
    """Monte Carlo E[y | do(t=1)] - E[y | do(t=0)] over shared noise draws."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    params.validate()
    e = _noise(n, seed, stream)
    y1 = _assign(params, e, t_forced=1.0)[5]
    y0 = _assign(params, e, t_forced=0.0)[5]
    return float(np.mean(y1 - y0))


def conditional_bias_oracle(params: ScmParams, n: int, seed: int, stream: int = 0) -> float:
    """t coefficient of OLS y ~ t + x + z: the effect estimate after conditioning on the collider."""
    if n < 1000:
        raise ValueError(f"n must be >= 1000, got {n}")
    c = sample_cohort(params, n, seed, stream)
    return float(ols.fit(np.column_stack([c.t, c.x, c.z]), c.y).coefficients[1])
