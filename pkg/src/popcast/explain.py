"""Local linear explanations of a fitted density surface.

Samples are drawn around a query point in the scaled (age, year) square,
weighted by an exponential kernel on their distance to the query, and a
weighted least-squares plane is fitted through the model's predictions.
The plane's slopes are the feature contributions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .nn import AGE_SCALE, YEAR_ORIGIN, YEAR_SCALE, MlpParams, mlp_forward, scale_inputs

FEATURES = ("age", "year")


class ExplanationError(RuntimeError):
    pass


@dataclass
class SampleSet:
    scaled: np.ndarray  # (n, 2) scaled age, year
    ages: np.ndarray
    years: np.ndarray
    predictions: np.ndarray | None = None


@dataclass
class Explanation:
    age: float
    year: float
    age_weight: float
    year_weight: float
    intercept: float
    kernel_width: float
    radius: float
    n_samples: int
    seed: int

    def weights(self) -> dict:
        return {"age": self.age_weight, "year": self.year_weight}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "weight"])
            for name, val in self.weights().items():
                w.writerow([name, repr(float(val))])
        return path


def perturb_samples(x0, n: int, radius: float, seed: int = 0,
                    model: Callable | None = None) -> SampleSet:
    """Gaussian perturbations of ``x0 = (age, year)`` in scaled space,
    clipped to the unit square. Predictions are filled if ``model`` is
    given (a callable of physical ages and years)."""
    if n < 10:
        raise ValueError("need at least 10 samples")
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    center = np.array(scale_inputs(x0[0], x0[1]), dtype=float)
    pts = np.clip(center + radius * rng.standard_normal((n, 2)), 0.0, 1.0)
    ages = pts[:, 0] * AGE_SCALE
    years = pts[:, 1] * YEAR_SCALE + YEAR_ORIGIN
    preds = None if model is None else np.asarray(model(ages, years), dtype=float)
    return SampleSet(pts, ages, years, preds)


def lime_explain(model: Callable, x0, n: int = 1000, radius: float = 0.1,
                 kernel_width: float = 0.25, seed: int = 0) -> Explanation:
    """Kernel-weighted linear fit of ``model`` around ``x0 = (age, year)``.

    Slopes are per unit of scaled feature (age/100, (year-2024)/30); the
    intercept is the fitted value at the query point itself.
    """
    samples = perturb_samples(x0, n, radius, seed, model)
    center = np.array(scale_inputs(x0[0], x0[1]), dtype=float)
    dx = samples.scaled - center
    w = np.exp(-np.sum(dx * dx, axis=1) / kernel_width**2)
    X = np.column_stack([np.ones(n), dx])
    sw = np.sqrt(w)[:, None]
    A = X * sw
    if np.linalg.matrix_rank(A) < 3:
        raise ExplanationError("perturbed samples do not span both features")
    coef, *_ = np.linalg.lstsq(A, samples.predictions * sw[:, 0], rcond=None)
    if not np.all(np.isfinite(coef)):
        raise ExplanationError("non-finite local fit")
    return Explanation(
        age=float(x0[0]), year=float(x0[1]),
        age_weight=float(coef[1]), year_weight=float(coef[2]), intercept=float(coef[0]),
        kernel_width=kernel_width, radius=radius, n_samples=n, seed=seed,
    )


def surrogate_model(params: MlpParams) -> Callable:
    """Wrap trained surrogate parameters as a callable of (ages, years)."""

    def model(ages, years):
        a_s, t_s = scale_inputs(ages, years)
        return np.asarray(mlp_forward(a_s, t_s, params))

    return model
