"""Gumbel error calibration to a median relative error target and
first-choice response simulation."""
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ResponseTieError
from .seeding import stage_rng

EULER_GAMMA = float(np.euler_gamma)


@dataclass
class ErrorCalibration:
    target_mrge: float
    learning_rate: float
    tolerance: float
    max_iter: int
    achieved_mrge: float
    scale: float
    location: float
    sigma: float
    iterations_used: int
    trajectory: list = field(default_factory=list, repr=False)


@dataclass
class ChoiceData:
    f: np.ndarray
    errors: np.ndarray
    total_utilities: np.ndarray

    @property
    def chosen(self):
        """Index of the chosen alternative per (respondent, set)."""
        return np.argmax(self.f, axis=2)


def deterministic_utilities(B, x):
    """Utilities (respondents, sets, alternatives) and their per-respondent
    zero-centered copy."""
    v = np.einsum("io,kjo->ikj", np.asarray(B, dtype=float), np.asarray(x, dtype=float))
    centered = v - v.mean(axis=(1, 2), keepdims=True)
    return v, centered


def gumbel_params(sigma):
    s = sigma * np.sqrt(6.0) / np.pi
    return s, -s * EULER_GAMMA


def mrge(eps, v_abs):
    v_abs = np.abs(np.asarray(v_abs, dtype=float)).ravel()
    keep = v_abs != 0
    return float(np.median(np.abs(np.asarray(eps).ravel()[keep]) / v_abs[keep]))


def tune_mrge(v_abs, target, d=0.5, t=1e-5, r_max=10_000, rng=None, shape=None):
    """Rescale Gumbel errors until the median |error|/|utility| hits `target`.

    Each iteration draws fresh errors with standard deviation
    ``h * mean(v_abs)``; ``h`` moves by ``(target - actual) * d`` and is reset
    to a U(0,1) draw if it turns negative. Returns the calibration record and
    the accepted error array (shaped like `shape`, default like `v_abs`).
    """
    v_abs = np.abs(np.asarray(v_abs, dtype=float))
    if v_abs.size == 0:
        raise ValueError("v_abs is empty")
    if not target > 0:
        raise ValueError("target must be positive")
    if rng is None:
        rng = np.random.default_rng()
    if shape is None:
        shape = v_abs.shape
    flat = v_abs.ravel()
    defined = flat != 0
    if not defined.any():
        raise CalibrationError("all deterministic utilities are zero")
    denom = flat[defined]
    v_bar = flat.mean()
    h = target
    trajectory = []
    for r in range(1, r_max + 1):
        sigma = h * v_bar
        s, lam = gumbel_params(sigma)
        eps = rng.gumbel(lam, s, size=shape)
        actual = float(np.median(np.abs(eps.ravel()[defined]) / denom))
        trajectory.append((h, actual))
        if abs(actual - target) <= t:
            cal = ErrorCalibration(target_mrge=target, learning_rate=d, tolerance=t,
                                   max_iter=r_max, achieved_mrge=actual, scale=s,
                                   location=lam, sigma=sigma, iterations_used=r,
                                   trajectory=trajectory)
            return cal, eps
        h = h + (target - actual) * d
        if h < 0:
            h = rng.uniform(0.0, 1.0)
    raise CalibrationError(
        f"MRGE target {target} not reached within {r_max} iterations; "
        "adjust learning rate, tolerance or iteration limit",
        trajectory=trajectory)


def simulate_choices(v, eps):
    """First choices from total utility; exact ties are rejected."""
    v = np.asarray(v, dtype=float)
    total = v + eps
    best = total.max(axis=2, keepdims=True)
    is_max = total == best
    n_max = is_max.sum(axis=2)
    if np.any(n_max > 1):
        cells = np.argwhere(n_max > 1)
        raise ResponseTieError(f"{len(cells)} tied (respondent, set) cells", cells=cells)
    return ChoiceData(f=is_max.astype(np.int8), errors=eps, total_utilities=total)


def simulate_responses(B, train_x, holdout_x, target, d=0.5, t=1e-5, r_max=10_000,
                       seed=0, rng=None):
    """Calibrate over all training and hold-out cells, then simulate choices.

    One error tensor covers training and hold-out cells together so both
    share the calibrated scale.
    """
    if rng is None:
        rng = stage_rng(seed, "respsim")
    x = train_x if holdout_x is None else np.concatenate([train_x, holdout_x], axis=0)
    v, centered = deterministic_utilities(B, x)
    cal, eps = tune_mrge(np.abs(centered), target, d, t, r_max, rng)
    data = simulate_choices(v, eps)
    k = train_x.shape[0]
    train = ChoiceData(data.f[:, :k], data.errors[:, :k], data.total_utilities[:, :k])
    holdout = None
    if holdout_x is not None:
        holdout = ChoiceData(data.f[:, k:], data.errors[:, k:], data.total_utilities[:, k:])
    return cal, train, holdout


def export_csv(data, path, role="train", mode="w", write_header=True):
    import csv

    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if write_header:
            w.writerow(["role", "respondent", "set", "alternative", "chosen", "total_utility"])
        I, K, J = data.f.shape
        for i in range(I):
            for k in range(K):
                for j in range(J):
                    w.writerow([role, i, k, j, int(data.f[i, k, j]),
                                repr(float(data.total_utilities[i, k, j]))])
