"""Synthetic individual part-worths with optional monotone features.

Part-worths are stored in dummy coding relative to level 1 of every
feature, so a preference matrix has ``n_features * (n_levels - 1)`` columns.
Columns of feature ``l`` occupy ``l*(m-1) .. l*(m-1) + m-2`` (0-based).
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDimensionError
from .seeding import stage_rng


@dataclass(frozen=True)
class VarianceProfileParams:
    kappa: float
    theta: float
    zeta1: float
    xi1: float
    zeta2: float
    xi2: float

    def __post_init__(self):
        if not (self.kappa > 0 and self.theta > 0):
            raise ValueError("gamma shape and scale must be positive")
        if not self.zeta1 < self.xi1:
            raise ValueError("lower truncation bounds need zeta1 < xi1")
        if not self.zeta2 <= self.xi2:
            raise ValueError("upper truncation bounds need zeta2 <= xi2")
        if not self.zeta1 <= self.zeta2:
            raise ValueError("need zeta1 <= zeta2")


HOMOGENEOUS = VarianceProfileParams(0.7, 1.5, 0.08, 0.4, 9.0, 11.0)
HETEROGENEOUS = VarianceProfileParams(0.7, 4.5, 0.2, 2.0, 13.0, 18.0)
PROFILES = {"homogeneous": HOMOGENEOUS, "heterogeneous": HETEROGENEOUS}


@dataclass(frozen=True)
class PreferenceSpec:
    n_features: int
    n_levels: int
    n_respondents: int
    variance_profile: str = "homogeneous"
    monotone_features: tuple = (0,)
    seed: int = 0

    def __post_init__(self):
        if self.n_features < 1 or self.n_levels < 2 or self.n_respondents < 1:
            raise InvalidDimensionError(
                "need n_features >= 1, n_levels >= 2, n_respondents >= 1")
        if self.variance_profile not in PROFILES:
            raise ValueError(f"unknown variance profile {self.variance_profile!r}")
        object.__setattr__(self, "monotone_features",
                           tuple(sorted(set(int(f) for f in self.monotone_features))))
        for f in self.monotone_features:
            if not 0 <= f < self.n_features:
                raise InvalidDimensionError(f"monotone feature {f} out of range")

    @property
    def n_params(self):
        return self.n_features * (self.n_levels - 1)


@dataclass
class PreferenceSet:
    B: np.ndarray
    hypermeans: np.ndarray
    variances: np.ndarray
    spec: PreferenceSpec
    # feature-level slot of every generated column, before monotone rearrangement
    assignment: np.ndarray = field(default=None, repr=False)

    @property
    def o(self):
        return self.B.shape[1]

    @property
    def monotone_features(self):
        return self.spec.monotone_features


def round_half_even(x):
    return int(round(x))


def hypermean_counts(o):
    tail = round_half_even(0.1 * o)
    middle = o - 2 * tail
    if middle < 0:
        raise InvalidDimensionError(f"o={o} leaves a negative middle count")
    return tail, middle, tail


def sample_hypermeans(o, rng):
    """Means grouped as (U(-5,-2), U(-2,2), U(2,5)) with counts from `hypermean_counts`."""
    if o < 1:
        raise InvalidDimensionError("o must be >= 1")
    low, mid, high = hypermean_counts(o)
    return np.concatenate([
        rng.uniform(-5.0, -2.0, size=low),
        rng.uniform(-2.0, 2.0, size=mid),
        rng.uniform(2.0, 5.0, size=high),
    ])


def sample_variances(o, profile, rng):
    y = rng.gamma(profile.kappa, profile.theta, size=o)
    z1 = rng.uniform(profile.zeta1, profile.xi1, size=o)
    z2 = rng.uniform(profile.zeta2, profile.xi2, size=o)
    return np.minimum(y + z1, z2)


def feature_columns(feature, n_levels):
    start = feature * (n_levels - 1)
    return np.arange(start, start + n_levels - 1)


def is_monotone(beta, monotone_features, n_levels):
    """Row-wise check that flagged features are <= 0 and non-increasing.

    `beta` has dummy-coded parameters on its last axis; the result drops it.
    """
    beta = np.asarray(beta)
    ok = np.ones(beta.shape[:-1], dtype=bool)
    for f in monotone_features:
        block = beta[..., feature_columns(f, n_levels)]
        ok &= block[..., 0] <= 0
        ok &= np.all(np.diff(block, axis=-1) <= 0, axis=-1)
    return ok


def generate_preferences(spec, rng=None):
    """Draw the respondents x parameters part-worth matrix.

    Monotone features are generated with all `n_levels` columns, sorted
    descending per respondent, shifted so level 1 is zero, and the level-1
    column dropped. Columns are shuffled onto feature levels before that.
    """
    if rng is None:
        rng = stage_rng(spec.seed, "prefgen")
    m = spec.n_levels
    mono = set(spec.monotone_features)
    widths = [m if f in mono else m - 1 for f in range(spec.n_features)]
    n_ext = sum(widths)

    means = sample_hypermeans(n_ext, rng)
    variances = sample_variances(n_ext, PROFILES[spec.variance_profile], rng)
    draws = rng.normal(means, np.sqrt(variances), size=(spec.n_respondents, n_ext))
    order = rng.permutation(n_ext)
    ext = draws[:, order]

    blocks = []
    offset = 0
    for f, width in enumerate(widths):
        block = ext[:, offset:offset + width]
        if f in mono:
            block = -np.sort(-block, axis=1)
            block = (block - block[:, :1])[:, 1:]
        blocks.append(block)
        offset += width
    B = np.ascontiguousarray(np.concatenate(blocks, axis=1))
    return PreferenceSet(B=B, hypermeans=means[order], variances=variances[order],
                         spec=spec, assignment=order)


def export_csv(prefs, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["respondent", "parameter", "value"])
        for i, row in enumerate(prefs.B):
            for o, v in enumerate(row):
                w.writerow([i, o, repr(float(v))])
