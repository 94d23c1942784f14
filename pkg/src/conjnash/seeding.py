"""Per-stage random streams derived from one master seed.

Each stage gets its own ``numpy.random.Generator`` built from
``SeedSequence([master, stage_id, *extra])`` so any stage can be re-run
in isolation and still reproduce its outputs.
"""
import zlib

import numpy as np

STAGES = (
    "prefgen",
    "designgen",
    "respsim",
    "hbmxl",
    "delta",
    "holdout",
)


def stage_id(name):
    if name in STAGES:
        return STAGES.index(name)
    # unknown names still map to a stable id
    return 1000 + zlib.crc32(name.encode()) % 100000


def stage_seed(master, name, *extra):
    return np.random.SeedSequence([int(master), stage_id(name), *map(int, extra)])


def stage_rng(master, name, *extra):
    return np.random.default_rng(stage_seed(master, name, *extra))
