"""Deterministic RNG derivation.

Every run owns a single root seed.  Independent random streams are derived
from it with ``numpy.random.SeedSequence(root, spawn_key=(stream_id,))`` so
that adding a consumer never perturbs existing streams.  The stream table
below is recorded in run manifests.
"""

import numpy as np

# Stream ids (stable; append only).
STREAM_INIT = 0          # parameter initialization
STREAM_BATCH = 1         # per-epoch batch order (sub-keyed by epoch)
STREAM_SPLIT = 2         # train/dev corpus split
STREAM_SYNTH = 3         # synthetic corpus grammar sampling
STREAM_SAMPLE = 4        # filter-pipeline subsampling
STREAM_BOOTSTRAP = 5     # paired bootstrap resampling
STREAM_SUBSAMPLE = 6     # analysis subsampling

STREAM_NAMES = {
    STREAM_INIT: "init",
    STREAM_BATCH: "batch",
    STREAM_SPLIT: "split",
    STREAM_SYNTH: "synthetic",
    STREAM_SAMPLE: "filter-sample",
    STREAM_BOOTSTRAP: "bootstrap",
    STREAM_SUBSAMPLE: "analysis-subsample",
}


def rng_for(seed, stream, *extra):
    """A ``numpy`` Generator for one named stream of a root seed.

    ``extra`` integers (e.g. an epoch index) extend the spawn key.
    """
    key = (int(stream),) + tuple(int(x) for x in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
