import os

# Single-threaded BLAS and slot pool: the test matrices are small enough that
# thread spin-up and GIL contention dominate otherwise (and timings get noisy).
# test_pipeline exercises the multi-worker path explicitly.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "LOWRANK_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
