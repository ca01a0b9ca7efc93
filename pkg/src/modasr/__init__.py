"""Modular acoustics-to-word sequence recognition on a synthetic corpus."""

import os

# Single-threaded BLAS: these workloads are many tiny matmuls where thread
# sync costs more than it saves, and fixed threading keeps runs bit-for-bit
# reproducible. Respects any value the user already set.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
