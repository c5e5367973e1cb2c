"""Sparse-view photoacoustic reconstruction with a dense nested UNet GAN.

Setting ``SPARSEPAT_THREADS`` before import caps the BLAS/OpenMP thread pools.
"""
import os

THREADS_ENV = "SPARSEPAT_THREADS"

if os.environ.get(THREADS_ENV):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ[THREADS_ENV])

__version__ = "0.1.0"
