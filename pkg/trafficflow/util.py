import logging
import numpy as np


LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(verbosity=0):
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT)


def make_rng(seed):
    return np.random.default_rng(seed)


def compare_arrays(a1, a2, atol=1e-9):
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    return a1.shape == a2.shape and np.allclose(a1, a2, atol=atol, rtol=0.0)


def unit(vec):
    vec = np.asarray(vec, dtype=float)
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    return vec / norm
