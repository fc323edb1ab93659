"""Kinetic simulations of Maxwell molecules under a linear velocity drift."""

import json as _json

from ._core import (
    ConfigError,
    CutoffKernel,
    Kernel,
    KinetosError,
    NoConvergence,
    NonAdmissible,
    RateUnresolvable,
    __version__,
    angular_constants,
    d2,
    evolve,
    integrate_moments,
    lambda_p,
    leading_eigenpair,
    probe_radius,
    total_rate,
)
from . import _core


def sample(law, n, seed=1):
    """Draw n velocities, shape (n, 3), from an initial-law block such as {"type": "gaussian"}."""
    return _core.sample_json(_json.dumps(law), n, seed)


def canonical(spec):
    """Validated experiment spec with every default filled in."""
    return _json.loads(_core.canonical_spec(_json.dumps(spec)))


def run(spec, out=""):
    """Execute an experiment spec; returns the run record with summary, checks and file manifest."""
    return _json.loads(_core.execute_json(_json.dumps(spec), str(out)))
