"""Safety-constrained discounted control via particle flows on policy parameters.

The package composes four layers. `mdp` builds barrier-augmented decision
processes with exact budget bookkeeping. `policy` maps particle ensembles to
mean-field softmax policies. `values` and `regularizers` supply the two halves
of the objective (regularized value, mollified relative entropy). `flow` runs
the deterministic interacting-particle descent, with `metrics`, `envs`,
`config`, and `harness` providing transport distances, benchmark environments,
experiment configs, and the verification harness behind the `meanflow` CLI.

Setting MEANFLOW_THREADS caps the numeric worker pools (BLAS, OpenMP) before
they spin up; explicit per-library environment variables still win.
"""

import os as _os

_threads = _os.environ.get("MEANFLOW_THREADS", "").strip()
if _threads.isdigit() and int(_threads) > 0:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

__version__ = "0.1.0"

from . import (  # noqa: E402
    acceptance,
    cli,
    config,
    envs,
    flow,
    harness,
    mdp,
    metrics,
    policy,
    regularizers,
    values,
)

__all__ = [
    "acceptance",
    "cli",
    "config",
    "envs",
    "flow",
    "harness",
    "mdp",
    "metrics",
    "policy",
    "regularizers",
    "values",
    "__version__",
]
