"""MLP-vs-linear connector comparisons.

``expressivity_probe`` is the connector-only regression task (targets are the
elementwise square of the patch features), where the best linear map is known
in closed form. ``posellm.pipeline.run_ablation`` trains the whole model once per
(seed, connector mode) on identical data and reports AP/PCKh side by side.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from .connector import Connector, ConnectorConfig
from .metrics import EvalReport, format_table
from .synth_data import SkeletonSample
from .trainer import TrainState, adamw_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExpressivityResult:
    linear_mse: float
    mlp_mse: float

    @property
    def ratio(self) -> float:
        return self.linear_mse / self.mlp_mse


def _square_task(rng: np.random.Generator, n: int, d: int) -> Tuple[np.ndarray, np.ndarray]:
    X = rng.standard_normal((n, d))
    return X, X ** 2


def best_linear_mse(X: np.ndarray, Y: np.ndarray, X_test: np.ndarray, Y_test: np.ndarray) -> float:
    """Held-out MSE of the least-squares affine map fitted on (X, Y)."""
    A = np.hstack([X, np.ones((len(X), 1))])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    pred = np.hstack([X_test, np.ones((len(X_test), 1))]) @ coef
    return float(np.mean((pred - Y_test) ** 2))


def expressivity_probe(seed: int = 0, d: int = 8, n_train: int = 4096, n_test: int = 1024,
                       steps: int = 1500, lr: float = 1e-2) -> ExpressivityResult:
    rng = np.random.default_rng(seed)
    X, Y = _square_task(rng, n_train, d)
    Xt, Yt = _square_task(rng, n_test, d)
    linear = best_linear_mse(X, Y, Xt, Yt)

    conn = Connector(ConnectorConfig(mode="mlp", d_in=d, d_out=d), seed=seed).double()
    params = dict(conn.named_parameters())
    state = TrainState()
    Xtr, Ytr = torch.from_numpy(X), torch.from_numpy(Y)
    for _ in range(steps):
        for p in params.values():
            p.grad = None
        loss = ((conn(Xtr) - Ytr) ** 2).mean()
        loss.backward()
        adamw_step(params, {n: p.grad for n, p in params.items()}, state, lr, 0.0)
    with torch.no_grad():
        mlp = float(((conn(torch.from_numpy(Xt)) - torch.from_numpy(Yt)) ** 2).mean())
    return ExpressivityResult(linear, mlp)


@dataclass
class AblationRow:
    mode: str
    seed: int
    report: EvalReport


def summarize(rows: Sequence[AblationRow]) -> Dict[str, EvalReport]:
    """Per-mode mean over seeds of every numeric report field."""
    out = {}
    for mode in ("mlp", "linear"):
        reports = [r.report for r in rows if r.mode == mode]
        if not reports:
            continue
        fields = {}
        for f in dataclasses.fields(EvalReport):
            vals = [getattr(r, f.name) for r in reports]
            fields[f.name] = type(vals[0])(np.mean(vals)) if f.type in ("int",) else float(np.mean(vals))
        out[mode] = EvalReport(**fields)
    return out


def ablation_table(rows: Sequence[AblationRow]) -> str:
    means = summarize(rows)
    n = len({r.seed for r in rows})
    return format_table([(f"{mode} (mean of {n} seeds)", rep) for mode, rep in means.items()])
