"""Finite-difference verification of every analytic gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .datamodel import QueryBlock
from .listnet import RankModel, list_loss_and_grads
from .sie import SieModel, SieSample, sie_loss_and_grads

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    worst_param: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


class LinearModel:
    """y = w.x + b; the squared-loss check is exact up to rounding."""

    def __init__(self, dim, seed):
        rng = np.random.default_rng(seed)
        self.w = rng.normal(size=dim)
        self.b = np.array([rng.normal()])

    def params(self):
        return {"w": self.w, "b": self.b}


def linear_squared_loss(model: LinearModel, sample):
    x, y = sample
    r = model.w @ x + model.b[0] - y
    return 0.5 * r * r, {"w": r * x, "b": np.array([r])}


def _worst(errors: dict) -> tuple[str, float]:
    name = max(errors, key=errors.get)
    return name, errors[name]


def tiny_sie(seed, pooling="average", separate_view_table=False, n_items=7, n_users=3):
    items = [f"i{j}" for j in range(n_items)]
    users = [f"u{j}" for j in range(n_users)]
    model = SieModel.create(items, users, embedding_dim=4, mlp_widths=(8, 6, 5), seed=seed,
                            separate_view_table=separate_view_table, pooling=pooling)
    rng = np.random.default_rng([seed, 10])
    # spread biases so no relu sits on its kink at the check point
    for layer in model.mlp:
        layer.bias[:] = rng.uniform(0.05, 0.3, size=layer.out_dim)
    samples = []
    for label in (0, 1, 1):
        samples.append(SieSample(
            block_index=0,
            target_item=items[rng.integers(n_items)],
            clicks_before=tuple(items[j] for j in rng.choice(n_items, 3, replace=False)),
            views_before=tuple(items[j] for j in rng.choice(n_items, 2, replace=False)),
            user=users[rng.integers(n_users)],
            label=label,
        ))
    return model, samples


def check_sie(seed, pooling="average", separate_view_table=False, epsilon=1e-5) -> CheckResult:
    model, samples = tiny_sie(seed, pooling, separate_view_table)
    errors = nn.gradient_errors(model.params(), lambda: sie_loss_and_grads(model, samples), epsilon)
    return CheckResult(f"sie[{pooling}{',views' if separate_view_table else ''}]", seed, *_worst(errors))


def tiny_listnet(seed, n=6, k=2, dim=4, rep_dim=5):
    rng = np.random.default_rng([seed, 20])
    items = [f"i{j}" for j in range(n + 2)]
    table = nn.EmbeddingTable.create(items, dim, rng)
    layers = [nn.DenseLayer.create(dim, 6, "sigmoid", rng),
              nn.DenseLayer.create(6, rep_dim, "sigmoid", rng)]
    model = RankModel(table, layers, k=k)
    shown = tuple(items[j] for j in rng.choice(len(items), n, replace=False))
    labels = tuple(int(v) for v in rng.integers(0, 3, size=n))
    block = QueryBlock("s", "q", 0, shown, labels)
    s = rng.uniform(0, 2, size=rep_dim)
    return model, s, block


def check_listnet(seed, n=6, k=2, epsilon=1e-5) -> CheckResult:
    model, s, block = tiny_listnet(seed, n, k)
    errors = nn.gradient_errors(
        model.params(), lambda: list_loss_and_grads(model, s, block.shown_items, block.labels),
        epsilon,
    )
    return CheckResult(f"listnet[n={n},k={k}]", seed, *_worst(errors))


def check_linear(seed) -> CheckResult:
    rng = np.random.default_rng([seed, 30])
    model = LinearModel(5, seed)
    sample = (rng.normal(size=5), rng.normal())
    err = nn.finite_difference_check(model, linear_squared_loss, sample)
    return CheckResult("linear", seed, "w,b", err)


def run_gradcheck(seeds=range(10)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        results.append(check_linear(seed))
        results.append(check_sie(seed, "average"))
        results.append(check_sie(seed, "max", separate_view_table=True))
        for k in (1, 2, 3):
            n = 3 + (seed + k) % 6  # n in 3..8
            results.append(check_listnet(seed, n=n, k=k))
    return results
