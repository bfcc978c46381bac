"""Input checks shared by the estimators."""
from __future__ import annotations

from sklearn.exceptions import NotFittedError

from .datamodel import Dataset, QueryBlock


def check_blocks(X, *, allow_empty: bool = False) -> list[QueryBlock]:
    """Coerce ``X`` (a Dataset, a single block or an iterable of blocks) to a list of blocks.

    A Dataset yields its training split.
    """
    if isinstance(X, Dataset):
        blocks = list(X.train)
    elif isinstance(X, QueryBlock):
        blocks = [X]
    else:
        blocks = list(X)
    for b in blocks:
        if not isinstance(b, QueryBlock):
            raise TypeError(f"expected QueryBlock, got {type(b).__name__}")
        if any(y not in (0, 1, 2) for y in b.labels):
            raise ValueError(f"block {b.query_id}: labels must be in {{0, 1, 2}}")
    if not blocks and not allow_empty:
        raise ValueError("no query blocks given")
    return blocks


def check_fitted(estimator, attribute: str):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )


def check_choice(name: str, value, choices):
    if value not in choices:
        raise ValueError(f"{name}={value!r} not in {tuple(choices)}")
    return value


def check_positive(name: str, value):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value
