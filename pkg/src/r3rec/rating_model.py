"""The inference-time scorer: embedding lookups, flattened outer product, linear head.

This is the only branch used at serving time. Per entry it costs O(K^2)
arithmetic regardless of any review length; the batch path never touches
text-branch code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor


@dataclass
class RatingParams:
    """Scorer parameters; `item_table` is the same storage the review branch reads."""

    user_table: Parameter  # (num_users, K)
    item_table: Parameter  # (num_items, K)
    weights: Parameter  # (2K + K^2,) linear head over concat(u, v, flatten(u (x) v))
    bias: Parameter  # scalar

    @property
    def num_users(self) -> int:
        return self.user_table.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_table.shape[0]

    @property
    def k(self) -> int:
        return self.user_table.shape[1]

    def trainable(self) -> dict:
        return {
            "user_table": self.user_table,
            "item_table": self.item_table,
            "weights": self.weights,
            "bias": self.bias,
        }

    def predict_batch(self, users, items) -> np.ndarray:
        return rec_batch(users, items, self)

    def scorable_mask(self, users, items) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        return (users >= 0) & (users < self.num_users) & (items >= 0) & (items < self.num_items)


def init_rating_params(
    num_users: int, num_items: int, k: int, rng: np.random.Generator, bias_init: float = 0.0
) -> RatingParams:
    """Embeddings ~ N(0, 0.1); head uniform in +-sqrt(6/(fan_in+fan_out)); bias preset
    to the training-mean rating to speed convergence."""
    n_feat = 2 * k + k * k
    bound = np.sqrt(6.0 / (n_feat + 1))
    return RatingParams(
        user_table=Parameter(0.1 * rng.standard_normal((num_users, k)), name="user_table"),
        item_table=Parameter(0.1 * rng.standard_normal((num_items, k)), name="item_table"),
        weights=Parameter(rng.uniform(-bound, bound, size=n_feat), name="rating_weights"),
        bias=Parameter(np.asarray(float(bias_init)), name="rating_bias"),
    )


def embed(table: Parameter, idx: int) -> Tensor:
    """Row lookup that participates in backward; out-of-range ids raise, never clamp."""
    return dc.lookup_row(table, idx)


def rec(i: int, j: int, params: RatingParams) -> Tensor:
    """Predicted rating: w . concat(u_i, v_j, flatten(u_i (x) v_j)) + b.

    The outer product is flattened row-major (u-index major). Differentiable
    when a tape is recording; identical arithmetic either way.
    """
    u = dc.lookup_row(params.user_table, i)
    v = dc.lookup_row(params.item_table, j)
    interactions = dc.flatten(dc.outer_product(u, v))
    features = dc.concat([u, v, interactions])
    return dc.add(dc.dot(params.weights, features), params.bias)


def rec_batch(users, items, params: RatingParams) -> np.ndarray:
    """Elementwise rec() over id pairs; never taped, bitwise equal to scalar calls."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.shape != items.shape:
        raise dc.ShapeError(
            f"rec_batch: users {users.shape} and items {items.shape} differ in length"
        )
    out = np.empty(users.shape[0], dtype=np.float64)
    with dc.paused_recording():
        for b in range(users.shape[0]):
            try:
                out[b] = rec(int(users[b]), int(items[b]), params).item()
            except IndexError as e:
                raise IndexError(f"rec_batch: entry {b}: {e}") from None
    return out
