"""Non-text baselines: global/local means (Stats) and L2-regularized MF (PMF).

Stats is a sequential means fit: global mean first, then per-user offsets on
the residuals, then per-item offsets on what remains. PMF optimizes
(alpha + b_u + b_i + u.v - r)^2 + lam(||U||^2 + ||V||^2) with Adam over
hand-vectorized gradients; offsets are included because the rating form the
factor model plugs into carries them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .checkpoints import CheckpointError, load_container, save_container
from .diffcore import Parameter
from .training import AdamState, adam_step


@dataclass
class StatsModel:
    """alpha + beta_user + beta_item with zero offsets for unseen ids."""

    alpha: float
    beta_user: np.ndarray
    beta_item: np.ndarray

    @property
    def num_users(self) -> int:
        return self.beta_user.shape[0]

    @property
    def num_items(self) -> int:
        return self.beta_item.shape[0]

    def predict(self, user: int, item: int) -> float:
        b_u = self.beta_user[user] if 0 <= user < self.num_users else 0.0
        b_i = self.beta_item[item] if 0 <= item < self.num_items else 0.0
        return float(self.alpha + b_u + b_i)

    def predict_batch(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        out = np.full(users.shape[0], self.alpha, dtype=np.float64)
        seen_u = (users >= 0) & (users < self.num_users)
        seen_i = (items >= 0) & (items < self.num_items)
        out[seen_u] += self.beta_user[users[seen_u]]
        out[seen_i] += self.beta_item[items[seen_i]]
        return out

    def scorable_mask(self, users, items) -> np.ndarray:
        return np.ones(np.asarray(users).shape[0], dtype=bool)  # unseen ids fall back to offsets 0


def fit_stats(train, num_users: int | None = None, num_items: int | None = None) -> StatsModel:
    """Sequential ANOVA-style fit: alpha, user offsets, then item offsets on residuals."""
    if not train:
        raise ValueError("fit_stats: empty training set")
    if num_users is None:
        num_users = 1 + max(t.user for t in train)
    if num_items is None:
        num_items = 1 + max(t.item for t in train)

    ratings = np.array([t.rating for t in train], dtype=np.float64)
    users = np.array([t.user for t in train], dtype=np.int64)
    items = np.array([t.item for t in train], dtype=np.int64)

    alpha = float(np.mean(ratings))

    beta_user = np.zeros(num_users)
    count_user = np.zeros(num_users)
    np.add.at(beta_user, users, ratings - alpha)
    np.add.at(count_user, users, 1.0)
    nz = count_user > 0
    beta_user[nz] /= count_user[nz]

    beta_item = np.zeros(num_items)
    count_item = np.zeros(num_items)
    np.add.at(beta_item, items, ratings - alpha - beta_user[users])
    np.add.at(count_item, items, 1.0)
    nz = count_item > 0
    beta_item[nz] /= count_item[nz]

    return StatsModel(alpha=alpha, beta_user=beta_user, beta_item=beta_item)


def predict_stats(model: StatsModel, user: int, item: int) -> float:
    return model.predict(user, item)


@dataclass
class PMFConfig:
    k: int = 8
    lam: float = 0.02
    lr: float = 5e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0


@dataclass
class PMFModel:
    alpha: float
    beta_user: np.ndarray
    beta_item: np.ndarray
    factors_user: np.ndarray  # (num_users, K)
    factors_item: np.ndarray  # (num_items, K)

    @property
    def num_users(self) -> int:
        return self.factors_user.shape[0]

    @property
    def num_items(self) -> int:
        return self.factors_item.shape[0]

    @property
    def k(self) -> int:
        return self.factors_user.shape[1]

    def predict_batch(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        rel = np.einsum("bk,bk->b", self.factors_user[users], self.factors_item[items])
        return self.alpha + self.beta_user[users] + self.beta_item[items] + rel

    def scorable_mask(self, users, items) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        return (users >= 0) & (users < self.num_users) & (items >= 0) & (items < self.num_items)


def _pmf_rmse(model: PMFModel, triples) -> float:
    if not triples:
        return float("nan")
    users = np.array([t.user for t in triples], dtype=np.int64)
    items = np.array([t.item for t in triples], dtype=np.int64)
    ratings = np.array([t.rating for t in triples], dtype=np.float64)
    return float(np.sqrt(np.mean((model.predict_batch(users, items) - ratings) ** 2)))


def train_pmf(train, valid, num_users: int, num_items: int, config: PMFConfig) -> PMFModel:
    """Mini-batch Adam on the offset + dot-product model.

    Gradients are closed-form (the model is a quadratic-in-parameters
    regression), accumulated per batch with scatter-adds.
    """
    if not train:
        raise ValueError("train_pmf: empty training set")
    rng = np.random.default_rng([config.seed, 0])
    k = config.k

    users = np.array([t.user for t in train], dtype=np.int64)
    items = np.array([t.item for t in train], dtype=np.int64)
    ratings = np.array([t.rating for t in train], dtype=np.float64)

    params = {
        "alpha": Parameter(np.asarray(float(np.mean(ratings))), name="alpha"),
        "beta_user": Parameter(np.zeros(num_users), name="beta_user"),
        "beta_item": Parameter(np.zeros(num_items), name="beta_item"),
        "U": Parameter(0.1 * rng.standard_normal((num_users, k)), name="U"),
        "V": Parameter(0.1 * rng.standard_normal((num_items, k)), name="V"),
    }
    adam = AdamState.for_params(params, lr=config.lr)
    order_rng = np.random.default_rng([config.seed, 1])
    n = len(train)
    steps = max(1, math.ceil(n / config.batch_size))

    def current() -> PMFModel:
        return PMFModel(
            alpha=float(params["alpha"].value.data),
            beta_user=params["beta_user"].value.data.copy(),
            beta_item=params["beta_item"].value.data.copy(),
            factors_user=params["U"].value.data.copy(),
            factors_item=params["V"].value.data.copy(),
        )

    best = current()
    best_rmse = math.inf
    stale = 0
    metric_triples = valid if valid else train

    for _epoch in range(config.max_epochs):
        order = order_rng.permutation(n)
        for s in range(steps):
            idx = order[s * config.batch_size : (s + 1) * config.batch_size]
            if idx.size == 0:
                continue
            bu, bi, br = users[idx], items[idx], ratings[idx]
            a = float(params["alpha"].value.data)
            u_rows = params["U"].value.data[bu]
            v_rows = params["V"].value.data[bi]
            pred = (
                a
                + params["beta_user"].value.data[bu]
                + params["beta_item"].value.data[bi]
                + np.einsum("bk,bk->b", u_rows, v_rows)
            )
            err = 2.0 * (pred - br) / idx.size  # d mean(e^2) = 2e/n

            for p in params.values():
                p.zero_grad()
            params["alpha"].grad += err.sum()
            np.add.at(params["beta_user"].grad, bu, err)
            np.add.at(params["beta_item"].grad, bi, err)
            if k:
                np.add.at(params["U"].grad, bu, err[:, None] * v_rows)
                np.add.at(params["V"].grad, bi, err[:, None] * u_rows)
                params["U"].grad += 2.0 * config.lam * params["U"].value.data
                params["V"].grad += 2.0 * config.lam * params["V"].value.data
            adam_step(params, adam)

        model = current()
        rmse = _pmf_rmse(model, metric_triples)
        if rmse < best_rmse:
            best_rmse = rmse
            best = model
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    return best


# --- checkpoint participation -----------------------------------------------------


def save_stats(path, model: StatsModel, fingerprint: str) -> None:
    tensors = {
        "alpha": np.asarray(model.alpha),
        "beta_user": model.beta_user,
        "beta_item": model.beta_item,
    }
    save_container(path, tensors, {"model": "stats"}, fingerprint)


def load_stats(path) -> StatsModel:
    tensors, meta, _ = load_container(path)
    if meta.get("model") != "stats":
        raise CheckpointError(f"{path}: checkpoint holds {meta.get('model')!r}, expected 'stats'")
    return StatsModel(
        alpha=float(tensors["alpha"]),
        beta_user=tensors["beta_user"],
        beta_item=tensors["beta_item"],
    )


def save_pmf(path, model: PMFModel, config: PMFConfig, fingerprint: str) -> None:
    tensors = {
        "alpha": np.asarray(model.alpha),
        "beta_user": model.beta_user,
        "beta_item": model.beta_item,
        "U": model.factors_user,
        "V": model.factors_item,
    }
    save_container(path, tensors, {"model": "pmf", "config": asdict(config)}, fingerprint)


def load_pmf(path) -> PMFModel:
    tensors, meta, _ = load_container(path)
    if meta.get("model") != "pmf":
        raise CheckpointError(f"{path}: checkpoint holds {meta.get('model')!r}, expected 'pmf'")
    return PMFModel(
        alpha=float(tensors["alpha"]),
        beta_user=tensors["beta_user"],
        beta_item=tensors["beta_item"],
        factors_user=tensors["U"],
        factors_item=tensors["V"],
    )
