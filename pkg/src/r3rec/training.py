"""Joint optimization of the scorer and the review branch.

Both branch losses are batch MSEs. They are combined through learned
per-task log-variances (uncertainty weighting) plus an L2 penalty on model
parameters, and optimized with mini-batch Adam. The review batch generator
is independent of the rating batch generator; early stopping watches the
validation RMSE of the rating branch only, which is the deployed quantity.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import rating_model as rm
from . import review_regularizer as rr
from .checkpoints import CheckpointError, load_container, save_container
from .diffcore import Parameter, Tape, Tensor, backward, recording
from .text_pipeline import ReviewEntry

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    k: int = 8
    max_len: int = 128
    conv_width: int = 3
    d_att: int = 0  # 0 = same as k
    embed_dim: int = 300
    lambda_l2: float = 1e-5
    lr: float = 1e-3
    batch_rating: int = 128
    batch_review: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    attn_scale: bool = True
    conv_activation: str = "relu"
    review_branch: bool = True

    def __post_init__(self):
        if self.k <= 0 or self.max_len < 3 or self.conv_width <= 0:
            raise ValueError("TrainConfig: k, max_len, conv_width must be positive (max_len >= 3)")
        if self.conv_width % 2 == 0:
            raise ValueError("TrainConfig: conv_width must be odd")
        if self.lambda_l2 < 0:
            raise ValueError("TrainConfig: lambda_l2 must be >= 0")
        if self.d_att == 0:
            self.d_att = self.k


@dataclass
class UncertaintyParams:
    """Learned log-variances, one per task: s = log(sigma^2)."""

    s_rating: Parameter
    s_review: Parameter

    @classmethod
    def fresh(cls) -> "UncertaintyParams":
        return cls(
            s_rating=Parameter(np.asarray(0.0), name="log_var_rating"),
            s_review=Parameter(np.asarray(0.0), name="log_var_review"),
        )

    def trainable(self) -> dict:
        return {"log_var_rating": self.s_rating, "log_var_review": self.s_review}


@dataclass
class R3Model:
    """Everything the joint model owns; embeddings are a frozen input."""

    rating: rm.RatingParams
    review: rr.ReviewBranchParams | None
    uncertainty: UncertaintyParams
    embeddings: Parameter | None
    config: TrainConfig

    def trainable(self) -> dict:
        out = dict(self.rating.trainable())
        if self.review is not None:
            out.update(self.review.trainable())
        out.update(self.uncertainty.trainable())
        return out

    def l2_params(self) -> dict:
        """L2 never touches the uncertainty scalars or the word embeddings."""
        out = dict(self.rating.trainable())
        if self.review is not None:
            out.update(self.review.trainable())
        return out

    # serving surface (duck-typed by evalbench)
    @property
    def num_users(self) -> int:
        return self.rating.num_users

    @property
    def num_items(self) -> int:
        return self.rating.num_items

    def predict_batch(self, users, items) -> np.ndarray:
        return rm.rec_batch(users, items, self.rating)

    def scorable_mask(self, users, items) -> np.ndarray:
        return self.rating.scorable_mask(users, items)


def init_model(
    num_users: int,
    num_items: int,
    config: TrainConfig,
    embeddings: Parameter | None,
    mean_rating: float = 0.0,
) -> R3Model:
    rng = np.random.default_rng([config.seed, 0])
    rating = rm.init_rating_params(num_users, num_items, config.k, rng, bias_init=mean_rating)
    review = None
    if config.review_branch and embeddings is not None:
        review = rr.init_review_params(
            config.k, embeddings.shape[1], config.conv_width, config.d_att, rng
        )
    return R3Model(
        rating=rating,
        review=review,
        uncertainty=UncertaintyParams.fresh(),
        embeddings=embeddings,
        config=config,
    )


# --- losses -------------------------------------------------------------------


def loss_rating(batch, params: rm.RatingParams) -> Tensor:
    """Mean squared error of the scorer over a rating batch."""
    if len(batch) == 0:
        raise ValueError("loss_rating: empty batch")
    sq = []
    for t in batch:
        diff = dc.add(rm.rec(t.user, t.item, params), Tensor(np.asarray(-t.rating)))
        sq.append(dc.square(diff))
    return dc.mean(dc.pack(sq))


def loss_review(
    batch,
    item_table: Parameter,
    params: rr.ReviewBranchParams,
    embeddings: Parameter,
    activation: str = "relu",
    scale_logits: bool = True,
) -> Tensor:
    """Mean squared error of the review branch over a batch of entries."""
    if len(batch) == 0:
        raise ValueError("loss_review: empty batch")
    sq = []
    for e in batch:
        score = rr.rec_review(e, item_table, params, embeddings, activation, scale_logits)
        diff = dc.add(score, Tensor(np.asarray(-e.rating)))
        sq.append(dc.square(diff))
    return dc.mean(dc.pack(sq))


def l2_penalty(params) -> Tensor:
    parts = []
    for p in params.values() if isinstance(params, dict) else params:
        flat = dc.flatten(p)
        parts.append(dc.dot(flat, flat))
    total = parts[0]
    for p in parts[1:]:
        total = dc.add(total, p)
    return total


def combined_loss(
    l_rating: Tensor,
    l_review: Tensor,
    uncertainty: UncertaintyParams,
    l2_params,
    lam: float,
) -> Tensor:
    """exp(-s_a) L_D + exp(-s_b) L_R + (s_a + s_b)/2 + lam * sum ||theta||^2.

    With sigma^2 = exp(s) this is exactly the uncertainty-weighted sum
    (1/sigma_a^2) L_D + (1/sigma_b^2) L_R + log(sigma_a sigma_b). With both
    s frozen at 0 and lam = 0 it reduces bitwise to L_D + L_R.
    """
    term_a = dc.mul(dc.exp(dc.scale(uncertainty.s_rating, -1.0)), l_rating)
    term_b = dc.mul(dc.exp(dc.scale(uncertainty.s_review, -1.0)), l_review)
    penalty = dc.scale(dc.add(uncertainty.s_rating, uncertainty.s_review), 0.5)
    total = dc.add(dc.add(term_a, term_b), penalty)
    if lam > 0.0:
        total = dc.add(total, dc.scale(l2_penalty(l2_params), lam))
    return total


def rating_only_loss(l_rating: Tensor, l2_params, lam: float) -> Tensor:
    """Degraded objective when the regularization set is empty or disabled."""
    if lam > 0.0:
        return dc.add(l_rating, dc.scale(l2_penalty(l2_params), lam))
    return l_rating


# --- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float = 1e-3, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for name, p in params.items():
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        return state


def adam_step(params: dict, state: AdamState) -> None:
    """Standard bias-corrected Adam update from each parameter's grad.

    Grads are left untouched; the caller zeroes them.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1**state.t
    correct2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        if g.shape != state.m[name].shape:
            raise dc.ShapeError(f"adam_step: grad shape {g.shape} != state shape for {name!r}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / correct1
        v_hat = state.v[name] / correct2
        p.assign(p.value.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


# --- training loop --------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss_rating: float
    loss_review: float | None
    weight_rating: float
    weight_review: float
    val_rmse: float
    is_best: bool

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: R3Model
    adam: AdamState
    history: list
    best_epoch: int
    best_val_rmse: float


def _rmse_on(model, triples) -> float:
    if not triples:
        return float("nan")
    users = np.array([t.user for t in triples], dtype=np.int64)
    items = np.array([t.item for t in triples], dtype=np.int64)
    ratings = np.array([t.rating for t in triples], dtype=np.float64)
    preds = model.predict_batch(users, items)
    return float(np.sqrt(np.mean((preds - ratings) ** 2)))


def train(
    splits,
    review_set,
    config: TrainConfig,
    embeddings: Parameter | None = None,
    log_stream=None,
    stop_at_train_rmse: float | None = None,
) -> TrainResult:
    """Joint training: one rating batch and one review batch per step.

    Keeps (and finally restores) a copy of the parameters from the epoch with
    the best validation RMSE; stops once `patience` consecutive epochs fail
    to improve it. With an empty review set the loop degrades to rating-only
    training with a warning.
    """
    review_set = list(review_set or [])
    use_review = config.review_branch and bool(review_set) and embeddings is not None
    if config.review_branch and not review_set:
        log.warning("review set empty: degrading to rating-only training")

    mean_rating = float(np.mean([t.rating for t in splits.train])) if splits.train else 0.0
    model = init_model(splits.num_users, splits.num_items, config, embeddings, mean_rating=mean_rating)
    if not use_review:
        model.review = None

    trainables = model.trainable()
    if not use_review:
        # uncertainty scalars are inert without a second task
        trainables = {
            n: p for n, p in trainables.items() if not n.startswith("log_var")
        }
    adam = AdamState.for_params(trainables, lr=config.lr)

    rating_rng = np.random.default_rng([config.seed, 1])
    review_rng = np.random.default_rng([config.seed, 2])
    n_train = len(splits.train)
    steps_per_epoch = max(1, math.ceil(n_train / config.batch_rating))

    best_rmse = math.inf
    best_epoch = 0
    best_values = None
    stale = 0
    history = []

    for epoch in range(1, config.max_epochs + 1):
        order = rating_rng.permutation(n_train)
        sum_ld, sum_lr = 0.0, 0.0
        for step in range(steps_per_epoch):
            batch_ids = order[step * config.batch_rating : (step + 1) * config.batch_rating]
            if batch_ids.size == 0:
                batch_ids = order[:config.batch_rating]
            batch = [splits.train[i] for i in batch_ids]

            dc.zero_grads(trainables.values())
            tape = Tape()
            with recording(tape):
                l_d = loss_rating(batch, model.rating)
                if use_review:
                    picks = review_rng.integers(0, len(review_set), size=config.batch_review)
                    rbatch = [review_set[i] for i in picks]
                    l_r = loss_review(
                        rbatch,
                        model.rating.item_table,
                        model.review,
                        model.embeddings,
                        config.conv_activation,
                        config.attn_scale,
                    )
                    loss = combined_loss(
                        l_d, l_r, model.uncertainty, model.l2_params(), config.lambda_l2
                    )
                else:
                    l_r = None
                    loss = rating_only_loss(l_d, model.l2_params(), config.lambda_l2)
            backward(tape, loss)
            adam_step(trainables, adam)
            sum_ld += float(l_d)
            sum_lr += float(l_r) if l_r is not None else 0.0

        metric_split = splits.validation if splits.validation else splits.train
        val_rmse = _rmse_on(model, metric_split)
        is_best = val_rmse < best_rmse
        if is_best:
            best_rmse = val_rmse
            best_epoch = epoch
            best_values = {n: p.value for n, p in trainables.items()}
            stale = 0
        else:
            stale += 1

        entry = EpochLog(
            epoch=epoch,
            loss_rating=sum_ld / steps_per_epoch,
            loss_review=(sum_lr / steps_per_epoch) if use_review else None,
            weight_rating=float(np.exp(-model.uncertainty.s_rating.value.data)),
            weight_review=float(np.exp(-model.uncertainty.s_review.value.data)),
            val_rmse=val_rmse,
            is_best=is_best,
        )
        history.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry.as_dict(), sort_keys=True) + "\n")

        if stop_at_train_rmse is not None and _rmse_on(model, splits.train) < stop_at_train_rmse:
            break
        if stale > config.patience:
            break

    if best_values is not None:
        for name, value in best_values.items():
            trainables[name].value = value
    return TrainResult(
        model=model, adam=adam, history=history, best_epoch=best_epoch, best_val_rmse=best_rmse
    )


# --- checkpoint assembly ---------------------------------------------------------


def save_r3(path, result: TrainResult, fingerprint: str) -> None:
    model, adam = result.model, result.adam
    tensors = {}
    trainables = model.trainable()
    for name, p in trainables.items():
        tensors[name] = p.value.data
    for name in adam.m:
        tensors[f"adam.m.{name}"] = adam.m[name]
        tensors[f"adam.v.{name}"] = adam.v[name]
    meta = {
        "model": "r3",
        "config": asdict(model.config),
        "epoch": result.best_epoch,
        "best_val_rmse": result.best_val_rmse,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "has_review_branch": model.review is not None,
        "adam": {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
    }
    save_container(path, tensors, meta, fingerprint)


def load_r3(path, embeddings: Parameter | None = None):
    """Rebuild an R3Model (and AdamState) from a checkpoint.

    Returns (model, adam_state, meta, fingerprint). The review branch is
    restored only if it was saved; embeddings stay external.
    """
    tensors, meta, fingerprint = load_container(path)
    if meta.get("model") != "r3":
        raise CheckpointError(f"{path}: checkpoint holds {meta.get('model')!r}, expected 'r3'")
    config = TrainConfig(**meta["config"])
    rating = rm.RatingParams(
        user_table=Parameter(tensors["user_table"], name="user_table"),
        item_table=Parameter(tensors["item_table"], name="item_table"),
        weights=Parameter(tensors["rating_weights"], name="rating_weights"),
        bias=Parameter(tensors["rating_bias"], name="rating_bias"),
    )
    review = None
    if meta.get("has_review_branch"):
        review = rr.ReviewBranchParams(
            conv_filters=Parameter(tensors["conv_filters"], name="conv_filters"),
            conv_bias=Parameter(tensors["conv_bias"], name="conv_bias"),
            query_proj=Parameter(tensors["query_proj"], name="query_proj"),
            key_proj=Parameter(tensors["key_proj"], name="key_proj"),
            value_proj=Parameter(tensors["value_proj"], name="value_proj"),
        )
    unc = UncertaintyParams.fresh()
    if "log_var_rating" in tensors:
        unc.s_rating.assign(tensors["log_var_rating"])
        unc.s_review.assign(tensors["log_var_review"])
    model = R3Model(
        rating=rating, review=review, uncertainty=unc, embeddings=embeddings, config=config
    )
    a = meta["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
    for key, arr in tensors.items():
        if key.startswith("adam.m."):
            adam.m[key[len("adam.m."):]] = arr
        elif key.startswith("adam.v."):
            adam.v[key[len("adam.v."):]] = arr
    return model, adam, meta, fingerprint


# --- synthetic joint instance (gradient checking) --------------------------------


def synthetic_joint_instance(
    num_users: int = 4,
    num_items: int = 4,
    k: int = 4,
    max_len: int = 8,
    embed_dim: int = 6,
    n_reviews: int = 8,
    n_ratings: int = 8,
    vocab_size: int = 12,
    lambda_l2: float = 1e-5,
    seed: int = 0,
    activation: str = "relu",
):
    """A tiny joint-loss instance whose full gradient can be finite-differenced.

    ReLU kinks poison central differences, so the builder retries seeds until
    every conv pre-activation sits safely away from zero.

    Returns (loss_fn, trainables dict, model).
    """
    from .data_ingest import RatingTriple

    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        emb_rows = rng.standard_normal((vocab_size + 1, embed_dim))
        emb_rows /= np.linalg.norm(emb_rows, axis=1, keepdims=True)
        emb_rows[0] = 0.0
        embeddings = Parameter(emb_rows, trainable=False, name="word_embeddings")

        config = TrainConfig(
            k=k,
            max_len=max_len,
            embed_dim=embed_dim,
            lambda_l2=lambda_l2,
            seed=seed,
            conv_activation=activation,
        )
        model = init_model(num_users, num_items, config, embeddings, mean_rating=3.0)

        ratings = [
            RatingTriple(
                user=int(rng.integers(num_users)),
                item=int(rng.integers(num_items)),
                rating=float(rng.uniform(1, 5)),
                timestamp=0,
            )
            for _ in range(n_ratings)
        ]
        reviews = []
        for _ in range(n_reviews):
            n_tok = int(rng.integers(3, max_len + 1))
            tokens = np.zeros(max_len, dtype=np.int64)
            tokens[:n_tok] = rng.integers(1, vocab_size + 1, size=n_tok)
            reviews.append(
                ReviewEntry(
                    item=int(rng.integers(num_items)),
                    tokens=tokens,
                    mask=tokens != 0,
                    rating=float(rng.uniform(1, 5)),
                )
            )

        if activation == "relu" and _min_preactivation(model, reviews) < 1e-3:
            continue

        def loss_fn():
            l_d = loss_rating(ratings, model.rating)
            l_r = loss_review(
                reviews,
                model.rating.item_table,
                model.review,
                model.embeddings,
                config.conv_activation,
                config.attn_scale,
            )
            return combined_loss(l_d, l_r, model.uncertainty, model.l2_params(), lambda_l2)

        return loss_fn, model.trainable(), model
    raise RuntimeError("could not build a kink-free instance in 64 attempts")


def _min_preactivation(model: R3Model, reviews) -> float:
    worst = math.inf
    with dc.paused_recording():
        for e in reviews:
            ids = np.where(e.mask, e.tokens, 0)
            h = dc.gather_rows(model.embeddings, ids)
            pre = dc.conv1d_same(h, model.review.conv_filters, model.review.conv_bias)
            worst = min(worst, float(np.min(np.abs(pre.data))))
    return worst
