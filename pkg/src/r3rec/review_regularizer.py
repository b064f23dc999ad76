"""Training-only review branch: CNN over the review matrix, item-conditioned
single-head attention, dot-product score against the shared item embedding.

Exists to force item embeddings to be meaningful; nothing here runs at
serving time. Gradients flow into the item table, conv filters and attention
projections, never into the frozen word embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .text_pipeline import ReviewEntry


@dataclass
class ReviewBranchParams:
    conv_filters: Parameter  # (K, w, D_R), w odd
    conv_bias: Parameter  # (K,)
    query_proj: Parameter  # (d_att, K)
    key_proj: Parameter  # (d_att, K)
    value_proj: Parameter  # (K, K)

    @property
    def width(self) -> int:
        return self.conv_filters.shape[1]

    @property
    def d_att(self) -> int:
        return self.query_proj.shape[0]

    def trainable(self) -> dict:
        return {
            "conv_filters": self.conv_filters,
            "conv_bias": self.conv_bias,
            "query_proj": self.query_proj,
            "key_proj": self.key_proj,
            "value_proj": self.value_proj,
        }


@dataclass
class ReviewFeatures:
    """Per-position conv features plus the validity mask carried from the entry."""

    m: Tensor  # (L, K)
    mask: np.ndarray  # (L,) bool


def init_review_params(
    k: int, embed_dim: int, width: int, d_att: int, rng: np.random.Generator
) -> ReviewBranchParams:
    if width % 2 == 0:
        raise ValueError(f"conv width must be odd, got {width}")
    conv_bound = np.sqrt(6.0 / (width * embed_dim + k))
    att_bound = np.sqrt(6.0 / (k + d_att))
    return ReviewBranchParams(
        conv_filters=Parameter(
            rng.uniform(-conv_bound, conv_bound, size=(k, width, embed_dim)),
            name="conv_filters",
        ),
        conv_bias=Parameter(np.zeros(k), name="conv_bias"),
        query_proj=Parameter(rng.uniform(-att_bound, att_bound, size=(d_att, k)), name="query_proj"),
        key_proj=Parameter(rng.uniform(-att_bound, att_bound, size=(d_att, k)), name="key_proj"),
        value_proj=Parameter(rng.uniform(-att_bound, att_bound, size=(k, k)), name="value_proj"),
    )


def conv_text(
    h: Tensor, mask: np.ndarray, params: ReviewBranchParams, activation: str = "relu"
) -> ReviewFeatures:
    """Same-padded conv over the (L, D_R) review matrix; each filter reads w-grams."""
    pre = dc.conv1d_same(h, params.conv_filters, params.conv_bias)
    if activation == "relu":
        m = dc.relu(pre)
    elif activation == "identity":
        m = pre
    else:
        raise ValueError(f"conv_text: unknown activation {activation!r}")
    return ReviewFeatures(m=m, mask=mask)


def attend(
    v_item: Tensor,
    features: ReviewFeatures,
    params: ReviewBranchParams,
    scale_logits: bool = True,
) -> Tensor:
    """Item-conditioned single-head attention over review positions.

    Query W_q v, keys M W_k^T, values M W_v^T; scores are a softmax over
    unmasked positions only (padded rows get exact zero weight). Logits are
    scaled by 1/sqrt(d_att) unless disabled.
    """
    if not features.mask.any():
        raise ValueError("attend: every position is masked")
    query = dc.matvec(params.query_proj, v_item)
    keys = dc.matmul(features.m, dc.transpose(params.key_proj))
    values = dc.matmul(features.m, dc.transpose(params.value_proj))
    logits = dc.matvec(keys, query)
    if scale_logits:
        logits = dc.scale(logits, 1.0 / np.sqrt(params.d_att))
    scores = dc.masked_softmax(logits, features.mask)
    return dc.matvec(dc.transpose(values), scores)


def attention_scores(
    item_id: int,
    entry: ReviewEntry,
    item_table: Parameter,
    params: ReviewBranchParams,
    embeddings: Parameter,
    activation: str = "relu",
    scale_logits: bool = True,
) -> np.ndarray:
    """Forward-only attention distribution for one entry (diagnostics and tests)."""
    with dc.paused_recording():
        h = _review_matrix(entry, embeddings)
        features = conv_text(h, entry.mask, params, activation)
        v = dc.lookup_row(item_table, item_id)
        query = dc.matvec(params.query_proj, v)
        keys = dc.matmul(features.m, dc.transpose(params.key_proj))
        logits = dc.matvec(keys, query)
        if scale_logits:
            logits = dc.scale(logits, 1.0 / np.sqrt(params.d_att))
        return dc.masked_softmax(logits, features.mask).data


def _review_matrix(entry: ReviewEntry, embeddings: Parameter) -> Tensor:
    # Masked positions always read the zero padding row, whatever their token
    # ids contain; the score is therefore invariant to padded-position content.
    ids = np.where(entry.mask, entry.tokens, 0)
    return dc.gather_rows(embeddings, ids)


def rec_review(
    entry: ReviewEntry,
    item_table: Parameter,
    params: ReviewBranchParams,
    embeddings: Parameter,
    activation: str = "relu",
    scale_logits: bool = True,
) -> Tensor:
    """Review-conditioned score: dot(v_item, attended conv features)."""
    h = _review_matrix(entry, embeddings)
    features = conv_text(h, entry.mask, params, activation)
    v = dc.lookup_row(item_table, entry.item)
    z = attend(v, features, params, scale_logits)
    return dc.dot(v, z)
