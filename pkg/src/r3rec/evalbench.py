"""RMSE evaluation over splits and per-entry inference-latency benchmarking.

Latency methodology: random valid id pairs are pre-generated (assembly is
measured separately, never inside the timed window), warmup batches are
discarded, and per-entry statistics come from per-batch wall time on a
monotonic clock divided by batch size. Absolute numbers are hardware-bound
context; the meaningful outputs are scaling and path-isolation properties.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import review_regularizer as rr

TEXT_BRANCH_KINDS = ("conv1d_same", "masked_softmax")


@dataclass
class EvalReport:
    split: str
    rmse: float
    scored: int
    skipped: int
    skip_reasons: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def lines(self) -> list:
        out = [f"split={self.split} rmse={self.rmse:.6f} scored={self.scored} skipped={self.skipped}"]
        for reason, n in sorted(self.skip_reasons.items()):
            out.append(f"  skipped[{reason}] = {n}")
        return out


@dataclass
class LatencyReport:
    model: str
    batch_size: int
    batches: int
    mean_us: float
    p50_us: float
    p99_us: float
    assembly_us: float  # per-entry id-pair generation cost, measured outside the timed loop
    k: int | None = None
    max_len: int | None = None

    def as_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        extra = ""
        if self.k is not None:
            extra += f" K={self.k}"
        if self.max_len is not None:
            extra += f" L={self.max_len}"
        return (
            f"{self.model}{extra}: mean={self.mean_us:.3f}us p50={self.p50_us:.3f}us "
            f"p99={self.p99_us:.3f}us per entry (batch={self.batch_size} x{self.batches}, "
            f"assembly={self.assembly_us:.3f}us)"
        )


def rmse(predictions, targets) -> float:
    """sqrt(mean((p - t)^2)); lengths must match and be nonzero."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"rmse: shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse: empty inputs")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def evaluate(model, triples, split_name: str = "test") -> EvalReport:
    """Score every triple the model can reach; tally cold ids instead of failing."""
    if not triples:
        raise ValueError(f"evaluate: split {split_name!r} is empty")
    users = np.array([t.user for t in triples], dtype=np.int64)
    items = np.array([t.item for t in triples], dtype=np.int64)
    ratings = np.array([t.rating for t in triples], dtype=np.float64)

    ok = model.scorable_mask(users, items)
    reasons: dict = {}
    if not ok.all():
        n_user = int(np.sum((users < 0) | (users >= model.num_users)))
        n_item = int(np.sum((items < 0) | (items >= model.num_items)))
        if n_user:
            reasons["cold_user"] = n_user
        if n_item:
            reasons["cold_item"] = n_item
    if not ok.any():
        raise ValueError(
            f"evaluate: no scorable entries in split {split_name!r} "
            f"(all ids unseen by a {type(model).__name__})"
        )
    preds = model.predict_batch(users[ok], items[ok])
    return EvalReport(
        split=split_name,
        rmse=rmse(preds, ratings[ok]),
        scored=int(ok.sum()),
        skipped=int((~ok).sum()),
        skip_reasons=reasons,
    )


def bench_latency(
    model,
    batch_size: int = 1024,
    batches: int = 100,
    warmup: int = 10,
    seed: int = 0,
    label: str | None = None,
) -> LatencyReport:
    """Per-entry serving latency over pre-generated random valid id pairs."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    pairs = [
        (
            rng.integers(0, model.num_users, size=batch_size),
            rng.integers(0, model.num_items, size=batch_size),
        )
        for _ in range(warmup + batches)
    ]
    assembly_us = (time.perf_counter() - t0) / ((warmup + batches) * batch_size) * 1e6

    for users, items in pairs[:warmup]:
        model.predict_batch(users, items)

    per_entry = np.empty(batches, dtype=np.float64)
    for b, (users, items) in enumerate(pairs[warmup:]):
        start = time.perf_counter()
        model.predict_batch(users, items)
        per_entry[b] = (time.perf_counter() - start) / batch_size * 1e6

    return LatencyReport(
        model=label or type(model).__name__,
        batch_size=batch_size,
        batches=batches,
        mean_us=float(per_entry.mean()),
        p50_us=float(np.percentile(per_entry, 50)),
        p99_us=float(np.percentile(per_entry, 99)),
        assembly_us=float(assembly_us),
        k=getattr(model, "k", None) or getattr(getattr(model, "rating", None), "k", None),
        max_len=getattr(getattr(model, "config", None), "max_len", None),
    )


def text_branch_call_count(counts_before: dict, counts_after: dict) -> int:
    """Number of conv/attention primitive invocations between two counter snapshots."""
    total = 0
    for kind in TEXT_BRANCH_KINDS:
        before = counts_before.get(kind, (0, 0))[0]
        after = counts_after.get(kind, (0, 0))[0]
        total += after - before
    return total


def bench_text_branch(
    model,
    max_len: int,
    batch_size: int = 64,
    batches: int = 20,
    warmup: int = 2,
    seed: int = 0,
) -> LatencyReport:
    """Counterfactual: time the review-branch forward as if it served traffic.

    This is the cost profile a text-coupled scorer would pay per entry; it
    grows with review length while the real serving path does not.
    """
    from .text_pipeline import ReviewEntry

    rng = np.random.default_rng(seed)
    vocab_hi = model.embeddings.shape[0]
    entries = []
    for _ in range((warmup + batches) * batch_size):
        tokens = rng.integers(1, vocab_hi, size=max_len)
        entries.append(
            ReviewEntry(
                item=int(rng.integers(0, model.num_items)),
                tokens=tokens,
                mask=np.ones(max_len, dtype=bool),
                rating=0.0,
            )
        )

    def run(batch):
        with dc.paused_recording():
            for e in batch:
                rr.rec_review(
                    e,
                    model.rating.item_table,
                    model.review,
                    model.embeddings,
                    model.config.conv_activation,
                    model.config.attn_scale,
                )

    for b in range(warmup):
        run(entries[b * batch_size : (b + 1) * batch_size])
    per_entry = np.empty(batches, dtype=np.float64)
    for b in range(batches):
        batch = entries[(warmup + b) * batch_size : (warmup + b + 1) * batch_size]
        start = time.perf_counter()
        run(batch)
        per_entry[b] = (time.perf_counter() - start) / batch_size * 1e6

    return LatencyReport(
        model="r3-review-branch",
        batch_size=batch_size,
        batches=batches,
        mean_us=float(per_entry.mean()),
        p50_us=float(np.percentile(per_entry, 50)),
        p99_us=float(np.percentile(per_entry, 99)),
        assembly_us=0.0,
        k=model.rating.k,
        max_len=max_len,
    )


def bench_scaling(
    model_factory,
    k_values=(8, 16),
    len_values=(32, 128, 512),
    batch_size: int = 1024,
    batches: int = 20,
    warmup: int = 3,
    text_batches: int = 10,
    seed: int = 0,
) -> list:
    """Latency table across K and review length L.

    `model_factory(k, max_len)` must return a trained-or-random R3 model.
    For each (K, L): one serving-path report (must be L-independent) and one
    review-branch counterfactual report (grows with L).
    """
    reports = []
    for k in k_values:
        for max_len in len_values:
            model = model_factory(k, max_len)
            serving = bench_latency(
                model,
                batch_size=batch_size,
                batches=batches,
                warmup=warmup,
                seed=seed,
                label="r3-serving",
            )
            serving.max_len = max_len
            reports.append(serving)
            if model.review is not None:
                reports.append(
                    bench_text_branch(
                        model, max_len, batch_size=64, batches=text_batches, seed=seed
                    )
                )
    return reports
