"""Amazon-style review parsing and the preprocessing protocol.

Pipeline: parse JSON-lines, keep records strictly later than the date
cutoff, iterate k-core filtering to a fixed point, assign contiguous IDs,
hold out each user's chronologically last rating as test (with a cold-item
guard), and carve a seeded validation slice off the training set. The whole
pipeline is deterministic given (input file, cutoff, k, seed).
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

# 2013-01-01T00:00:00Z; records at or before this instant are dropped.
DEFAULT_CUTOFF = 1356998400


class FormatError(ValueError):
    """Input file is probably not the expected JSON-lines review dump."""


class CorruptSplitsError(RuntimeError):
    """Persisted split directory does not match its manifest."""


@dataclass(frozen=True)
class RawReview:
    reviewer_id: str
    item_id: str
    rating: float
    timestamp: int
    review_text: str | None = None


@dataclass(frozen=True)
class RatingTriple:
    user: int
    item: int
    rating: float
    timestamp: int


@dataclass
class DatasetSplits:
    train: list
    validation: list
    test: list
    user_map: dict  # raw reviewer id -> contiguous id
    item_map: dict  # raw item id -> contiguous id
    review_store: dict | None = None  # item id -> [ReviewEntry], filled by text pipeline
    train_texts: list | None = None  # review text aligned with train (in-memory only)
    cold_item_guards: int = 0

    @property
    def num_users(self) -> int:
        return len(self.user_map)

    @property
    def num_items(self) -> int:
        return len(self.item_map)

    def all_triples(self) -> list:
        return self.train + self.validation + self.test

    def sparsity(self) -> float:
        denom = self.num_users * self.num_items
        return len(self.all_triples()) / denom if denom else 0.0


def parse_jsonl(path):
    """Yield RawReview per well-formed line; raise FormatError if >10% are malformed."""
    total = 0
    malformed = 0
    out = []
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    with f:
        for line in f:
            if not line.strip():
                continue
            total += 1
            rec = _parse_line(line)
            if rec is None:
                malformed += 1
            else:
                out.append(rec)
    if total and malformed / total > 0.10:
        raise FormatError(
            f"{path}: {malformed}/{total} lines malformed; wrong file or format?"
        )
    if malformed:
        log.info("%s: skipped %d malformed of %d lines", path, malformed, total)
    return out


def _parse_line(line: str):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    reviewer = obj.get("reviewerID")
    item = obj.get("asin")
    rating = obj.get("overall")
    ts = obj.get("unixReviewTime")
    text = obj.get("reviewText")
    if not isinstance(reviewer, str) or not isinstance(item, str):
        return None
    if isinstance(rating, bool) or not isinstance(rating, (int, float)):
        return None
    if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
        return None
    rating = float(rating)
    if not 1.0 <= rating <= 5.0:
        return None
    if text is not None and not isinstance(text, str):
        return None
    return RawReview(reviewer, item, rating, ts, text)


def filter_by_date(reviews, cutoff: int = DEFAULT_CUTOFF) -> list:
    """Keep records strictly later than the cutoff (boundary excluded)."""
    return [r for r in reviews if r.timestamp > cutoff]


def kcore_filter(reviews, k: int = 5) -> list:
    """Iteratively drop users/items with fewer than k records until a fixed point."""
    if k < 1:
        raise ValueError("kcore_filter: k must be >= 1")
    current = list(reviews)
    while True:
        users = Counter(r.reviewer_id for r in current)
        items = Counter(r.item_id for r in current)
        kept = [
            r for r in current if users[r.reviewer_id] >= k and items[r.item_id] >= k
        ]
        if len(kept) == len(current):
            break
        current = kept
    if reviews and not current:
        log.warning("kcore_filter: k=%d removed every record", k)
    return current


def contiguous_id_maps(reviews):
    """Sorted raw-ID order -> contiguous ids (data-independent and deterministic)."""
    user_map = {u: i for i, u in enumerate(sorted({r.reviewer_id for r in reviews}))}
    item_map = {it: i for i, it in enumerate(sorted({r.item_id for r in reviews}))}
    return user_map, item_map


def split_leave_last_out(triples):
    """Per user, move the strictly latest triple (ties: larger item id) to test.

    Cold-item guard: if moving the triple would leave its item with no
    occurrence in train, the triple stays in train and the user is absent
    from test. Returns (train, test, guard_count).
    """
    by_user: dict = {}
    for t in triples:
        by_user.setdefault(t.user, []).append(t)

    item_left = Counter(t.item for t in triples)
    test_ids = set()
    guards = 0
    for user in sorted(by_user):
        rows = by_user[user]
        if len(rows) < 2:
            continue  # nothing to hold out without emptying the user
        candidate = max(rows, key=lambda t: (t.timestamp, t.item))
        if item_left[candidate.item] >= 2:
            test_ids.add(id(candidate))
            item_left[candidate.item] -= 1
        else:
            guards += 1
            log.info(
                "cold-item guard: user %d keeps last item %d in train", user, candidate.item
            )
    train = [t for t in triples if id(t) not in test_ids]
    test = [t for t in triples if id(t) in test_ids]
    return train, test, guards


def split_validation(train, fraction: float = 0.1, seed: int = 0):
    """Uniform seeded selection of floor(fraction * |train|) triples as validation."""
    if not 0 < fraction < 1:
        raise ValueError("split_validation: fraction must be in (0, 1)")
    n_valid = int(fraction * len(train))
    order = list(range(len(train)))
    random.Random(seed).shuffle(order)
    chosen = set(order[:n_valid])
    kept = [train[i] for i in range(len(train)) if i not in chosen]
    valid = [train[i] for i in range(len(train)) if i in chosen]
    return kept, valid


def build_splits(
    reviews,
    cutoff: int = DEFAULT_CUTOFF,
    k: int = 5,
    valid_fraction: float = 0.1,
    seed: int = 0,
) -> DatasetSplits:
    """Run the full protocol over parsed reviews; keeps train texts aligned."""
    kept = kcore_filter(filter_by_date(reviews, cutoff), k)
    user_map, item_map = contiguous_id_maps(kept)
    triples = [
        RatingTriple(
            user=user_map[r.reviewer_id],
            item=item_map[r.item_id],
            rating=r.rating,
            timestamp=r.timestamp,
        )
        for r in kept
    ]
    text_of = {id(t): r.review_text for t, r in zip(triples, kept)}
    train_all, test, guards = split_leave_last_out(triples)
    train, validation = split_validation(train_all, valid_fraction, seed)
    return DatasetSplits(
        train=train,
        validation=validation,
        test=test,
        user_map=user_map,
        item_map=item_map,
        train_texts=[text_of[id(t)] for t in train],
        cold_item_guards=guards,
    )


# --- persistence ----------------------------------------------------------------

_SPLIT_FILES = {"train": "train.jsonl", "validation": "valid.jsonl", "test": "test.jsonl"}


def _triple_dict(t: RatingTriple) -> dict:
    return {"user": t.user, "item": t.item, "rating": t.rating, "ts": t.timestamp}


def persist_splits(splits: DatasetSplits, out_dir, extra_manifest: dict | None = None) -> dict:
    """Write split files, ID maps and a manifest; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, fname in _SPLIT_FILES.items():
        with open(out_dir / fname, "w", encoding="utf-8") as f:
            for t in getattr(splits, name):
                f.write(json.dumps(_triple_dict(t), sort_keys=True) + "\n")
    _write_map(out_dir / "users.tsv", splits.user_map)
    _write_map(out_dir / "items.tsv", splits.item_map)
    manifest = {
        "counts": {
            "train": len(splits.train),
            "validation": len(splits.validation),
            "test": len(splits.test),
            "users": splits.num_users,
            "items": splits.num_items,
        },
        "sparsity": splits.sparsity(),
        "cold_item_guards": splits.cold_item_guards,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _write_map(path, mapping) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for raw, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
            f.write(f"{raw}\t{idx}\n")


def _read_map(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            raw, idx = line.rstrip("\n").split("\t")
            out[raw] = int(idx)
    return out


def load_splits(split_dir) -> DatasetSplits:
    """Load persisted splits; raises CorruptSplitsError on manifest mismatch."""
    split_dir = Path(split_dir)
    with open(split_dir / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    parts = {}
    for name, fname in _SPLIT_FILES.items():
        triples = []
        with open(split_dir / fname, encoding="utf-8") as f:
            for line in f:
                d = json.loads(line)
                triples.append(
                    RatingTriple(
                        user=int(d["user"]),
                        item=int(d["item"]),
                        rating=float(d["rating"]),
                        timestamp=int(d["ts"]),
                    )
                )
        parts[name] = triples
        if len(triples) != manifest["counts"][name]:
            raise CorruptSplitsError(
                f"{fname}: {len(triples)} records but manifest says {manifest['counts'][name]}"
            )
    user_map = _read_map(split_dir / "users.tsv")
    item_map = _read_map(split_dir / "items.tsv")
    if len(user_map) != manifest["counts"]["users"] or len(item_map) != manifest["counts"]["items"]:
        raise CorruptSplitsError("ID map sizes do not match manifest")
    return DatasetSplits(
        train=parts["train"],
        validation=parts["validation"],
        test=parts["test"],
        user_map=user_map,
        item_map=item_map,
        cold_item_guards=manifest.get("cold_item_guards", 0),
    )
