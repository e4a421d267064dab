"""Ranking evaluation (hit rate@K, MRR@K) plus POP and Item-KNN baselines.

Special tokens never enter the candidate set. Ties are broken by
ascending item index so reports are reproducible across runs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import FIRST_ITEM, PrefixPair, Session, Vocabulary
from .errors import ConfigurationError, DataError
from .masking import MaskingStrategy, eval_example
from .model import Model, forward

DEFAULT_K = 20


@dataclass
class EvalReport:
    k: int
    hit_rate: float
    mrr: float
    n_instances: int
    per_instance_ranks: Optional[list] = None

    def to_json_obj(self) -> dict:
        obj = {
            "k": self.k,
            "hit_rate": self.hit_rate,
            "mrr": self.mrr,
            "n_instances": self.n_instances,
        }
        if self.per_instance_ranks is not None:
            obj["per_instance_ranks"] = [
                {"origin": list(origin), "rank": rank} for origin, rank in self.per_instance_ranks
            ]
        return obj


def rank_target(scores: np.ndarray, target: int, vocab: Vocabulary) -> Optional[int]:
    """1-based rank of the target among real items, descending score,
    ties by ascending item index; None when the target is out of range."""
    if target in (vocab.pad, vocab.mask):
        raise ConfigurationError(f"target {target} is a special token")
    n_real = vocab.num_items
    if target >= FIRST_ITEM + n_real or target < 0:
        return None
    real = np.asarray(scores[FIRST_ITEM:FIRST_ITEM + n_real])
    t = target - FIRST_ITEM
    target_score = real[t]
    better = int((real > target_score).sum())
    tied_before = int((real[:t] == target_score).sum())
    return 1 + better + tied_before


def report_from_ranks(ranks: Sequence[Optional[int]], k: int,
                      origins: Sequence | None = None, keep_ranks: bool = False) -> EvalReport:
    if not ranks:
        raise DataError("cannot evaluate an empty instance set")
    hits = 0
    rr_sum = 0.0
    for rank in ranks:
        if rank is not None and rank <= k:
            hits += 1
            rr_sum += 1.0 / rank
    per_instance = None
    if keep_ranks:
        origins = origins if origins is not None else [("pair", i) for i in range(len(ranks))]
        per_instance = list(zip(origins, ranks))
    return EvalReport(k, hits / len(ranks), rr_sum / len(ranks), len(ranks), per_instance)


def evaluate_scores(scores: np.ndarray, targets: Sequence[int], vocab: Vocabulary,
                    k: int = DEFAULT_K, origins=None, keep_ranks: bool = False) -> EvalReport:
    ranks = [rank_target(scores[i], int(t), vocab) for i, t in enumerate(targets)]
    return report_from_ranks(ranks, k, origins, keep_ranks)


def evaluate(
    model: Model,
    test_pairs: Sequence[PrefixPair],
    strategy: MaskingStrategy,
    vocab: Vocabulary,
    k: int = DEFAULT_K,
    batch_size: int = 256,
    keep_ranks: bool = False,
) -> EvalReport:
    """Rank every pair's target at the readout slot of its eval example."""
    if not test_pairs:
        raise DataError("cannot evaluate an empty test set")
    ranks: list[Optional[int]] = []
    origins = []
    for start in range(0, len(test_pairs), batch_size):
        chunk = test_pairs[start:start + batch_size]
        examples = [
            eval_example(pair, strategy.max_len, strategy, origin=("pair", start + i))
            for i, pair in enumerate(chunk)
        ]
        logits = forward(model, examples, training=False).data
        for row, ex in enumerate(examples):
            scores = logits[row, ex.readout_position]
            ranks.append(rank_target(scores, ex.targets[ex.readout_position], vocab))
            origins.append(ex.origin)
    return report_from_ranks(ranks, k, origins, keep_ranks)


def pop_baseline(train_sessions: Sequence[Session], test_pairs: Sequence[PrefixPair],
                 vocab: Vocabulary, k: int = DEFAULT_K, keep_ranks: bool = False) -> EvalReport:
    """One global popularity ranking scores every instance."""
    if not test_pairs:
        raise DataError("cannot evaluate an empty test set")
    counts = Counter(item for s in train_sessions for item in s.items)
    scores = np.zeros(FIRST_ITEM + vocab.num_items)
    for item, c in counts.items():
        scores[item] = c
    ranks = [rank_target(scores, pair.target, vocab) for pair in test_pairs]
    return report_from_ranks(ranks, k, keep_ranks=keep_ranks)


def item_cosine_matrix(train_sessions: Sequence[Session], vocab: Vocabulary) -> np.ndarray:
    """Cosine similarity between items' binary session-membership vectors.

    The diagonal is zeroed: an item is never recommended as its own
    successor on the strength of self-co-occurrence.
    """
    size = FIRST_ITEM + vocab.num_items
    co = np.zeros((size, size))
    occur = np.zeros(size)
    for s in train_sessions:
        present = sorted(set(s.items))
        occur[present] += 1
        for a in present:
            co[a, present] += 1
    norm = np.sqrt(occur)
    denom = np.outer(norm, norm)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > 0, co / np.where(denom > 0, denom, 1.0), 0.0)
    np.fill_diagonal(cos, 0.0)
    return cos


def item_knn_baseline(
    train_sessions: Sequence[Session],
    test_pairs: Sequence[PrefixPair],
    vocab: Vocabulary,
    k: int = DEFAULT_K,
    mode: str = "last",
    keep_ranks: bool = False,
) -> EvalReport:
    """Score candidates by cosine similarity to the prefix's last item
    (mode="last") or summed over all prefix items (mode="sum")."""
    if mode not in ("last", "sum"):
        raise ConfigurationError(f"item_knn mode must be 'last' or 'sum', got {mode!r}")
    if not test_pairs:
        raise DataError("cannot evaluate an empty test set")
    cos = item_cosine_matrix(train_sessions, vocab)
    ranks = []
    for pair in test_pairs:
        if mode == "last":
            scores = cos[pair.prefix[-1]]
        else:
            scores = cos[list(pair.prefix)].sum(axis=0)
        ranks.append(rank_target(scores, pair.target, vocab))
    return report_from_ranks(ranks, k, keep_ranks=keep_ranks)
