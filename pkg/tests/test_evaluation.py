"""Ranking metric tests against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smmrec.data import FIRST_ITEM, PrefixPair, Session, Vocabulary
from smmrec.errors import ConfigurationError, DataError
from smmrec.evaluation import (
    evaluate,
    evaluate_scores,
    item_cosine_matrix,
    item_knn_baseline,
    pop_baseline,
    rank_target,
    report_from_ranks,
)
from smmrec.masking import MaskingStrategy
from smmrec.model import ModelConfig, init_model
from smmrec.synthetic import cycle_dataset


def _vocab(n_items):
    item_to_index = {f"i{p}": FIRST_ITEM + p for p in range(n_items)}
    return Vocabulary(item_to_index, {v: k for k, v in item_to_index.items()}, n_items)


def _oracle_rank(scores, target, vocab):
    """Full sort of the real-item candidate list, ties by index."""
    real = list(range(FIRST_ITEM, FIRST_ITEM + vocab.num_items))
    order = sorted(real, key=lambda i: (-scores[i], i))
    return order.index(target) + 1


def _oracle_metrics(ranks, k):
    hits = [r is not None and r <= k for r in ranks]
    rrs = [1.0 / r if (r is not None and r <= k) else 0.0 for r in ranks]
    return float(np.mean(hits)), float(np.mean(rrs))


class TestRankTarget:
    def test_strict_top_score_ranks_first(self):
        vocab = _vocab(5)
        scores = np.array([0, 0, 1.0, 5.0, 2.0, 0.5, 0.1])
        assert rank_target(scores, 3, vocab) == 1

    def test_tie_broken_by_lower_index(self):
        vocab = _vocab(3)
        scores = np.array([0, 0, 2.0, 2.0, 0.0])
        assert rank_target(scores, 3, vocab) == 2
        assert rank_target(scores, 2, vocab) == 1

    def test_special_target_rejected(self):
        with pytest.raises(ConfigurationError):
            rank_target(np.zeros(7), 0, _vocab(5))
        with pytest.raises(ConfigurationError):
            rank_target(np.zeros(7), 1, _vocab(5))

    def test_out_of_vocab_target_is_none(self):
        assert rank_target(np.zeros(7), 99, _vocab(5)) is None

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_matches_full_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        vocab = _vocab(50)
        scores = np.round(rng.normal(size=52), 2)  # rounding forces ties
        target = int(rng.integers(2, 52))
        assert rank_target(scores, target, vocab) == _oracle_rank(scores, target, vocab)


class TestReports:
    def test_two_ranks_hand_values(self):
        rep = report_from_ranks([1, 25], k=20)
        assert rep.hit_rate == 0.5 and rep.mrr == 0.5

    def test_none_rank_counts_as_miss(self):
        rep = report_from_ranks([3, None], k=20)
        assert rep.mrr == pytest.approx(1 / 6)
        assert rep.hit_rate == 0.5

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            report_from_ranks([], k=20)

    def test_metric_oracle_equivalence(self):
        """Vectorized metrics vs an independent full-sort recomputation."""
        rng = np.random.default_rng(11)
        vocab = _vocab(40)
        n = 300
        scores = rng.normal(size=(n, 42))
        targets = rng.integers(2, 42, size=n)
        rep = evaluate_scores(scores, targets, vocab, k=20)
        oracle_ranks = [_oracle_rank(scores[i], int(t), vocab) for i, t in enumerate(targets)]
        hr, mrr = _oracle_metrics(oracle_ranks, 20)
        assert abs(rep.hit_rate - hr) < 1e-12
        assert abs(rep.mrr - mrr) < 1e-12

    def test_mrr_bounded_by_hit_rate(self):
        rng = np.random.default_rng(12)
        ranks = [int(r) if r > 0 else None for r in rng.integers(-5, 40, size=200)]
        rep = report_from_ranks(ranks, k=20)
        assert 0.0 <= rep.mrr <= rep.hit_rate <= 1.0

    def test_full_cutoff_hits_everything(self):
        vocab = _vocab(30)
        rng = np.random.default_rng(13)
        scores = rng.normal(size=(50, 32))
        targets = rng.integers(2, 32, size=50)
        rep = evaluate_scores(scores, targets, vocab, k=30)
        assert rep.hit_rate == 1.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(14)
        vocab = _vocab(20)
        scores = rng.normal(size=(40, 22))
        targets = rng.integers(2, 22, size=40)
        a = evaluate_scores(scores, targets, vocab, k=5)
        b = evaluate_scores(np.exp(scores * 2.0) + 7.0, targets, vocab, k=5)
        assert (a.hit_rate, a.mrr) == (b.hit_rate, b.mrr)

    def test_adding_rank_one_never_hurts(self):
        base = [4, None, 17]
        rep = report_from_ranks(base, k=20)
        better = report_from_ranks(base + [1], k=20)
        assert better.hit_rate >= rep.hit_rate and better.mrr >= rep.mrr


class TestModelEvaluate:
    def test_deterministic_and_sized(self):
        ds = cycle_dataset(n_train=20, n_test=6, period=6, min_len=3, max_len=5, seed=3)
        from smmrec.data import prefix_augment

        pairs = prefix_augment(ds.test, window=6)
        model = init_model(ModelConfig(vocab_size=8, hidden=8, layers=1, heads=2,
                                       max_len=6, dropout=0.0, seed=1))
        strat = MaskingStrategy(max_len=6)
        a = evaluate(model, pairs, strat, ds.vocab, k=3, keep_ranks=True)
        b = evaluate(model, pairs, strat, ds.vocab, k=3, keep_ranks=True)
        assert a.n_instances == len(pairs)
        assert a.per_instance_ranks == b.per_instance_ranks

    def test_empty_pairs_rejected(self):
        ds = cycle_dataset(n_train=10, n_test=2, period=6, min_len=3, max_len=5, seed=3)
        model = init_model(ModelConfig(vocab_size=8, hidden=8, layers=1, heads=2,
                                       max_len=6, dropout=0.0, seed=1))
        with pytest.raises(DataError):
            evaluate(model, [], MaskingStrategy(max_len=6), ds.vocab)


class TestPop:
    def test_most_frequent_item_always_first(self):
        vocab = _vocab(4)
        train = [Session("t", [2, 2, 2, 3], 0), Session("u", [2, 4], 1)]
        pairs = [PrefixPair((3,), 2), PrefixPair((4,), 2)]
        rep = pop_baseline(train, pairs, vocab, k=1)
        assert rep.hit_rate == 1.0 and rep.mrr == 1.0

    def test_all_equal_frequency_degenerates_to_index_order(self):
        vocab = _vocab(3)
        train = [Session("t", [2, 3, 4], 0)]
        rep = pop_baseline(train, [PrefixPair((2,), 4)], vocab, k=20, keep_ranks=True)
        assert rep.per_instance_ranks[0][1] == 3

    def test_skewed_fixture_hand_count(self):
        """Frequencies 5/3/1: targets rank by popularity position."""
        vocab = _vocab(3)
        train = [Session("t", [2] * 5 + [3] * 3 + [4], 0)]
        pairs = [PrefixPair((2,), 2), PrefixPair((2,), 3), PrefixPair((2,), 4)]
        rep = pop_baseline(train, pairs, vocab, k=2)
        # ranks 1, 2, 3 -> hits at k=2: two of three; mrr (1 + 1/2 + 0)/3
        assert rep.hit_rate == pytest.approx(2 / 3)
        assert rep.mrr == pytest.approx((1.0 + 0.5) / 3)


class TestItemKnn:
    def test_exclusive_companion_ranks_first(self):
        vocab = _vocab(4)
        train = [Session(f"t{i}", [2, 3], i) for i in range(4)]
        train += [Session(f"u{i}", [4, 5], i) for i in range(4)]
        rep = item_knn_baseline(train, [PrefixPair((2,), 3)], vocab, k=1)
        assert rep.hit_rate == 1.0

    def test_isolated_item_degenerates_to_index_order(self):
        vocab = _vocab(4)
        train = [Session("t", [2, 3], 0), Session("u", [4], 1), Session("v", [5], 2)]
        rep = item_knn_baseline(train, [PrefixPair((4,), 2)], vocab, k=20, keep_ranks=True)
        assert rep.per_instance_ranks[0][1] == 1  # all-zero scores, index order

    def test_toy_corpus_matches_dense_cosine_oracle(self):
        vocab = _vocab(5)
        rng = np.random.default_rng(20)
        train = [
            Session(f"s{i}", [int(x) for x in rng.choice(range(2, 7), size=3, replace=False)], i)
            for i in range(6)
        ]
        cos = item_cosine_matrix(train, vocab)

        membership = np.zeros((6, 7))
        for row, s in enumerate(train):
            membership[row, sorted(set(s.items))] = 1.0
        oracle = np.zeros((7, 7))
        for a in range(2, 7):
            for b in range(2, 7):
                if a == b:
                    continue
                na, nb = np.linalg.norm(membership[:, a]), np.linalg.norm(membership[:, b])
                if na > 0 and nb > 0:
                    oracle[a, b] = membership[:, a] @ membership[:, b] / (na * nb)
        np.testing.assert_allclose(cos, oracle, atol=1e-12)

        pairs = [PrefixPair((p,), t) for p in range(2, 7) for t in range(2, 7) if p != t]
        mine = item_knn_baseline(train, pairs, vocab, k=3, keep_ranks=True)
        oracle_ranks = [_oracle_rank(oracle[p.prefix[-1]], p.target, vocab) for p in pairs]
        assert [r for _, r in mine.per_instance_ranks] == oracle_ranks

    def test_sum_mode_adds_similarities_over_the_prefix(self):
        vocab = _vocab(4)
        train = [Session("a", [2, 4], 0)] * 3 + [Session("b", [3, 5], 0)] * 3
        cos = item_cosine_matrix(train, vocab)
        pair = [PrefixPair((2, 3), 5)]
        summed = item_knn_baseline(train, pair, vocab, k=3, mode="sum", keep_ranks=True)
        expected = _oracle_rank(cos[2] + cos[3], 5, vocab)
        assert summed.per_instance_ranks[0][1] == expected == 2  # tie with item 4
        last = item_knn_baseline(train, pair, vocab, k=1, mode="last")
        assert last.hit_rate == 1.0  # cos[3] alone puts the target first
        with pytest.raises(ConfigurationError):
            item_knn_baseline(train, pair, vocab, mode="mean")
