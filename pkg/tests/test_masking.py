"""Masking strategy tests: window generation, randomized masking,
next-token supervision, and coverage analytics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smmrec.data import MASK, PAD, PrefixPair, Session
from smmrec.errors import ConfigurationError, DataError
from smmrec.masking import (
    MaskingStrategy,
    clm_example,
    eval_example,
    example_to_json_obj,
    masking_coverage_histogram,
    mlm_examples,
    mlm_windowed_examples,
    smm_examples,
    training_examples,
)

REFERENCE_SESSION = [5, 6, 8, 4, 98, 56, 54, 74, 23, 56, 57]

# The eleven windows this session must produce at max_len=5, K=2:
# (visible tokens with MASK as 1, window-relative mask slot, target).
REFERENCE_WINDOWS = [
    ([54, 74, 23, 56, 1], 4, 57),
    ([54, 74, 23, 1, 57], 3, 56),
    ([56, 54, 74, 1, 56], 3, 23),
    ([98, 56, 54, 1, 23], 3, 74),
    ([4, 98, 56, 1, 74], 3, 54),
    ([8, 4, 98, 1, 54], 3, 56),
    ([6, 8, 4, 1, 56], 3, 98),
    ([5, 6, 8, 1, 98], 3, 4),
    ([5, 6, 1, 4], 2, 8),
    ([5, 1, 8], 1, 6),
    ([1, 6], 0, 5),
]


def _oracle_smm(session, max_len, k_from_end):
    """Independent re-derivation of the window/mask rule: enumerate
    prefixes, keep each prefix's last max_len items, mask the token
    k_from_end from the window's end (first token when shorter)."""
    windows = []
    base = list(session[-max_len:])
    windows.append((base, len(base) - 1, session[-1]))
    for k in range(len(session), 1, -1):
        win = list(session[:k][-max_len:])
        pos = len(win) - k_from_end if len(win) >= k_from_end else 0
        windows.append((win, pos, win[pos]))
    out = []
    for win, pos, target in windows:
        masked = list(win)
        masked[pos] = MASK
        out.append((masked, pos, target))
    return out


class TestSmm:
    def test_reference_session_windows(self):
        examples = smm_examples(REFERENCE_SESSION, max_len=5, mask_k=2)
        got = [
            (obj["input"], obj["mask_pos"], obj["target"])
            for obj in map(example_to_json_obj, examples)
        ]
        assert got == REFERENCE_WINDOWS

    def test_minimum_session(self):
        got = [
            (obj["input"], obj["target"])
            for obj in map(example_to_json_obj, smm_examples([8, 9], max_len=5))
        ]
        assert got == [([8, 1], 9), ([1, 9], 8)]

    def test_k3_matches_enumeration_oracle(self):
        session = list(range(10, 17))
        examples = smm_examples(session, max_len=30, mask_k=3)
        assert len(examples) == 7
        got = [
            (obj["input"], obj["mask_pos"], obj["target"])
            for obj in map(example_to_json_obj, examples)
        ]
        assert got == _oracle_smm(session, 30, 3)

    def test_too_short_session(self):
        with pytest.raises(DataError):
            smm_examples([4], max_len=5)

    @given(st.integers(2, 60), st.integers(0, 5000))
    @settings(max_examples=120, deadline=None)
    def test_k2_masks_every_token_exactly_once(self, n, seed):
        rng = np.random.default_rng(seed)
        session = [int(x) for x in rng.integers(2, 500, size=n)]
        examples = smm_examples(session, max_len=30, mask_k=2)
        assert len(examples) == n
        masked = sorted(i for ex in examples for i in ex.masked_source_indices)
        assert masked == list(range(n))

    def test_window_content_invariant_to_max_len(self):
        """Windows are suffixes of prefixes, so a larger max_len only
        extends windows on the left."""
        session = list(range(2, 14))
        small = smm_examples(session, max_len=4)
        large = smm_examples(session, max_len=9)
        for a, b in zip(small, large):
            wa, wb = a.window_tokens(), b.window_tokens()
            assert wb[-len(wa):] == wa

    def test_structural_invariants(self):
        for ex in smm_examples(REFERENCE_SESSION, max_len=5):
            assert ex.input_ids[ex.mask_position] == MASK
            assert ex.target >= 2
            flags = ex.attention_flags
            pad_len = flags.index(True)
            assert all(not f for f in flags[:pad_len]) and all(flags[pad_len:])
            assert all(t == PAD for t in ex.input_ids[:pad_len])


class TestMlm:
    def test_fixed_seed_is_deterministic(self):
        a = mlm_examples(list(range(2, 12)), 8, 0.15, rng_seed=9)[0]
        b = mlm_examples(list(range(2, 12)), 8, 0.15, rng_seed=9)[0]
        assert a.input_ids == b.input_ids and a.targets == b.targets

    def test_vanishing_ratio_forces_one_mask(self):
        ex = mlm_examples(list(range(2, 12)), 10, 1e-12, rng_seed=3)[0]
        assert sum(1 for t in ex.input_ids if t == MASK) == 1
        assert ex.mask_position is not None

    def test_masked_count_matches_monte_carlo_oracle(self):
        """Mean masked count for length 10 at ratio 0.15 with forcing.

        Closed form E[max(Binomial(10, 0.15), 1)] = 1.5 + 0.85^10
        ~ 1.6969, cross-checked by an independent Monte-Carlo draw.
        """
        n, ratio, trials = 10, 0.15, 10_000
        exact = n * ratio + (1 - ratio) ** n
        rng = np.random.default_rng(123)
        oracle = np.maximum((rng.random((trials, n)) < ratio).sum(axis=1), 1).mean()
        assert abs(oracle - exact) < 0.05

        session = list(range(2, 2 + n))
        counts = [
            sum(1 for t in mlm_examples(session, n, ratio, rng_seed=seed)[0].input_ids if t == MASK)
            for seed in range(trials)
        ]
        assert abs(np.mean(counts) - exact) < 0.05

    def test_masks_only_real_positions(self):
        ex = mlm_examples(list(range(2, 8)), 10, 0.5, rng_seed=1)[0]
        pad_len = ex.attention_flags.index(True)
        assert all(t != MASK for t in ex.input_ids[:pad_len])
        for pos, t in enumerate(ex.targets):
            if t:
                assert ex.input_ids[pos] == MASK and t >= 2


class TestClm:
    def test_targets_shift_left_by_one(self):
        ex = clm_example([7, 8, 9], max_len=5)
        assert ex.input_ids == [PAD, PAD, 7, 8, 9]
        assert ex.targets == [PAD, PAD, 8, 9, PAD]
        assert ex.mask_position is None

    def test_minimum_session_has_one_supervised_position(self):
        ex = clm_example([7, 8], max_len=5)
        assert sum(1 for t in ex.targets if t) == 1

    def test_supervised_count_oracle(self):
        for n, max_len in ((40, 30), (3, 30), (30, 30), (12, 8)):
            ex = clm_example(list(range(2, 2 + n)), max_len)
            assert sum(1 for t in ex.targets if t) == min(n, max_len) - 1


class TestEvalExample:
    def test_masked_readout_at_last_slot(self):
        strat = MaskingStrategy(kind="smm", max_len=5)
        ex = eval_example(PrefixPair((7, 8, 9), 11), 5, strat)
        assert ex.input_ids == [PAD, 7, 8, 9, MASK]
        assert ex.mask_position == 4 and ex.targets[4] == 11

    def test_long_prefix_keeps_last_items_before_mask(self):
        strat = MaskingStrategy(kind="smm", max_len=30)
        prefix = tuple(range(2, 42))
        ex = eval_example(PrefixPair(prefix, 50), 30, strat)
        assert ex.window_tokens() == list(prefix[-29:]) + [MASK]

    def test_clm_readout(self):
        strat = MaskingStrategy(kind="clm", max_len=5)
        ex = eval_example(PrefixPair((7,), 9), 5, strat)
        assert ex.readout_position == 4
        assert ex.input_ids[-1] == 7 and ex.targets[4] == 9


class TestCoverageHistogram:
    def test_smm_short_sessions_cover_every_token_once(self):
        sessions = [Session(f"s{i}", list(range(2, 2 + n)), i) for i, n in enumerate((2, 5, 9))]
        examples = training_examples(sessions, MaskingStrategy(kind="smm", max_len=30), 0, 0)
        hist = masking_coverage_histogram(examples, sessions)
        assert all(v == 1 for v in hist.min_coverage.values())
        assert hist.total_masked == sum(len(s) for s in sessions)

    def test_reference_session_total(self):
        sessions = [Session("fig", REFERENCE_SESSION, 0)]
        examples = smm_examples(REFERENCE_SESSION, 5, 2, "fig")
        hist = masking_coverage_histogram(examples, sessions)
        assert hist.total_masked == 11
        assert hist.min_coverage["fig"] == 1

    def test_overlapping_window_mlm_biases_interior(self):
        """Random masking over overlapping windows hits interior tokens
        more often than boundary tokens (Monte Carlo, 1,000 seeds)."""
        n, max_len, stride = 90, 30, 10
        session = Session("long", list(range(2, 2 + n)), 0)
        coverage = np.zeros(n)
        for seed in range(1000):
            for ex in mlm_windowed_examples(session.items, max_len, stride, 0.15, seed, "long"):
                for idx in ex.masked_source_indices:
                    coverage[idx] += 1
        interior = coverage[max_len: n - max_len].mean()
        boundary = (coverage[:5].mean() + coverage[-5:].mean()) / 2
        assert interior > 1.5 * boundary


def test_training_examples_counts_per_strategy():
    sessions = [Session(f"s{i}", list(range(2, 2 + n)), i) for i, n in enumerate((3, 4, 6))]
    smm = training_examples(sessions, MaskingStrategy(kind="smm"), 1, 0)
    clm = training_examples(sessions, MaskingStrategy(kind="clm"), 1, 0)
    mlm = training_examples(sessions, MaskingStrategy(kind="mlm"), 1, 0)
    assert len(smm) == 3 + 4 + 6
    assert len(clm) == 3 and len(mlm) == 3


def test_mlm_remasks_per_epoch():
    sessions = [Session("s", list(range(2, 22)), 0)]
    strat = MaskingStrategy(kind="mlm")
    e0 = training_examples(sessions, strat, seed=5, epoch=0)[0]
    e1 = training_examples(sessions, strat, seed=5, epoch=1)[0]
    e0_again = training_examples(sessions, strat, seed=5, epoch=0)[0]
    assert e0.input_ids == e0_again.input_ids
    assert e0.input_ids != e1.input_ids


def test_strategy_validation():
    with pytest.raises(ConfigurationError):
        MaskingStrategy(kind="span")
    with pytest.raises(ConfigurationError):
        MaskingStrategy(mask_k=0)
    with pytest.raises(ConfigurationError):
        MaskingStrategy(mlm_ratio=1.0)
