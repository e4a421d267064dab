"""Turn sessions into model-ready examples under three objectives.

SMM: every session of length n yields n windows. The base window keeps
the last max_len items and masks the final token; every other window is
built from a shrinking prefix, keeps the prefix's last max_len items,
and masks the K-th token from the window's end (the first token when
the window is shorter than K). With K=2 each session token ends up
masked exactly once.

MLM: one example per session per epoch; the session is truncated to its
last max_len items and each position is masked independently with a
fixed probability (one random position is forced if none is selected).

CLM: one example per session; every non-pad position is supervised with
its right neighbor.

Examples are left-padded so the masked/readout slot always sits nearest
the sequence end, keeping recency aligned across batch rows.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import MASK, PAD, PrefixPair, Session
from .errors import ConfigurationError, DataError

SMM = "smm"
MLM = "mlm"
CLM = "clm"

_MLM_STREAM = 0x6D6C6D  # rng stream tag, keeps mask draws distinct from shuffling


@dataclass
class MaskingStrategy:
    kind: str = SMM
    mask_k: int = 2
    mlm_ratio: float = 0.15
    max_len: int = 30

    def __post_init__(self):
        if self.kind not in (SMM, MLM, CLM):
            raise ConfigurationError(f"unknown masking strategy {self.kind!r}")
        if self.mask_k < 1:
            raise ConfigurationError(f"mask_k must be >= 1, got {self.mask_k}")
        if not 0.0 < self.mlm_ratio < 1.0:
            raise ConfigurationError(f"mlm_ratio must be in (0,1), got {self.mlm_ratio}")
        if self.max_len < 2:
            raise ConfigurationError(f"max_len must be >= 2, got {self.max_len}")


@dataclass
class TrainingExample:
    input_ids: list  # length max_len, PAD only as a left prefix
    attention_flags: list  # False exactly on PAD positions
    mask_position: Optional[int]  # set when exactly one position is masked
    targets: list  # per-position target ids, PAD(0) = ignore
    origin: tuple  # (session_id, step)
    masked_source_indices: list = field(default_factory=list)  # original session positions

    @property
    def target(self) -> int:
        """Single target item for one-mask examples."""
        assert self.mask_position is not None
        return self.targets[self.mask_position]

    @property
    def readout_position(self) -> int:
        """Slot whose logits are ranked at inference time."""
        return self.mask_position if self.mask_position is not None else len(self.input_ids) - 1

    def window_tokens(self) -> list:
        """Visible (non-pad) tokens, i.e. the unpadded window."""
        return [t for t, f in zip(self.input_ids, self.attention_flags) if f]


@dataclass
class MaskHistogram:
    counts: dict  # distance-from-sequence-end (0 = last token) -> times masked
    per_length_totals: dict  # session length -> masked tokens generated
    min_coverage: dict  # session_id -> min times any of its tokens was masked

    @property
    def total_masked(self) -> int:
        return sum(self.counts.values())


def _pack(window: Sequence[int], max_len: int) -> tuple[list, list, int]:
    """Left-pad a window to max_len; returns (input_ids, flags, pad_len)."""
    pad_len = max_len - len(window)
    input_ids = [PAD] * pad_len + list(window)
    flags = [False] * pad_len + [True] * len(window)
    return input_ids, flags, pad_len


def smm_examples(
    session: Sequence[int], max_len: int, mask_k: int = 2, session_id: str = "?"
) -> list[TrainingExample]:
    """Generate the n masked windows for a length-n session.

    Emission order: base window (last token masked) first, then prefix
    windows from the longest prefix down to the length-2 prefix.
    """
    n = len(session)
    if n < 2:
        raise DataError(f"session {session_id!r} has length {n}; need >= 2")

    out = []

    def emit(window, masked_pos, source_index, step):
        input_ids, flags, pad_len = _pack(window, max_len)
        pos = pad_len + masked_pos
        target = input_ids[pos]
        input_ids[pos] = MASK
        targets = [PAD] * max_len
        targets[pos] = target
        out.append(
            TrainingExample(input_ids, flags, pos, targets, (session_id, step), [source_index])
        )

    window = list(session[-max_len:])
    emit(window, len(window) - 1, n - 1, 0)

    step = 1
    for k in range(n, 1, -1):
        window = list(session[max(0, k - max_len):k])
        w = len(window)
        masked_pos = w - mask_k if w >= mask_k else 0
        emit(window, masked_pos, k - w + masked_pos, step)
        step += 1
    return out


def _mlm_single(
    window: Sequence[int],
    max_len: int,
    ratio: float,
    rng: np.random.Generator,
    session_id: str,
    step: int,
    source_offset: int,
) -> TrainingExample:
    w = len(window)
    selected = np.flatnonzero(rng.random(w) < ratio)
    if selected.size == 0:
        selected = np.array([rng.integers(0, w)])
    input_ids, flags, pad_len = _pack(window, max_len)
    targets = [PAD] * max_len
    for p in selected:
        pos = pad_len + int(p)
        targets[pos] = input_ids[pos]
        input_ids[pos] = MASK
    mask_position = pad_len + int(selected[0]) if selected.size == 1 else None
    return TrainingExample(
        input_ids,
        flags,
        mask_position,
        targets,
        (session_id, step),
        [source_offset + int(p) for p in selected],
    )


def mlm_examples(
    session: Sequence[int],
    max_len: int,
    ratio: float = 0.15,
    rng_seed: int | Sequence[int] = 0,
    session_id: str = "?",
) -> list[TrainingExample]:
    """One randomly masked example for the session's last max_len items.

    Determinism: the rng draws one uniform per window position first and
    only then, if nothing was selected, one forced position index.
    """
    n = len(session)
    if n < 2:
        raise DataError(f"session {session_id!r} has length {n}; need >= 2")
    rng = np.random.default_rng(rng_seed)
    window = list(session[-max_len:])
    return [_mlm_single(window, max_len, ratio, rng, session_id, 0, n - len(window))]


def mlm_windowed_examples(
    session: Sequence[int],
    max_len: int,
    stride: int,
    ratio: float = 0.15,
    rng_seed: int | Sequence[int] = 0,
    session_id: str = "?",
) -> list[TrainingExample]:
    """Random masking over overlapping fixed windows of a long session.

    Used by the coverage analytics to measure how overlapping windows
    bias random masking toward interior tokens; masked_source_indices
    refer to positions in the original (unsliced) session.
    """
    n = len(session)
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    offsets = list(range(0, max(n - max_len, 0) + 1, stride))
    if offsets[-1] != max(n - max_len, 0):
        offsets.append(n - max_len)
    out = []
    for step, off in enumerate(offsets):
        window = list(session[off:off + max_len])
        rng = np.random.default_rng(list(np.atleast_1d(rng_seed)) + [step])
        out.append(_mlm_single(window, max_len, ratio, rng, session_id, step, off))
    return out


def clm_example(session: Sequence[int], max_len: int, session_id: str = "?") -> TrainingExample:
    """Next-token supervision over the session's last max_len items."""
    n = len(session)
    if n < 2:
        raise DataError(f"session {session_id!r} has length {n}; need >= 2")
    window = list(session[-max_len:])
    input_ids, flags, pad_len = _pack(window, max_len)
    targets = [PAD] * max_len
    for p in range(pad_len, max_len - 1):
        targets[p] = input_ids[p + 1]
    return TrainingExample(input_ids, flags, None, targets, (session_id, 0), [])


def eval_example(pair: PrefixPair, max_len: int, strategy: MaskingStrategy,
                 origin: tuple = ("eval", 0)) -> TrainingExample:
    """Inference-side example: rank the target at the readout slot.

    SMM/MLM append a MASK after the last (max_len-1) prefix items; CLM
    keeps the last max_len prefix items and reads the final position.
    """
    if len(pair.prefix) < 1:
        raise DataError("prefix must contain at least one item")
    targets = [PAD] * max_len
    if strategy.kind == CLM:
        window = list(pair.prefix[-max_len:])
        input_ids, flags, _ = _pack(window, max_len)
        targets[max_len - 1] = pair.target
        return TrainingExample(input_ids, flags, None, targets, origin, [])
    window = list(pair.prefix[-(max_len - 1):]) + [MASK]
    input_ids, flags, _ = _pack(window, max_len)
    mask_position = max_len - 1
    targets[mask_position] = pair.target
    return TrainingExample(input_ids, flags, mask_position, targets, origin, [])


def training_examples(
    sessions: Sequence[Session], strategy: MaskingStrategy, seed: int, epoch: int
) -> list[TrainingExample]:
    """Materialize one epoch of training examples for a strategy.

    SMM and CLM sets are deterministic; MLM is remasked per epoch from
    (seed, epoch, session ordinal).
    """
    out = []
    if strategy.kind == SMM:
        for s in sessions:
            out.extend(smm_examples(s.items, strategy.max_len, strategy.mask_k, s.session_id))
    elif strategy.kind == CLM:
        for s in sessions:
            out.append(clm_example(s.items, strategy.max_len, s.session_id))
    else:
        for ordinal, s in enumerate(sessions):
            out.extend(
                mlm_examples(
                    s.items,
                    strategy.max_len,
                    strategy.mlm_ratio,
                    [_MLM_STREAM, seed, epoch, ordinal],
                    s.session_id,
                )
            )
    return out


def masking_coverage_histogram(
    examples: Sequence[TrainingExample], sessions: Sequence[Session]
) -> MaskHistogram:
    """Aggregate how often each token position (from the end) was masked."""
    by_sid = {s.session_id: s for s in sessions}
    counts: Counter = Counter()
    per_length: Counter = Counter()
    coverage = {s.session_id: np.zeros(len(s), dtype=np.int64) for s in sessions}
    for ex in examples:
        sid = ex.origin[0]
        session = by_sid.get(sid)
        if session is None:
            continue
        n = len(session)
        for idx in ex.masked_source_indices:
            counts[n - 1 - idx] += 1
            per_length[n] += 1
            coverage[sid][idx] += 1
    min_coverage = {sid: int(cov.min()) if cov.size else 0 for sid, cov in coverage.items()}
    return MaskHistogram(dict(counts), dict(per_length), min_coverage)


def example_to_json_obj(ex: TrainingExample) -> dict:
    """Wire format for the `augment` dump: unpadded window, window-relative
    mask position, single target for one-mask examples or the per-position
    target list otherwise."""
    window = ex.window_tokens()
    pad_len = len(ex.input_ids) - len(window)
    if ex.mask_position is not None:
        mask_pos = ex.mask_position - pad_len
        target = ex.targets[ex.mask_position]
    else:
        mask_pos = None
        target = ex.targets[pad_len:]
    return {
        "input": window,
        "mask_pos": mask_pos,
        "target": target,
        "origin": [ex.origin[0], ex.origin[1]],
    }
