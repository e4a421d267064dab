"""Deterministic synthetic datasets for tests, demos, and harness runs.

Two generators:

  * cycle_dataset — items follow i -> i+1 around a fixed ring, so the
    next item is a deterministic function of the last one; a correct
    model can reach hit_rate@1 ~ 1.
  * proximity_dataset — a noisy +/-1/2 random walk on a ring, where
    item closeness matters more than exact order.
"""

from __future__ import annotations

import numpy as np

from .data import FIRST_ITEM, Session, SessionDataset, Vocabulary


def _vocab(n_items: int) -> Vocabulary:
    item_to_index = {f"i{p}": FIRST_ITEM + p for p in range(n_items)}
    return Vocabulary(item_to_index, {v: k for k, v in item_to_index.items()}, n_items)


def cycle_dataset(
    n_train: int = 500,
    n_test: int = 60,
    period: int = 10,
    min_len: int = 4,
    max_len: int = 9,
    seed: int = 7,
) -> SessionDataset:
    rng = np.random.default_rng(seed)

    def make(sid: str) -> Session:
        start = int(rng.integers(0, period))
        length = int(rng.integers(min_len, max_len + 1))
        items = [FIRST_ITEM + (start + j) % period for j in range(length)]
        return Session(sid, items, 0)

    train = [make(f"tr{i}") for i in range(n_train)]
    test = [make(f"te{i}") for i in range(n_test)]
    return SessionDataset(train, test, _vocab(period))


def proximity_dataset(
    n_train: int = 400,
    n_test: int = 80,
    n_items: int = 30,
    noise: float = 0.1,
    min_len: int = 4,
    max_len: int = 12,
    seed: int = 11,
) -> SessionDataset:
    rng = np.random.default_rng(seed)
    steps = np.array([-2, -1, 1, 2])

    def make(sid: str) -> Session:
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(0, n_items))
        items = [FIRST_ITEM + cur]
        for _ in range(length - 1):
            if rng.random() < noise:
                cur = int(rng.integers(0, n_items))
            else:
                cur = (cur + int(rng.choice(steps))) % n_items
            items.append(FIRST_ITEM + cur)
        return Session(sid, items, 0)

    train = [make(f"tr{i}") for i in range(n_train)]
    test = [make(f"te{i}") for i in range(n_test)]
    return SessionDataset(train, test, _vocab(n_items))


def cascade_event_log() -> str:
    """Interaction log whose filtering only converges on the second pass.

    Hand-traced fixed point: item D occurs once, so pass 1 removes it
    and drops session t5 to length one; that lowers item C to four
    train occurrences, so pass 2 removes C and drops t6/t7/t8. Items
    A and B each keep exactly five train occurrences. Test session e1
    loses test-only item X, e2 loses C; both survive at length 2.

    Expected result with test_fraction 0.2 (last two of ten sessions):
      train  t1=[A,B,A] t2=[B,A,B] t3=[A,B] t4=[B,A]
      test   e1=[A,B]   e2=[B,A]
      items  A -> 2, B -> 3 (tie on frequency 5, ascending raw id)
    """
    rows = [
        ("t1", "A", 1000), ("t1", "B", 1001), ("t1", "A", 1002),
        ("t2", "B", 2000), ("t2", "A", 2001), ("t2", "B", 2002),
        ("t3", "A", 3000), ("t3", "B", 3001),
        ("t4", "B", 4000), ("t4", "A", 4001),
        ("t5", "C", 5000), ("t5", "D", 5001),
        ("t6", "C", 6000), ("t6", "A", 6001),
        ("t7", "C", 7000), ("t7", "B", 7001), ("t7", "C", 7002),
        ("t8", "C", 8000), ("t8", "A", 8001),
        ("e1", "A", 9000), ("e1", "X", 9001), ("e1", "B", 9002),
        ("e2", "B", 10000), ("e2", "A", 10001), ("e2", "C", 10002),
    ]
    lines = ["session_id,item_id,timestamp"]
    lines += [f"{sid},{item},{ts}" for sid, item, ts in rows]
    return "\n".join(lines) + "\n"
