"""Split plans: repeated sample-splitting (K=1) and repeated K-fold cross-fitting.

A plan holds M independent repetitions. With K=1 each repetition is a single
evaluation subsample of size b drawn without replacement; with K>1 it is a
random partition of [0, n) into K folds whose sizes differ by at most one
(the first n mod K folds get the extra row). Fold assembly is a Fisher-Yates
shuffle on a per-repetition Philox substream, so a plan is a pure function of
(n, M, K, b, seed), independent of platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import complement
from .errors import InvalidFoldCount, InvalidSubsampleSize
from .rng import substream


class TrainEvalPair(NamedTuple):
    """Evaluation rows s and the complementary training rows."""

    eval_rows: np.ndarray
    train_rows: np.ndarray


@dataclass(frozen=True)
class SplitPlan:
    n: int
    M: int
    K: int
    b: int
    seed: int
    repetitions: tuple[tuple[np.ndarray, ...], ...]

    @property
    def n_splits(self) -> int:
        return self.M * self.K

    def eval_sets(self):
        """Evaluation sets in (m, k) lexicographic order."""
        return [s for rep in self.repetitions for s in rep]

    def to_jsonable(self) -> dict:
        return {
            "n": self.n,
            "M": self.M,
            "K": self.K,
            "b": self.b,
            "seed": self.seed,
            "repetitions": [[s.tolist() for s in rep] for rep in self.repetitions],
        }


def generate_plan(n: int, M: int, K: int, b: int | None = None, seed: int = 0) -> SplitPlan:
    """Draw a split plan.

    Parameters
    ----------
    n : number of rows.
    M : repetitions, drawn independently (identical repetitions are legal).
    K : folds per repetition; K=1 means sample-splitting with subsample size b.
    b : evaluation-subsample size, required iff K=1 (defaults to n // K otherwise).
    seed : master seed; repetition m uses the substream (seed, m).
    """
    if M < 1:
        raise InvalidFoldCount("M must be at least 1")
    if K < 1:
        raise InvalidFoldCount("K must be at least 1")
    if K == 1:
        if b is None or not 1 <= b < n:
            raise InvalidSubsampleSize(f"K=1 requires 1 <= b < n, got b={b}, n={n}")
    else:
        if n < 2 * K:
            raise InvalidFoldCount(f"K={K} needs n >= {2 * K} rows, got {n}")
        b = n // K

    reps = []
    for m in range(M):
        perm = substream(seed, m).permutation(n)
        if K == 1:
            sets = (np.sort(perm[:b]),)
        else:
            base, extra = divmod(n, K)
            sets = []
            start = 0
            for k in range(K):
                size = base + (1 if k < extra else 0)
                sets.append(np.sort(perm[start:start + size]))
                start += size
            sets = tuple(sets)
        for s in sets:
            s.flags.writeable = False
        reps.append(tuple(sets))
    return SplitPlan(n=n, M=M, K=K, b=int(b), seed=int(seed), repetitions=tuple(reps))


def enumerate_pairs(plan: SplitPlan) -> list[tuple[int, int, TrainEvalPair]]:
    """All (m, k, train/eval pair) triples, train = complement of eval."""
    out = []
    for m, rep in enumerate(plan.repetitions):
        for k, eval_rows in enumerate(rep):
            out.append((m, k, TrainEvalPair(eval_rows, complement(eval_rows, plan.n))))
    return out
