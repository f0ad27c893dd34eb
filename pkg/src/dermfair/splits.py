"""Stratified partitioning and condition-balanced batch construction.

Splitting stratifies jointly on (tone, condition) so every subgroup is
represented in train/val/test at the global ratios. Counts inside a stratum
are apportioned by largest remainder, which keeps every partition within one
record of its exact fractional share.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from dermfair.errors import ConfigurationError
from dermfair.records import ImageRecord

DEFAULT_FRACTIONS = (0.7, 0.2, 0.1)
PARTITION_NAMES = ("train", "val", "test")
MIN_STRATUM_SIZE = 3


@dataclass
class SplitResult:
    train: list[ImageRecord]
    val: list[ImageRecord]
    test: list[ImageRecord]
    seed: object = None
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    warnings: list[str] = field(default_factory=list)

    def partitions(self) -> dict[str, list[ImageRecord]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.val), len(self.test))


def largest_remainder_counts(total: int, fractions) -> list[int]:
    """Apportion ``total`` into integer counts summing exactly to ``total``.

    Floors first, then hands out the remaining units by descending fractional
    remainder; ties go to the earlier partition (train before val before test).
    """
    exact = [total * f for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    leftover = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def _validate_fractions(fractions) -> tuple[float, ...]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigurationError(f"expected 3 split fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions) or fractions[0] <= 0:
        raise ConfigurationError(f"invalid split fractions {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {sum(fractions)}")
    return fractions


def stratified_split(
    records,
    fractions=DEFAULT_FRACTIONS,
    seed=0,
) -> SplitResult:
    """Split records into train/val/test, stratified on (tone, condition).

    Strata smaller than MIN_STRATUM_SIZE cannot populate three partitions;
    they go wholly to train and a warning is raised so the imbalance is
    visible in audit logs.
    """
    fractions = _validate_fractions(fractions)
    records = list(records)
    rng = np.random.default_rng(seed)

    strata: dict[tuple[int, str], list[ImageRecord]] = {}
    for rec in records:
        strata.setdefault((rec.tone, rec.condition.value), []).append(rec)

    parts: tuple[list[ImageRecord], ...] = ([], [], [])
    messages: list[str] = []
    for key in sorted(strata):
        members = strata[key]
        if len(members) < MIN_STRATUM_SIZE:
            msg = (
                f"stratum tone={key[0]} condition={key[1]} has only "
                f"{len(members)} record(s); assigning all to train"
            )
            _warnings.warn(msg)
            messages.append(msg)
            parts[0].extend(members)
            continue
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        counts = largest_remainder_counts(len(members), fractions)
        offset = 0
        for part, count in zip(parts, counts):
            part.extend(shuffled[offset : offset + count])
            offset += count
    return SplitResult(
        train=parts[0],
        val=parts[1],
        test=parts[2],
        seed=seed,
        fractions=fractions,
        warnings=messages,
    )


def make_split_series(
    records,
    n_splits: int = 5,
    base_seed: int = 0,
    fractions=DEFAULT_FRACTIONS,
    reuse_test_pool: bool = False,
) -> list[SplitResult]:
    """Produce the repeated-split series used for mean/std reporting.

    Default: independent stratified splits under derived seeds [base_seed, i].
    With ``reuse_test_pool`` the test partition from the first split is held
    fixed and later splits only re-divide the remaining records between train
    and val (fractions renormalized), so all series members share one test set.
    """
    if n_splits < 1:
        raise ConfigurationError("n_splits must be at least 1")
    fractions = _validate_fractions(fractions)
    splits = [stratified_split(records, fractions, seed=[base_seed, 0])]
    if not reuse_test_pool:
        for i in range(1, n_splits):
            splits.append(stratified_split(records, fractions, seed=[base_seed, i]))
        return splits

    fixed_test = list(splits[0].test)
    pool = list(splits[0].train) + list(splits[0].val)
    trainval = fractions[0] + fractions[1]
    inner = (fractions[0] / trainval, fractions[1] / trainval, 0.0)
    for i in range(1, n_splits):
        sub = stratified_split(pool, inner, seed=[base_seed, i])
        splits.append(
            SplitResult(
                train=sub.train,
                val=sub.val,
                test=fixed_test,
                seed=[base_seed, i],
                fractions=fractions,
                warnings=sub.warnings,
            )
        )
    return splits


def condition_balanced_batches(
    records,
    batch_size: int,
    seed=0,
    mode: str = "oversample",
    weights=None,
) -> list[list[int]]:
    """Build batches holding an equal quota of every condition present.

    Returns index lists into ``records``. The quota is batch_size divided by
    the number of distinct conditions and must divide evenly. Oversampling
    cycles reshuffled permutations of the smaller conditions until the largest
    is exhausted (ceil(max_count / quota) batches, every record seen at least
    once); undersampling stops when the smallest is exhausted. Optional
    per-record ``weights`` switch the within-condition draws to weighted
    sampling with replacement, which is how adaptive resampling plugs in.
    """
    records = list(records)
    if not records:
        raise ConfigurationError("cannot batch an empty record list")
    conditions = sorted({r.condition for r in records}, key=lambda c: c.value)
    if batch_size % len(conditions) != 0:
        raise ConfigurationError(
            f"batch size {batch_size} is not divisible by the "
            f"{len(conditions)} conditions present"
        )
    quota = batch_size // len(conditions)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    by_condition = {c: [] for c in conditions}
    for idx, rec in enumerate(records):
        by_condition[rec.condition].append(idx)
    counts = {c: len(ids) for c, ids in by_condition.items()}

    if mode == "oversample":
        n_batches = math.ceil(max(counts.values()) / quota)
    elif mode == "undersample":
        n_batches = min(counts.values()) // quota
        if n_batches == 0:
            raise ConfigurationError(
                f"quota {quota} exceeds the smallest condition count "
                f"{min(counts.values())}; undersampling yields no batches"
            )
    else:
        raise ConfigurationError(f"unknown batch mode {mode!r}")

    need = n_batches * quota
    streams: dict[object, np.ndarray] = {}
    for cond in conditions:
        ids = np.asarray(by_condition[cond])
        if weights is not None:
            w = np.asarray([weights[i] for i in ids], dtype=float)
            if np.any(w < 0) or w.sum() <= 0:
                raise ConfigurationError("resampling weights must be non-negative and not all zero")
            streams[cond] = rng.choice(ids, size=need, replace=True, p=w / w.sum())
        else:
            chunks = []
            while sum(len(c) for c in chunks) < need:
                chunks.append(rng.permutation(ids))
            streams[cond] = np.concatenate(chunks)[:need]

    batches: list[list[int]] = []
    for b in range(n_batches):
        merged = np.concatenate(
            [streams[c][b * quota : (b + 1) * quota] for c in conditions]
        )
        batches.append([int(i) for i in merged[rng.permutation(len(merged))]])
    return batches


def split_to_frame(split: SplitResult) -> pd.DataFrame:
    rows = []
    for name, members in split.partitions().items():
        for rec in members:
            rows.append(
                {
                    "image_id": rec.image_id,
                    "partition": name,
                    "condition": rec.condition.value,
                    "tone": rec.tone,
                    "source": rec.source.value,
                }
            )
    return pd.DataFrame(rows, columns=["image_id", "partition", "condition", "tone", "source"])


def write_split_csv(split: SplitResult, path: str | Path) -> None:
    split_to_frame(split).to_csv(path, index=False)
