from pathlib import Path

import numpy as np
import pytest

from dermfair.records import Condition, DataSource, ImageRecord


def make_record(i, condition=Condition.MALIGNANT, tone=1, source=DataSource.FITZPATRICK17K):
    name = f"img{i:05d}" if isinstance(i, int) else str(i)
    return ImageRecord(
        image_id=name,
        image_path=Path(f"/data/{name}.jpg"),
        raw_diagnosis=condition.value,
        condition=condition,
        tone=tone,
        source=source,
    )


def random_record_set(rng: np.random.Generator, n: int, conditions=None, tones=(1, 2, 3, 4, 5, 6)):
    """n records with conditions/tones drawn uniformly — shared by the
    split/batch property tests."""
    conditions = conditions or [Condition.MALIGNANT, Condition.BENIGN]
    return [
        make_record(
            i,
            condition=conditions[int(rng.integers(len(conditions)))],
            tone=int(tones[int(rng.integers(len(tones)))]),
        )
        for i in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
