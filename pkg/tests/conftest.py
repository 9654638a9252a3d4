import numpy as np
import pytest

from hotelrank import schema


@pytest.fixture(scope="session")
def std_dataset():
    """The standard learning fixture: 2000 queries x 25 impressions, seed 1."""
    return schema.generate_synthetic(schema.SynthConfig(2000, 25, 20, seed=1))


@pytest.fixture(scope="session")
def std_split(std_dataset):
    return schema.split_validation(std_dataset)


@pytest.fixture(scope="session")
def small_dataset():
    """Quick fixture for plumbing tests."""
    return schema.generate_synthetic(schema.SynthConfig(200, 10, 6, seed=3))


def make_dataset(rows):
    """Build a labeled Dataset from (srch_id, prop_id, country, raw, click, book).

    Shared shorthand for hand-constructed cases.
    """
    groups = {}
    positions = {}
    for srch_id, prop_id, country, raw, click, book in rows:
        positions[srch_id] = positions.get(srch_id, 0) + 1
        imp = schema.SearchImpression(
            srch_id=srch_id,
            prop_id=prop_id,
            prop_country_id=country,
            position=positions[srch_id],
            raw=dict(raw),
            click_bool=click,
            booking_bool=book,
        )
        groups.setdefault(srch_id, []).append(imp)
    columns = sorted({c for _, _, _, raw, _, _ in rows for c in raw})
    return schema.Dataset(
        [schema.QueryGroup(s, imps) for s, imps in groups.items()],
        [c for c in schema.RAW_COLUMNS if c in columns],
        labeled=True,
    )
