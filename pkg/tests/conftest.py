import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bidshade.auction_sim import generate_dataset, logging_policy, make_landscape
from bidshade.mebs import MebsConfig, train_mebs

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def land():
    return make_landscape("trainable", seed=0)


@pytest.fixture(scope="session")
def small_ds(land):
    return generate_dataset(land, logging_policy(land), 40_000, seed=11)


@pytest.fixture(scope="session")
def small_bundle(small_ds, land):
    return train_mebs(small_ds, MebsConfig(seed=11), land.fingerprint())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(features, *, shaded_bid, wp, unshaded_bid=None, upstream_pctr=None, clicked=None,
                 slot_won=None, cost=None, vocab=None, seed=0):
    """Columnar dataset from hand-built columns (schema of the default landscape)."""
    from bidshade.auction_sim import FIELD_NAMES
    from bidshade.auction_sim.dataset import Dataset, DatasetMeta

    n = len(shaded_bid)
    features = np.asarray(features, dtype=np.int64)
    shaded = np.asarray(shaded_bid, dtype=np.float64)
    wp = np.asarray(wp, dtype=np.float64)
    U = shaded.copy() if unshaded_bid is None else np.asarray(unshaded_bid, dtype=np.float64)
    won = shaded >= wp
    clicked = np.zeros(n, bool) if clicked is None else np.asarray(clicked, bool) & won
    slot = np.where(won, 1, 0) if slot_won is None else np.where(won, slot_won, 0)
    cost = np.where(won, 0.8 * shaded, np.nan) if cost is None else np.where(won, cost, np.nan)
    vocab = vocab or tuple(int(features[:, j].max()) + 1 for j in range(features.shape[1]))
    ds = Dataset(
        auction_id=np.arange(n), features=features, value=U.copy(), mu0=np.ones(n), unshaded_bid=U,
        shaded_bid=shaded, upstream_pctr=np.full(n, 0.1) if upstream_pctr is None else np.asarray(upstream_pctr),
        won=won, slot_won=slot.astype(np.int64), cost=cost, wp=wp,
        original_slot=np.where(U >= wp, 1, 0).astype(np.int64), clicked=clicked, meta=None,
        field_names=FIELD_NAMES,
    )
    ds.meta = DatasetMeta(n, int(ds.winnable.sum()), int(won.sum()), int(clicked.sum()), seed,
                          field_names=FIELD_NAMES, vocab=tuple(vocab))
    return ds


def random_features(n, rng, vocab=(4, 2, 6, 3, 3, 2)):
    return np.stack([rng.integers(0, v, n) for v in vocab], axis=1)


# -- acceptance reporting -------------------------------------------------------------

ACCEPTANCE = {}


def record(number, name, ok, detail):
    """Store one acceptance line and fail the calling test if ``ok`` is false."""
    ACCEPTANCE[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    assert ok, ACCEPTANCE[number]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
