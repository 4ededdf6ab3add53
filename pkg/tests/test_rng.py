"""Seed derivation and the sampling helpers over the PRNG stream."""

import hashlib

import pytest

from datchain.rng import Rng, derive_seed


def test_derive_seed_is_sha256_prefix():
    expected = int.from_bytes(
        hashlib.sha256((7).to_bytes(8, "big") + b"label").digest()[:8], "big"
    )
    assert derive_seed(7, "label") == expected


def test_derive_seed_label_separation():
    seeds = {derive_seed(1, label) for label in ("a", "b", "c", "net", "txgen")}
    assert len(seeds) == 5
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert derive_seed(1, "a") == derive_seed(1, "a")


def test_randint_inclusive_bounds():
    rng = Rng(3)
    draws = [rng.randint(5, 8) for _ in range(400)]
    assert set(draws) == {5, 6, 7, 8}
    assert Rng(0).randint(9, 9) == 9
    with pytest.raises(ValueError):
        rng.randint(2, 1)


def test_choice_and_empty():
    rng = Rng(4)
    items = ["a", "b", "c"]
    assert all(rng.choice(items) in items for _ in range(50))
    with pytest.raises(ValueError):
        rng.choice([])


def test_sample_distinct_subset():
    rng = Rng(5)
    population = list(range(30))
    for _ in range(100):
        got = rng.sample(population, 10)
        assert len(got) == len(set(got)) == 10
        assert set(got) <= set(population)
    assert sorted(rng.sample(population, 30)) == population
    with pytest.raises(ValueError):
        rng.sample(population, 31)


def test_sample_uniformity():
    # Each of 5 items should appear in a size-2 sample ~40% of the time.
    rng = Rng(6)
    counts = dict.fromkeys(range(5), 0)
    trials = 5000
    for _ in range(trials):
        for item in rng.sample(range(5), 2):
            counts[item] += 1
    for item, count in counts.items():
        assert abs(count / trials - 0.4) < 0.03, (item, count)


def test_shuffle_is_permutation_and_seeded():
    items = list(range(20))
    a, b = items[:], items[:]
    Rng(11).shuffle(a)
    Rng(11).shuffle(b)
    assert a == b
    assert sorted(a) == items
    c = items[:]
    Rng(12).shuffle(c)
    assert c != a  # different seed, different order (20! space)


def test_bytes_length_and_determinism():
    assert len(Rng(8).bytes(13)) == 13
    assert Rng(8).bytes(64) == Rng(8).bytes(64)
    assert Rng(8).bytes(0) == b""


def test_bernoulli_extremes():
    rng = Rng(9)
    assert not any(rng.bernoulli(0.0) for _ in range(100))
    assert all(rng.bernoulli(1.0) for _ in range(100))
    rng = Rng(10)
    hits = sum(rng.bernoulli(0.3) for _ in range(10000))
    assert abs(hits / 10000 - 0.3) < 0.02
