"""Test seed derivation."""
import json

import numpy as np
import pytest

from reid_robustness.rng import (
    check_seed,
    derive_image_seed,
    derive_seed,
    make_rng,
    splitmix64,
)


def test_splitmix64_reference_vectors(fixtures_dir):
    """Outputs match the published SplitMix64 sequence for state 0."""
    golden = json.loads((fixtures_dir / "plan_golden.json").read_text())
    for case in golden["splitmix64"]:
        assert splitmix64(case["input"]) == case["output"]


def test_image_seed_formula(fixtures_dir):
    golden = json.loads((fixtures_dir / "plan_golden.json").read_text())
    for case in golden["plan_entries"]:
        seed = derive_image_seed(case["master_seed"], case["repeat_index"], case["image_id"])
        assert seed == case["image_seed"]
        assert seed == splitmix64(
            case["master_seed"] ^ (case["repeat_index"] << 32) ^ case["image_id"]
        )


def test_image_seed_wraps_repeat_shift():
    """The repeat index is shifted into the high word and truncated to 64 bits."""
    assert derive_image_seed(0, 1 << 32, 5) == derive_image_seed(0, 0, 5)


@pytest.mark.parametrize("bad", [-1, 1 << 64, 1.5, True, "3"])
def test_check_seed_rejects(bad):
    with pytest.raises((TypeError, ValueError)):
        check_seed(bad)


def test_check_seed_accepts_range_ends():
    assert check_seed(0) == 0
    assert check_seed((1 << 64) - 1) == (1 << 64) - 1
    assert check_seed(np.uint64(9)) == 9


def test_derive_seed_folds_labels():
    assert derive_seed(17) == 17
    assert derive_seed(17, 3) == splitmix64(17 ^ 3)
    assert derive_seed(17, 3, 4) == splitmix64(splitmix64(17 ^ 3) ^ 4)
    assert derive_seed(17, 3, 4) != derive_seed(17, 4, 3)


def test_make_rng_is_deterministic():
    first = make_rng(123).random(16)
    assert np.array_equal(first, make_rng(123).random(16))
    assert not np.array_equal(first, make_rng(124).random(16))


def test_make_rng_leaves_global_state_alone():
    np.random.seed(5)
    expected = np.random.random(4)
    np.random.seed(5)
    make_rng(1).random(100)
    assert np.array_equal(np.random.random(4), expected)
