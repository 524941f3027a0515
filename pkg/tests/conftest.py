"""Fixtures for testing."""
from pathlib import Path

import pytest

from reid_robustness.datafiles import load_manifest

from tests.common import make_image, single_records, write_corpus

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def image():
    """A 64x32 textured test image."""
    return make_image(7)


@pytest.fixture
def corpus(tmp_path):
    """Five identities, one query and three gallery images each."""
    return write_corpus(tmp_path / "corpus", single_records(5))


@pytest.fixture
def manifest(corpus):
    return load_manifest(corpus)


@pytest.fixture
def fixtures_dir():
    return FIXTURES
