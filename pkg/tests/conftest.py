from __future__ import annotations

import pytest

import corpus
from webprobe.delivery import Enrichment


@pytest.fixture
def fixtures_dir(tmp_path):
    return corpus.write_fixture_dir(tmp_path / "fixtures")


@pytest.fixture
def enrichment(fixtures_dir):
    return Enrichment.from_fixture_dir(fixtures_dir)
