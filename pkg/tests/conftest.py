"""Shared fixtures: the three procedural datasets, generated once per session."""

import pytest

from aquanet.synthgen import fixture_taxonomy, generate_fixture
from aquanet.taxonomy import ClassDef, ClassTaxonomy


@pytest.fixture(scope="session")
def aqua16_root(tmp_path_factory):
    return generate_fixture("aqua16", tmp_path_factory.mktemp("aqua16"))


@pytest.fixture(scope="session")
def consistency4_root(tmp_path_factory):
    return generate_fixture("consistency4", tmp_path_factory.mktemp("consistency4"))


@pytest.fixture(scope="session")
def atex_textures_root(tmp_path_factory):
    return generate_fixture("atex-textures", tmp_path_factory.mktemp("atex_textures"))


@pytest.fixture(scope="session")
def fixture_tax():
    return fixture_taxonomy()


@pytest.fixture(scope="session")
def micro_tax():
    """Smallest taxonomy a two-path model accepts: one aquatic, one not."""
    return ClassTaxonomy(classes=(
        ClassDef(0, "water", "natural", True),
        ClassDef(1, "land", "general", False),
    ))
