from pathlib import Path

import pytest

import calphad_bridge
from calphad_bridge.tdb import read_tdb

TOY_TDB = Path(calphad_bridge.__file__).parent / "data" / "toy.tdb"


@pytest.fixture(scope="session")
def toy_path() -> Path:
    return TOY_TDB


@pytest.fixture(scope="session")
def toy_db():
    return read_tdb(TOY_TDB)
