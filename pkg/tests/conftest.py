import pytest

from crelay import tables


@pytest.fixture(scope="session")
def amps_tables():
    """One table build shared by every test that needs lookups."""
    return tables.build_tables()
