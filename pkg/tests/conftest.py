import pytest

from support import Authority


@pytest.fixture
def authority():
    return Authority.create()
