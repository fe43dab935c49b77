import pytest

from properties import PROPERTIES


@pytest.mark.parametrize("name", list(PROPERTIES))
def test_property(name):
    PROPERTIES[name]()
