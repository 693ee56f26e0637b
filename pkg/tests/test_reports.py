import pytest

from src.constants import DENSITY_PROMPTS
from src.data.reports import simplify_report
from src.exceptions import DataError


@pytest.mark.parametrize("density", ["A", "B", "C", "D"])
def test_report_becomes_class_prompt(density):
    assert simplify_report(density) == DENSITY_PROMPTS[density]


def test_unknown_category_raises():
    with pytest.raises(DataError):
        simplify_report("E")


def test_custom_prompts():
    assert simplify_report("A", {"A": "fatty", "D": "dense"}) == "fatty"
    with pytest.raises(DataError):
        simplify_report("B", {"A": "fatty", "D": "dense"})
