"""
Report simplification: a density category becomes its class prompt.
"""

from typing import Mapping, Optional

from src.constants import DENSITY_PROMPTS
from src.utils.validators import InputValidator


def simplify_report(density: str, prompts: Optional[Mapping[str, str]] = None) -> str:
    """
    Reduce a report to the description of its density category.

    Args:
        density: Category letter A-D
        prompts: Alternative category -> prompt mapping

    Returns:
        Prompt string for the category

    Raises:
        DataError: Unknown category
    """
    prompts = DENSITY_PROMPTS if prompts is None else prompts
    InputValidator.density_class(density, tuple(prompts))
    return prompts[density]
