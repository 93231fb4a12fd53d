"""Stealth-injection attacks on DC state estimation and the meter-protection game."""

from importlib import resources

__version__ = "0.1.0"


def fixture_path(name):
    """Filesystem path of a packaged fixture (case files, payoff tables)."""
    return resources.files(__name__).joinpath("fixtures", name)
