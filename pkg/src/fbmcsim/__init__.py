"""Flow-based market coupling simulation with chance-constrained reliability margins."""
from importlib.resources import files

__version__ = "0.1.0"


def fixture_path():
    """Directory of the bundled three-zone example dataset."""
    return files(__name__) / "data" / "three_zone"
