"""Phase-set prediction over alloy composition-temperature space.

The package couples a from-scratch graph-attention classifier with a
discrete convex-hull Gibbs minimizer that generates admissible training
labels and independently verifies every prediction pipeline stage.
"""

from importlib import resources as _resources
from pathlib import Path as _Path

__version__ = "0.1.0"


def builtin_model_path(name: str = "default9.toy") -> _Path:
    """Path of a data file shipped inside the package (models, properties)."""
    return _Path(str(_resources.files("phaseforge").joinpath("models", name)))
