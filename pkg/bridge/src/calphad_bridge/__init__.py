"""Export CALPHAD database equilibria as phaseforge training data.

The package reads a thermodynamic database (TDB), equilibrates a
composition-temperature grid by discrete Gibbs minimization (or through
pycalphad when installed), folds the database phase names onto the fixed
nine-phase vocabulary, and writes datasets the phaseforge CLI ingests
directly. A verify path scores phaseforge prediction files against the
exported labels with independently implemented metrics.
"""

from .exporter import (
    TARGET_VOCAB,
    BridgeConfig,
    BridgeConfigError,
    BridgeExportError,
    ExportReport,
    export,
)
from .solver import build_candidates, pycalphad_available, solve_points
from .tdb import Database, TdbError, phase_energy, read_tdb
from .verify import (
    BridgeAlignmentError,
    VerifyReport,
    verify_against_predictions,
)

__version__ = "0.1.0"

__all__ = [
    "TARGET_VOCAB",
    "BridgeConfig",
    "BridgeConfigError",
    "BridgeExportError",
    "ExportReport",
    "export",
    "build_candidates",
    "pycalphad_available",
    "solve_points",
    "Database",
    "TdbError",
    "phase_energy",
    "read_tdb",
    "BridgeAlignmentError",
    "VerifyReport",
    "verify_against_predictions",
    "__version__",
]
