"""Blind photonic gate simulator for networked spin-qubit servers.

Library layout mirrors the experiment stack: qcore (dense states),
photonics (rails, cavities, interferometer readout), noise (hardware error
models), protocols (the blind gate set), analysis (tomography and leakage),
harness (batch runs and the command line front end).
"""

from . import qcore
from . import photonics
from . import noise
from . import protocols
from . import analysis
from . import harness

__all__ = ["qcore", "photonics", "noise", "protocols", "analysis", "harness"]
__version__ = "0.1.0"
