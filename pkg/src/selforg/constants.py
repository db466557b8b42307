"""Physical constants, read once from the versioned table shipped with the package."""

import json
from importlib import resources

_TABLE = json.loads(resources.files("selforg").joinpath("data/constants.json").read_text())

TABLE_VERSION: str = _TABLE["version"]
HBAR: float = _TABLE["hbar"]
K_B: float = _TABLE["k_B"]
M_RB87: float = _TABLE["rb87_mass_u"] * _TABLE["atomic_mass_unit"]

TWO_PI = 2.0 * 3.141592653589793
MHZ = TWO_PI * 1e6  # angular frequency of 1 MHz
KHZ = TWO_PI * 1e3
US = 1e-6
UK = 1e-6
NM = 1e-9
