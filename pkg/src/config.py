"""
Project-wide configuration constants.
"""

# Graph storage
MAX_LAYERS = 16
MIN_NODES = 2

# Probability handling
PROB_FLOOR = 1e-12  # lower clamp for probabilities entering a log
TAU_FLOOR = 1e-12
SIMPLEX_TOL = 1e-10
EMPTY_CELL_MASS = 1e-10  # block pairs with less pair mass fall back to uniform

# Default tolerances (overridable through config/fitting/*.yaml)
INDEPENDENCE_TOL = 1e-9
IDENTIFIABILITY_TOL = 1e-6
DEFAULT_ZETA = 0.01
ICL_TIE_TOL = 1e-9

# Newton-Raphson for the multinomial logit
SEPARATION_CAP = 30.0
MAX_STEP_HALVINGS = 30

# Exact enumeration guards, expressed as assignment counts Q**n
ORACLE_MAX_ASSIGNMENTS = 10**7
POSTERIOR_MAX_ASSIGNMENTS = 10**6

# Environment variable pointing at an alternative config/fitting directory
CONFIG_DIR_ENV = "MPSBM_CONFIG_DIR"
