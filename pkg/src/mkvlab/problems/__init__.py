from .config import ConfigError, problem_from_json
from .spec import (Box, Dirac, Explicit, Gaussian, InitialDraw, InitialLaw, LawHistory, PathAtoms, PathHistory,
                   ProblemSpec, Uniform, box, from_measure, from_path_atoms)
from .updating import UpdatingFunction, apply_updating, increment_consistency_defect
from .validators import estimate_lipschitz, validate_growth, validate_nonanticipativity

__all__ = [
    "Box", "ConfigError", "Dirac", "Explicit", "Gaussian", "InitialDraw", "InitialLaw", "LawHistory", "PathAtoms",
    "PathHistory", "ProblemSpec", "Uniform", "UpdatingFunction", "apply_updating", "box", "estimate_lipschitz",
    "from_measure", "from_path_atoms", "increment_consistency_defect", "problem_from_json", "validate_growth",
    "validate_nonanticipativity",
]
