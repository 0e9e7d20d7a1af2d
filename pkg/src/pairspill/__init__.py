"""Direct and spillover effects in paired units with instrumental variables."""

from .errors import (
    EmptyCell,
    EstimationError,
    OSNViolated,
    PairSpillError,
    ValidationError,
)
from .estimators import (
    conditional_estimands,
    estimate,
    itt,
    itt_weight_decomposition,
    late_direct,
    late_indirect,
    osn_local_averages,
    tsls_spillover,
    type_distribution,
)
from .ingest import Dataset, check_osn, load, write
from .model import (
    AssignmentDesign,
    ComplianceType,
    DGPSpec,
    JointTypeDistribution,
    OutcomeModel,
    Stratum,
    marginals,
    potential_treatment,
)
from .moments import EstimateReport, compute_moments, delta_method
from .oracle import mc_study, population_expectation, random_spec, simulate, truth, verify_identities

__version__ = "0.1.0"
