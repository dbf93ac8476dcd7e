"""qflow: spectral simulator for a constrained nonlocal fourth-order
conformal curvature flow on symmetric background manifolds."""

from .manifold import (
    Background,
    CircleProductManifold,
    CoeffTable,
    DiscreteManifold,
    EinsteinProductData,
    EINSTEIN_PRESETS,
    ManifoldError,
    MatrixManifold,
    SphereManifold,
    build_einstein_circle_product,
    build_sphere_axisym,
    integrate,
    load_matrix_manifold,
    lp_norm,
    sphere_multiplier,
    sphere_volume,
)
from .paneitz import (
    EnergyReport,
    apply_P,
    energy_report,
    f2,
    quotient_F,
    quotient_min_estimate,
    solve_P,
    velocity_potential,
)
from .flow import (
    ConeError,
    ConvergenceReport,
    CrosscheckReport,
    DivergenceError,
    FlowState,
    MonitorRecord,
    PositivityError,
    PositivityReport,
    RunParams,
    StructuralReport,
    check_structural_identities,
    make_state,
    modified_flow_crosscheck,
    monitor,
    positivity_monitors,
    rhs,
    run,
    step_etd,
    step_rk4,
    write_trajectory_csv,
)
from .bubble import (
    AsymptoticRow,
    BubbleFamily,
    BubbleParams,
    Certificate,
    GreenExpansion,
    InitialDataError,
    corrected_bubble,
    cutoff,
    green_mass,
    initial_data_candidate,
    q_sphere_reference,
    sphere_quotient_asymptotic,
    standard_bubble,
)

__version__ = "0.1.0"
