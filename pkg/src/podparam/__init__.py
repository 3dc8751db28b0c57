"""Difference-quotient POD reduced-order models for parametric
reaction-diffusion problems: FEM full-order model, snapshot-set builders,
gradient-product POD, Galerkin reduction, and experiment drivers."""

from .integrate import IntegratorConfig, PeriodicOrbit, Trajectory, find_periodic_orbit, integrate, sample_orbit
from .mesh_fem import (
    BoundaryCondition,
    Field,
    Mesh,
    assemble_mass,
    assemble_stiffness,
    build_mesh,
    h1_semi_inner,
    h1_semi_norm,
    interpolate_nodal,
    l2_inner,
    l2_norm,
    make_bc,
    poincare_constant,
)
from .models import (
    ParamPoint,
    ParametricModel,
    SemidiscreteSystem,
    brusselator_shifted,
    build_system,
    fom_jacobian,
    fom_rhs,
    scalar_lipschitz,
)
from .pod_basis import (
    PodBasis,
    PodEigen,
    correlation_matrix,
    eigendecompose,
    load_basis,
    pod_modes,
    project_h01,
    save_basis,
    standard_exponents,
    tail,
    verify_pointwise_bound,
    verify_tail_identity,
)
from .rom import RomOperators, integrate_rom, reduce, rom_jacobian, rom_periodic_orbit, rom_rhs
from .snapshots import (
    SnapshotBlock,
    SnapshotSet,
    build_set_new_1p,
    build_set_new_2p,
    build_set_standard,
    dalpha_quotient,
    dt_dalpha_quotient,
    dt_quotient,
    load_set,
    save_set,
)

__version__ = "0.1.0"
