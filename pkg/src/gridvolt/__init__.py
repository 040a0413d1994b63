"""gridvolt: dispatch and voltage-support evaluation for radial grids.

Core pieces:

- :mod:`gridvolt.network`: radial model, validation, BIBC/BCBV matrices
- :mod:`gridvolt.powerflow`: exact backward/forward-sweep AC power flow
- :mod:`gridvolt.der`: inverter capability regions, storage, flexible loads
- :mod:`gridvolt.vsupport`: Swiss passive/active voltage-support tariffs
- :mod:`gridvolt.opf`: multi-period mixed-integer convex sweep OPF
- :mod:`gridvolt.sim`: daily/seasonal experiment harness
- :mod:`gridvolt.cli`: ``gridvolt`` command line entry point
"""

__version__ = "0.1.0"

from .network import (  # noqa: F401
    Branch,
    Bus,
    NetworkError,
    NetworkModel,
    OltcTransformer,
    TheveninEquivalent,
    TopologyMatrices,
    build_topology_matrices,
    load_network,
    thevenin_from_scc,
    validate_radial,
)
from .powerflow import (  # noqa: F401
    ConvergenceError,
    InjectionSet,
    NetworkState,
    PowerFlowError,
    boundary_exchange,
    branch_loss,
    interconnection_voltage,
    solve_bfs,
)
