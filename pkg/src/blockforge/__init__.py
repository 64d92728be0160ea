"""blockforge: a desk-scale block-structured lattice Boltzmann framework.

Scenario scripts configure, initialize, evaluate, and steer simulations
running on a compiled-style core: 4D fields with ghost layers, block
decomposition with load balancing, D3Q19 TRT collision, a free-surface
extension with a bubble model, and a live console reachable over TCP or
WebSocket.
"""

from .blockgrid import Block, BlockStorage, CellInterval, decompose_domain, make_storage
from .field import (ArrayViewDescriptor, Field, FieldLayout, FieldView,
                    create_field, export_array_view, swap_buffers, view_slice)
from .lbm import (Stencil, TRTParams, equilibrium, lbm_timestep, macroscopic,
                  make_stencil, trt_collide)
from .unitsconfig import (LatticeScale, Quantity, find_optimal_dt,
                          nondimensionalize_tree, parse_quantity, to_lattice,
                          validate_config)

__version__ = "0.1.0"

__all__ = [
    "ArrayViewDescriptor", "Block", "BlockStorage", "CellInterval", "Field",
    "FieldLayout", "FieldView", "LatticeScale", "Quantity", "Stencil",
    "TRTParams", "create_field", "decompose_domain", "equilibrium",
    "export_array_view", "find_optimal_dt", "lbm_timestep", "macroscopic",
    "make_stencil", "make_storage", "nondimensionalize_tree", "parse_quantity",
    "swap_buffers", "to_lattice", "trt_collide", "validate_config",
    "view_slice",
]
