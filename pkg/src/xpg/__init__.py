"""Expert paging at desk scale.

Streams MoE expert weights through a fixed pool of physical blocks behind
stable virtual addresses, with a lossless bf16 exponent codec, a
bandwidth-balanced storage hierarchy, a RAW/WAR-ordered load/compute
pipeline, a decode-loop timing simulator, and a budget-aware residency
planner.
"""

from .model import (
    ExpertTensorId,
    ModelSpec,
    TensorKind,
    WeightContainer,
    generate_synthetic_model,
    tensor_offset,
)
from .paging import AddressSpace, PageState, PageTable, page_vaddr, target_layer
from .codec import CompressedModel, build_histogram, build_table, compress, decompress
from .storage import Backend, BackendKind, StorageHierarchy, estimate_load, plan_placement
from .pipeline import (
    ForwardSpec,
    RunReport,
    StreamedRunner,
    resident_baseline,
    run_iterations,
    validate_ordering,
)
from .simulate import SimConfig, knee_alpha, memory_breakdown, simulate_decode, sweep_alpha
from .planner import (
    MemoryBudget,
    PlannerState,
    compute_rho,
    plan_step,
    run_control_loop,
    run_landscape_loop,
)

__version__ = "0.1.0"
