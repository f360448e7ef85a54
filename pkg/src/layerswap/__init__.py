"""Post hoc re-composition and delta analysis of transformer checkpoints."""
from .analysis import (
    DeltaStats,
    HeatmapGrid,
    RowMavs,
    delta_row_mavs,
    expert_weight,
    export_heatmap,
    heatmap,
)
from .checkpoint import Checkpoint, TensorRecord, diff_max, load_checkpoint, save_checkpoint, validate_compat
from .dtypes import DType
from .merge import (
    LayerRole,
    NonLayerRouting,
    NormRouting,
    SwapConfig,
    TiesConfig,
    assign_layers,
    layer_swap,
    mav_weighted_soup,
    provenance,
    revert_layers,
    soup,
    sparsify_rows,
    ties_merge,
)
from .topology import DEFAULT_SCHEME, NamingScheme, ParamKind, ParamLocus, classify, grid_cells, layer_count

__version__ = "0.1.0"
