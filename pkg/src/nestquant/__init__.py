"""Nested multi-precision post-training quantization.

One quantization pass produces a parent checkpoint whose lower-bit
children are obtained by slicing the most significant bits of each code;
heterogeneous per-layer bit-widths are found by a budget-exact
evolutionary search, and 2-4 bit children run through bit-plane packed
matmul kernels.
"""

from .checkpoint import Checkpoint, CheckpointError, SlicedModel, read_checkpoint, write_checkpoint
from .grid import BitWidthSet, GridError, QuantGrid, base_scale, dequant, fit_grid, rtn
from .gptq import (
    CalibBatch,
    HessianFactor,
    QuantizeError,
    build_hessian,
    factor_inverse,
    quantize_layer,
    select_codes,
)
from .harness import CalibSet, ToyModel, analyze_routing, eval_kl, eval_recon, run_pipeline
from .matmul import MatmulTask, PackedLayer, bench, matmul_packed, matmul_ref
from .packing import PackedTensor, PackError, pack, pack_slice, unpack
from .slicing import (
    BitConfig,
    NestedLayer,
    SlicedLayer,
    SliceError,
    slice_code,
    slice_layer,
    slice_model,
    slice_to_code,
)
from .evo import Candidate, SearchParams, fitness_kl, mutate_level_switch, search

__version__ = "0.1.0"
