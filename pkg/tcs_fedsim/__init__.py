"""
tcs_fedsim - gradient compression for federated learning, and a simulator to study it.

This package provides time-correlated sparsification (TCS) alongside top-K and
rand-K baselines, a bit-exact sparse payload codec with scaled-sign and fractional
quantization, and desk-scale FedAvg / TCS / TCS-momentum training loops built on
small numpy models.
"""

from .__version__ import __version__

# Core imports
from .tensor import (
    LayerLayout,
    ParamVector,
    Mask,
    RngStream,
    apply_mask,
    mask_union,
    mask_complement,
    masks_disjoint,
    hamming_distance,
    substream,
)
from .compressors import (
    ErrorState,
    SparseUpdate,
    s_top,
    lf_mask,
    layer_floors,
    topk_compress,
    randk_mask,
    randk_compress,
    tcs_global_mask,
    tcs_local_mask,
    tcs_compress,
)
from .codec import (
    PositionBitstream,
    EncodedPayload,
    FractionalQuantization,
    encode_positions,
    decode_positions,
    scaled_sign_quantize,
    fractional_quantize,
    quantize_values,
    encode_payload,
    decode_payload,
    payload_bit_length,
    block_size_for,
    bit_budget,
    measured_bit_budget,
)
from .models import (
    Dataset,
    Model,
    BatchSampler,
    init_model,
    loss,
    gradient,
    predict,
    accuracy,
    synth_dataset,
    partition_iid,
    train_test_split,
    load_dataset_csv,
    save_dataset_csv,
)
from .metrics import MetricsRecord, MetricsLog
from .fedsim import (
    Experiment,
    RoundState,
    RoundTrace,
    build_experiment,
    lr_schedule,
    client_local_update,
    aggregate,
    run_fedavg,
    run_tcs,
    run_tcs_momentum,
    run_experiment,
)
from .config import (
    RuntimeConfig,
    CompressorConfig,
    QuantizerSpec,
    ExperimentConfig,
    load_experiment_config,
)
from .workers import WorkerPool
from .exceptions import (
    TCSFedsimError,
    ContractViolationError,
    LayoutMismatchError,
    NonFiniteValueError,
    MalformedPayloadError,
    DatasetFormatError,
    ConfigurationError,
    DivergedError,
    OutputExistsError,
)
from .utils import setup_logging

# Public API
__all__ = [
    # Tensors, masks, random streams
    'LayerLayout',
    'ParamVector',
    'Mask',
    'RngStream',
    'apply_mask',
    'mask_union',
    'mask_complement',
    'masks_disjoint',
    'hamming_distance',
    'substream',

    # Compressors
    'ErrorState',
    'SparseUpdate',
    's_top',
    'lf_mask',
    'layer_floors',
    'topk_compress',
    'randk_mask',
    'randk_compress',
    'tcs_global_mask',
    'tcs_local_mask',
    'tcs_compress',

    # Codec
    'PositionBitstream',
    'EncodedPayload',
    'FractionalQuantization',
    'encode_positions',
    'decode_positions',
    'scaled_sign_quantize',
    'fractional_quantize',
    'quantize_values',
    'encode_payload',
    'decode_payload',
    'payload_bit_length',
    'block_size_for',
    'bit_budget',
    'measured_bit_budget',

    # Models and data
    'Dataset',
    'Model',
    'BatchSampler',
    'init_model',
    'loss',
    'gradient',
    'predict',
    'accuracy',
    'synth_dataset',
    'partition_iid',
    'train_test_split',
    'load_dataset_csv',
    'save_dataset_csv',

    # Simulation
    'MetricsRecord',
    'MetricsLog',
    'Experiment',
    'RoundState',
    'RoundTrace',
    'build_experiment',
    'lr_schedule',
    'client_local_update',
    'aggregate',
    'run_fedavg',
    'run_tcs',
    'run_tcs_momentum',
    'run_experiment',
    'WorkerPool',

    # Configuration
    'RuntimeConfig',
    'CompressorConfig',
    'QuantizerSpec',
    'ExperimentConfig',
    'load_experiment_config',

    # Exceptions
    'TCSFedsimError',
    'ContractViolationError',
    'LayoutMismatchError',
    'NonFiniteValueError',
    'MalformedPayloadError',
    'DatasetFormatError',
    'ConfigurationError',
    'DivergedError',
    'OutputExistsError',

    # Utility functions
    'setup_logging',

    # Version info
    '__version__',
]
