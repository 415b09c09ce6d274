'''
One-shot second-order pruning of diffusion transformers, demonstrated on a
toy joint-attention denoiser.
'''
from .version import version
__version__ = version

from .tests import run as run_test
from .errors import *
from .tensor_store import *
from .toy_diffusion import *
from .hessian import *
from .obs_unstructured import *
from .obs_structured import *
from .baselines import *
from .methods import *
from .package_scheduler import *
from .evaluate import *
from .utils import *

__all__ = ['ObsDiffError', 'ContainerError', 'BadConfig', 'BadSpec',
           'BadStep', 'ShapeMismatch', 'UnknownLayer', 'NotPositiveDefinite',
           'NotFinalized',
           'Container', 'TensorRecord', 'read_container', 'write_container',
           'load_container', 'save_container',
           'ModelConfig', 'ToyModel', 'CalibrationSet', 'init_model',
           'denoise_step', 'run_trajectory', 'gen_calibration', 'gen_eval_set',
           'model_to_container', 'model_from_container',
           'calibration_to_container', 'calibration_from_container',
           'timestep_weights', 'HessianAccumulator', 'InverseFactor',
           'accumulate', 'finalize',
           'SparsitySpec', 'Unstructured', 'SemiStructured', 'FfnNeurons',
           'Heads', 'Structured', 'parse_sparsity', 'PruneResult',
           'prune_row_naive', 'prune_layer_blocked', 'select_nm_mask',
           'ffn_neuron_saliency', 'prune_ffn', 'head_saliency', 'rrf_fuse',
           'prune_heads', 'magnitude_mask', 'wanda_mask',
           'PruningMethod', 'OBSMethod', 'MagnitudeMethod', 'WandaMethod',
           'BasicUnit', 'ModulePackage', 'PipelineConfig', 'PackageScheduler',
           'partition_into_packages', 'collect_package_stats', 'run_pipeline',
           'Metric', 'MSEMetric', 'layer_recon_error', 'trajectory_divergence',
           'sparsity_report', 'theoretical_flops', 'EvalReport',
           'callback_setup', 'callback_text', 'callback_none',
           'MaxAbsMetric', 'DivergenceStats', 'SparsityAudit', 'evaluate_models',
           'CalibrationSample', 'param_shapes', 'WEIGHTING_SCHEMES',
           'identity_factor', 'hessians_to_container', 'spec_from_dict',
           'prune_count', 'head_prune_count', 'wanda_norms', 'get_method',
           'basic_units', 'resolve_blocks', 'target_layers']
