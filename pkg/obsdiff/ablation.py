'''
Sweeps over the pipeline's main knobs: sparsity and method, timestep
weighting, package count and calibration set size.

Every sweep returns a `~pandas.DataFrame` with one row per run.
'''
import time
from dataclasses import replace

import pandas as pd
from brian2.utils.logger import get_logger

from .errors import BadConfig
from .hessian import WEIGHTING_SCHEMES
from .obs_unstructured import parse_sparsity
from .package_scheduler import PipelineConfig, run_pipeline
from .evaluate import trajectory_divergence
from .toy_diffusion import ModelConfig, init_model, gen_calibration, gen_eval_set

logger = get_logger(__name__)


def _run(model, calib, eval_set, config, **columns):
    start = time.perf_counter()
    pruned, report = run_pipeline(model, calib, config)
    elapsed = time.perf_counter() - start
    divergence = trajectory_divergence(model, pruned, eval_set)
    row = dict(columns)
    row.update({'divergence_mean': divergence.mean,
                'divergence_max': divergence.max,
                'recon_error_total': report['recon_error_total'],
                'global_sparsity': report['global_sparsity'],
                'calibration_passes': report['calibration_passes'],
                'peak_accumulator_bytes': report['peak_accumulator_bytes'],
                'time': elapsed})
    logger.debug(f'{columns}: divergence {divergence.mean:.4g}')
    return row


def sweep_sparsity(model, calib, eval_set, ratios=(0.3, 0.5, 0.7),
                   methods=('obs', 'wanda', 'magnitude'),
                   pattern='unstructured', base_config=None):
    """
    Compare methods across sparsity ratios.

    Parameters
    ----------
    model : `ToyModel`
    calib : `CalibrationSet`
    eval_set : `CalibrationSet`
    ratios : sequence of float
        Ignored for N:M patterns, which have a fixed ratio.
    methods : sequence of str
    pattern : str, optional
        Passed to `parse_sparsity`.
    base_config : `PipelineConfig`, optional
        Settings shared by all runs.
    """
    base_config = PipelineConfig() if base_config is None else base_config
    if ':' in pattern:
        ratios = (None, )
    rows = []
    for ratio in ratios:
        spec = parse_sparsity(pattern, ratio)
        for method in methods:
            config = replace(base_config, sparsity=spec, method=method)
            rows.append(_run(model, calib, eval_set, config, method=method,
                             pattern=str(spec), ratio=spec.ratio))
    return pd.DataFrame(rows)


def sweep_weighting(model, calib, eval_set, schemes=WEIGHTING_SCHEMES,
                    base_config=None):
    """Compare timestep weighting schemes at otherwise identical settings"""
    base_config = PipelineConfig() if base_config is None else base_config
    return pd.DataFrame([_run(model, calib, eval_set,
                              replace(base_config, weighting=scheme),
                              weighting=scheme)
                         for scheme in schemes])


def sweep_packages(model, calib, eval_set, package_counts=(1, 2, 4, 8),
                   base_config=None):
    """
    Compare package counts.

    Counts larger than the number of Basic Units of the model are skipped.
    """
    base_config = PipelineConfig() if base_config is None else base_config
    rows = []
    for count in package_counts:
        config = replace(base_config, num_packages=count)
        try:
            config.validate(model)
        except BadConfig as ex:
            logger.warn(f'Skipping {count} packages: {ex}',
                        name_suffix='skip_package_count')
            continue
        rows.append(_run(model, calib, eval_set, config, num_packages=count))
    return pd.DataFrame(rows)


def sweep_calibration_size(model, calib, eval_set, sizes=(1, 5, 10, 25, 50, 100),
                           base_config=None):
    """
    Compare calibration set sizes, using the first ``size`` samples of
    ``calib`` for each run.
    """
    base_config = PipelineConfig() if base_config is None else base_config
    rows = []
    for size in sizes:
        if size > len(calib):
            logger.warn(f'Skipping calibration size {size}, only {len(calib)} '
                        f'samples available.', name_suffix='skip_calib_size')
            continue
        rows.append(_run(model, calib[:size], eval_set,
                         replace(base_config, calib_size=size),
                         calib_size=size))
    return pd.DataFrame(rows)


def sweep_model_seeds(model_seeds, schemes=('uniform', 'log-decrease'),
                      model_config=None, calib_size=16, eval_size=16,
                      calib_seed=0, eval_seed=0, base_config=None):
    """
    Repeat the weighting comparison over freshly initialized models.

    Parameters
    ----------
    model_seeds : sequence of int
    schemes : sequence of str
    model_config : `ModelConfig`, optional
        Template; its seed is replaced by each of ``model_seeds``.
    calib_size, eval_size : int
    calib_seed, eval_seed : int
    base_config : `PipelineConfig`, optional

    Returns
    -------
    `~pandas.DataFrame`
        One row per (model seed, scheme).
    """
    model_config = ModelConfig() if model_config is None else model_config
    base_config = PipelineConfig() if base_config is None else base_config
    calib = gen_calibration(calib_seed, calib_size, model_config)
    eval_set = gen_eval_set(eval_seed, eval_size, model_config)
    rows = []
    for seed in model_seeds:
        model = init_model(replace(model_config, seed=seed))
        for scheme in schemes:
            config = replace(base_config, weighting=scheme,
                             calib_size=calib_size, calib_seed=calib_seed)
            rows.append(_run(model, calib, eval_set, config, model_seed=seed,
                             weighting=scheme))
    return pd.DataFrame(rows)
