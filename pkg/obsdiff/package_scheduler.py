'''
Module packages and the pruning pipeline.

The linear layers of the model are grouped into Basic Units (layers whose
inputs do not depend on each other within one forward pass) and the units
into Module Packages. Packages are processed one after the other: the
calibration trajectories are run once on the current, partially pruned
model while hooks accumulate the statistics of every layer in the package;
then all layers of the package are pruned and written back.
'''
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from brian2.utils.logger import get_logger

from .errors import ObsDiffError, BadConfig, BadSpec
from .hessian import (timestep_weights, HessianAccumulator, accumulate,
                      finalize, hessians_to_container, WEIGHTING_SCHEMES,
                      DEFAULT_ALPHA_MIN, DEFAULT_ALPHA_MAX, DEFAULT_DAMPING)
from .obs_unstructured import (SparsitySpec, Unstructured, SemiStructured,
                               FfnNeurons, Heads, Structured, spec_from_dict,
                               prune_count, DEFAULT_BLOCK_SIZE)
from .obs_structured import (head_prune_count, DEFAULT_RRF_K,
                             HEAD_BLOCK_MODES)
from .methods import get_method, METHODS
from .evaluate import sparsity_report, theoretical_flops
from .tensor_store import save_container
from .toy_diffusion import run_trajectory
from .utils import callback_setup

logger = get_logger(__name__)

# Basic Units of one block, in forward order
UNIT_PATHS = (('qkv', ('attn.q', 'attn.k', 'attn.v')),
              ('out', ('attn.out_a', 'attn.out_b')),
              ('ffn_up', ('ffn_a.up', 'ffn_b.up')),
              ('ffn_down', ('ffn_a.down', 'ffn_b.down')))
EXPORT_MODES = ('masked', 'shrunk')


@dataclass(frozen=True)
class BasicUnit(object):
    name: str
    layer_ids: tuple


@dataclass(frozen=True)
class ModulePackage(object):
    index: int
    units: tuple

    @property
    def layer_ids(self):
        return [layer_id for unit in self.units for layer_id in unit.layer_ids]

    def __str__(self):
        return f'package {self.index} ({", ".join(u.name for u in self.units)})'


def resolve_blocks(blocks, num_blocks):
    """
    Turn block selectors into sorted block indices.

    Parameters
    ----------
    blocks : str or iterable
        Integers and the words ``'first'`` and ``'last'``, either as an
        iterable or as a comma-separated string such as ``'first,last'``.
    num_blocks : int
    """
    if blocks is None:
        return ()
    if isinstance(blocks, str):
        blocks = [part.strip() for part in blocks.split(',') if part.strip()]
    resolved = set()
    for block in blocks:
        if block == 'first':
            resolved.add(0)
        elif block == 'last':
            resolved.add(num_blocks - 1)
        else:
            try:
                index = int(block)
            except (TypeError, ValueError):
                raise BadConfig(f'Cannot interpret block "{block}", use an '
                                f'index, "first" or "last"')
            if not 0 <= index < num_blocks:
                raise BadConfig(f'Block {index} does not exist (model has '
                                f'{num_blocks} blocks)')
            resolved.add(index)
    return tuple(sorted(resolved))


def basic_units(model, exclude_blocks=()):
    """All Basic Units of the model in forward topological order"""
    excluded = resolve_blocks(exclude_blocks, model.config.num_blocks)
    return [BasicUnit(f'b{block}.{name}',
                      tuple(f'b{block}.{path}' for path in paths))
            for block in range(model.config.num_blocks) if block not in excluded
            for name, paths in UNIT_PATHS]


def partition_into_packages(model, num_packages, exclude_blocks=()):
    """
    Split the Basic Units into contiguous packages.

    Units are kept in forward order; package sizes differ by at most one,
    earlier packages taking the remainder (10 units in 4 packages gives
    sizes 3, 3, 2, 2).

    Parameters
    ----------
    model : `ToyModel`
    num_packages : int
        Between 1 and the number of units.
    exclude_blocks : iterable, optional
        Blocks whose layers are not pruned, see `resolve_blocks`.

    Returns
    -------
    list of `ModulePackage`
    """
    units = basic_units(model, exclude_blocks)
    if int(num_packages) != num_packages or not 1 <= num_packages <= len(units):
        raise BadConfig(f'Need between 1 and {len(units)} packages, got '
                        f'{num_packages}')
    size, remainder = divmod(len(units), int(num_packages))
    packages = []
    start = 0
    for index in range(int(num_packages)):
        stop = start + size + (1 if index < remainder else 0)
        packages.append(ModulePackage(index, tuple(units[start:stop])))
        start = stop
    return packages


def target_layers(spec, layer_ids):
    """The layers among ``layer_ids`` that ``spec`` prunes directly"""
    if isinstance(spec, (Unstructured, SemiStructured)):
        return list(layer_ids)
    wanted = ()
    if isinstance(spec, (FfnNeurons, Structured)):
        wanted += ('ffn_a.down', 'ffn_b.down')
    if isinstance(spec, (Heads, Structured)):
        wanted += ('attn.out_a', 'attn.out_b')
    return [layer_id for layer_id in layer_ids
            if layer_id.split('.', 1)[1] in wanted]


@dataclass
class PipelineConfig(object):
    """
    Settings of a pruning run.

    Defaults are four packages, the log-decrease weighting between 0.1 and 1,
    a damping of 1% of the mean diagonal, 100 calibration samples, blocks of
    32 columns and ``rrf_k = 60``.
    """
    sparsity: SparsitySpec = field(default_factory=lambda: Unstructured(0.5))
    method: str = 'obs'
    num_packages: int = 4
    weighting: str = 'log-decrease'
    alpha_min: float = DEFAULT_ALPHA_MIN
    alpha_max: float = DEFAULT_ALPHA_MAX
    damp_rel: float = DEFAULT_DAMPING
    calib_size: int = 100
    calib_seed: int = 0
    block_size: int = DEFAULT_BLOCK_SIZE
    rrf_k: int = DEFAULT_RRF_K
    head_block: str = 'submatrix'
    exclude_blocks: tuple = ()
    export_mode: str = 'masked'
    threads: int = 1
    save_hessians: str = None

    def validate(self, model=None):
        """
        Check the settings, and their compatibility with ``model`` if given.

        Raises
        ------
        BadConfig
        BadSpec
            With the id of the first layer the sparsity cannot be applied to.
        """
        if not isinstance(self.sparsity, SparsitySpec):
            raise BadConfig(f'sparsity has to be a SparsitySpec, got '
                            f'{self.sparsity!r}')
        if self.method not in METHODS:
            raise BadConfig(f'Unknown method "{self.method}", use one of '
                            f'{", ".join(METHODS)}')
        if self.weighting not in WEIGHTING_SCHEMES:
            raise BadConfig(f'Unknown weighting scheme "{self.weighting}"')
        if not 0 < self.alpha_min <= self.alpha_max:
            raise BadConfig(f'Need 0 < alpha_min <= alpha_max, got '
                            f'{self.alpha_min} and {self.alpha_max}')
        if self.damp_rel < 0:
            raise BadConfig(f'Damping has to be non-negative, got {self.damp_rel}')
        for name in ('num_packages', 'calib_size', 'block_size', 'rrf_k',
                     'threads'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise BadConfig(f'{name} has to be a positive integer, got '
                                f'{value!r}')
        if self.calib_seed < 0:
            raise BadConfig(f'Seeds have to be non-negative, got {self.calib_seed}')
        if self.head_block not in HEAD_BLOCK_MODES:
            raise BadConfig(f'Unknown head block mode "{self.head_block}"')
        if self.export_mode not in EXPORT_MODES:
            raise BadConfig(f'Unknown export mode "{self.export_mode}", use '
                            f'one of {", ".join(EXPORT_MODES)}')
        if (self.method == 'wanda' and
                not isinstance(self.sparsity, (Unstructured, SemiStructured))):
            raise BadSpec('Wanda supports only unstructured and N:M sparsity')
        if model is not None:
            self._validate_for(model)

    def _validate_for(self, model):
        config = model.config
        packages = partition_into_packages(model, self.num_packages,
                                           self.exclude_blocks)
        layers = [layer_id for package in packages
                  for layer_id in package.layer_ids]
        spec = self.sparsity
        for layer_id in target_layers(spec, layers):
            width = model.input_dim(layer_id)
            if isinstance(spec, SemiStructured) and width % spec.m:
                raise BadSpec(f'Input width {width} is not divisible by the '
                              f'group size of {spec.pattern}',
                              layer_id=layer_id)
            if (isinstance(spec, (FfnNeurons, Structured)) and
                    layer_id.endswith('.down') and
                    prune_count(spec.ratio, width) >= width):
                raise BadSpec(f'Ratio {spec.ratio} would remove all {width} '
                              f'neurons', layer_id=layer_id)
            if (isinstance(spec, (Heads, Structured)) and
                    layer_id.endswith('.out_a') and
                    head_prune_count(spec.ratio, config.num_heads) >= config.num_heads):
                raise BadSpec(f'Ratio {spec.ratio} would remove all '
                              f'{config.num_heads} heads', layer_id=layer_id)

    def to_dict(self):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values['sparsity'] = self.sparsity.to_dict()
        values['exclude_blocks'] = list(self.exclude_blocks)
        return values

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise BadConfig(f'Unknown pipeline settings: {", ".join(unknown)}')
        if isinstance(values.get('sparsity'), dict):
            values['sparsity'] = spec_from_dict(values['sparsity'])
        if 'exclude_blocks' in values:
            values['exclude_blocks'] = tuple(values['exclude_blocks'] or ())
        return cls(**values)


def collect_package_stats(model, package, calib, weights, layers=None):
    """
    Accumulate the timestep-weighted statistics of a package's layers.

    Every calibration sample is run through the full trajectory once; at
    step ``t`` the input ``X`` of each collected layer adds
    ``2 * alpha_t / N * X^T X`` (the mean over the ``N`` samples).

    Parameters
    ----------
    model : `ToyModel`
        Not modified.
    package : `ModulePackage`
    calib : `CalibrationSet`
    weights : `TimestepWeights` or sequence
        ``alpha_1 .. alpha_T``.
    layers : list of str, optional
        Subset of the package's layers to collect, defaults to all.

    Returns
    -------
    dict
        Layer id to `HessianAccumulator`.
    """
    layers = package.layer_ids if layers is None else list(layers)
    for layer_id in layers:
        model.check_layer(layer_id)
    alphas = np.asarray(getattr(weights, 'values', weights), dtype=np.float64)
    if alphas.shape != (model.config.num_steps,):
        raise BadConfig(f'Need {model.config.num_steps} timestep weights, got '
                        f'{alphas.size}')
    if len(calib) == 0:
        raise BadConfig('Calibration set is empty')
    accumulators = {layer_id: HessianAccumulator(layer_id,
                                                 model.input_dim(layer_id))
                    for layer_id in layers}
    scale = 1.0 / len(calib)

    def hook(layer_id, t, x):
        if layer_id in accumulators:
            accumulate(accumulators[layer_id], x.T, alphas[t - 1]*scale)

    for sample in calib:
        run_trajectory(model, sample, hook=hook)
    return accumulators


class PackageScheduler(object):
    """
    Runs the package-by-package pruning pipeline.

    Parameters
    ----------
    model : `ToyModel`
        The dense model. It is not modified; pruning works on a copy
        (`PackageScheduler.model`).
    calib : `CalibrationSet`
        Calibration samples; the first ``config.calib_size`` are used.
    config : `PipelineConfig`, optional
    method : `PruningMethod`, optional
        Overrides ``config.method``.
    """
    def __init__(self, model, calib, config=None, method=None):
        if config is None:
            config = PipelineConfig()
        config.validate(model)
        self.config = config
        self.dense = model
        self.model = model.copy()
        self.method = get_method(config.method if method is None else method)
        if len(calib) < config.calib_size:
            logger.warn(f'Requested {config.calib_size} calibration samples '
                        f'but only {len(calib)} are available.',
                        name_suffix='small_calibration')
        self.calib = calib[:config.calib_size]
        self.weights = timestep_weights(config.weighting,
                                        model.config.num_steps,
                                        config.alpha_min, config.alpha_max)
        self.packages = partition_into_packages(model, config.num_packages,
                                                config.exclude_blocks)
        self.calibration_passes = 0
        self.peak_accumulator_bytes = 0
        self.layer_reports = []
        self.package_reports = []
        self.completed = False

    @property
    def target_layers(self):
        return [layer_id for package in self.packages
                for layer_id in target_layers(self.config.sparsity,
                                              package.layer_ids)]

    def run(self, callback='text'):
        """
        Prune all packages.

        Parameters
        ----------
        callback : `str` or `~typing.Callable`, optional
            ``'text'``, ``'progressbar'``, ``None`` or a function
            ``func(package, layer_reports, index)``. If the function returns
            ``True`` the pipeline stops after the current package.

        Returns
        -------
        model : `ToyModel`
            The pruned model.
        report : dict
            See `PackageScheduler.report`.
        """
        callback = callback_setup(callback, len(self.packages))
        logger.info(f'Pruning {len(self.packages)} packages with '
                    f'{self.method.name} to {self.config.sparsity} '
                    f'({len(self.calib)} calibration samples)')
        for index, package in enumerate(self.packages):
            layer_reports = self.run_package(package)
            if callback(package, layer_reports, index) is True:
                logger.info(f'Stopped after {package}')
                break
        else:
            self.completed = True
        return self.model, self.report()

    def run_package(self, package):
        """Collect statistics for one package and prune its layers"""
        spec = self.config.sparsity
        targets = target_layers(spec, package.layer_ids)
        # the calibration pass runs even without targets: one pass per package
        start = time.perf_counter()
        accumulators = collect_package_stats(self.model, package, self.calib,
                                             self.weights, layers=targets)
        self.calibration_passes += len(self.calib)
        if not targets:
            logger.warn(f'{package} has no layers to prune for {spec.kind} '
                        f'sparsity, skipping it.', name_suffix='empty_package')
            self.package_reports.append({
                'package': package.index, 'layers': [], 'skipped': True,
                'calibration_time': time.perf_counter() - start})
            return []
        nbytes = sum(acc.nbytes for acc in accumulators.values())
        self.peak_accumulator_bytes = max(self.peak_accumulator_bytes, nbytes)
        calibration_time = time.perf_counter() - start
        logger.info(f'Collected statistics for {package} '
                    f'({calibration_time:.2f}s)')

        factors = {}
        for layer_id, acc in accumulators.items():
            factors[layer_id] = finalize(acc, self.config.damp_rel)
        if self.config.save_hessians:
            self._save_hessians(package, factors)

        layer_reports = self._prune(package, targets, factors)
        self.layer_reports.extend(layer_reports)
        self.package_reports.append({
            'package': package.index,
            'layers': [report['layer'] for report in layer_reports],
            'skipped': False,
            'calibration_time': calibration_time,
            'prune_time': sum(report['time'] for report in layer_reports),
            'accumulator_bytes': nbytes})
        return layer_reports

    def _save_hessians(self, package, factors):
        os.makedirs(self.config.save_hessians, exist_ok=True)
        filename = os.path.join(self.config.save_hessians,
                                f'package_{package.index}.obsd')
        save_container(filename, hessians_to_container(
            factors, {'package': package.index,
                      'config': self.config.to_dict()}))
        logger.info(f'Wrote statistics of {package} to {filename}')

    def _jobs(self, targets, factors):
        """Split the package's work into independent jobs"""
        spec = self.config.sparsity
        layer_jobs, head_jobs = [], []
        for layer_id in targets:
            if isinstance(spec, (Unstructured, SemiStructured)):
                layer_jobs.append(('layer', layer_id))
            elif layer_id.endswith('.down'):
                layer_jobs.append(('ffn', layer_id))
            elif layer_id.endswith('.out_a'):
                block = layer_id.split('.', 1)[0]
                if f'{block}.attn.out_b' not in factors:
                    raise BadConfig('Both output projections of a block have '
                                    'to be in the same package',
                                    layer_id=layer_id)
                head_jobs.append(('heads', layer_id))
        return layer_jobs, head_jobs

    def _run_job(self, job, factors):
        kind, layer_id = job
        config = self.config
        start = time.perf_counter()
        try:
            if kind == 'layer':
                result = self.method.prune_layer(self.model.weight(layer_id),
                                                 factors[layer_id],
                                                 config.sparsity,
                                                 block_size=config.block_size)
            elif kind == 'ffn':
                up = layer_id[:-len('down')] + 'up'
                result = self.method.prune_ffn(self.model.weight(layer_id),
                                               self.model.weight(up),
                                               factors[layer_id],
                                               config.sparsity.ratio)
            else:
                block = int(layer_id.split('.', 1)[0][1:])
                result = self.method.prune_heads(
                    self.model, block, factors[layer_id],
                    factors[f'b{block}.attn.out_b'], config.sparsity.ratio,
                    rrf_k=config.rrf_k, block_mode=config.head_block)
        except ObsDiffError as ex:
            if ex.layer_id is None:
                ex.layer_id = layer_id
            raise
        return result, time.perf_counter() - start

    def _layer_report(self, layer_id, recon_error, elapsed, removed=None):
        W = self.model.weight(layer_id)
        report = {'layer': layer_id,
                  'package': None,
                  'method': self.method.name,
                  'kind': self.config.sparsity.kind,
                  'recon_error': float(recon_error),
                  'sparsity': float(np.mean(W == 0)),
                  'time': elapsed}
        if removed is not None:
            report['removed'] = list(removed)
        return report

    def _prune(self, package, targets, factors):
        layer_jobs, head_jobs = self._jobs(targets, factors)
        if self.config.threads > 1 and len(layer_jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as executor:
                outcomes = list(executor.map(lambda job: self._run_job(job, factors),
                                             layer_jobs))
        else:
            outcomes = [self._run_job(job, factors) for job in layer_jobs]

        reports = []
        # write back in job order so the result does not depend on threads
        for (kind, layer_id), (result, elapsed) in zip(layer_jobs, outcomes):
            if kind == 'layer':
                self.model.set_weight(layer_id, result.weights)
                reports.append(self._layer_report(layer_id, result.recon_error,
                                                  elapsed))
            else:
                ffn = layer_id[:-len('.down')]
                self.model.set_weight(layer_id, result.w_down)
                self.model.set_weight(ffn + '.up', result.w_up)
                self.model.pruned_neurons[ffn] = sorted(
                    set(self.model.pruned_neurons.get(ffn, [])) |
                    set(result.removed))
                reports.append(self._layer_report(layer_id, result.recon_error,
                                                  elapsed, removed=result.removed))
        # head removal edits several layers of a block in place
        for job in head_jobs:
            result, elapsed = self._run_job(job, factors)
            for layer_id, recon_error in result.recon_errors.items():
                reports.append(self._layer_report(layer_id, recon_error,
                                                  elapsed,
                                                  removed=result.removed))
        for report in reports:
            report['package'] = package.index
            logger.debug(f'{report["layer"]}: recon {report["recon_error"]:.4g}, '
                         f'sparsity {report["sparsity"]:.3f}')
        return reports

    def results(self, format='list'):
        """
        Returns the per-layer results in one of the 3 formats: 'dataframe',
        'list', 'dict'.

        Returns
        -------
        object
            'dataframe': returns pandas `~pandas.DataFrame`
            'list': list of dictionaries
            'dict': dictionary of lists
        """
        columns = ['package', 'layer', 'method', 'kind', 'recon_error',
                   'sparsity', 'time']
        if format == 'list':
            return [dict(report) for report in self.layer_reports]
        elif format == 'dict':
            return {column: [report[column] for report in self.layer_reports]
                    for column in columns}
        elif format == 'dataframe':
            from pandas import DataFrame
            return DataFrame(self.results(format='dict'), columns=columns)
        raise BadConfig(f'Unknown results format "{format}", use "list", '
                        f'"dict" or "dataframe"')

    def report(self):
        """
        The pipeline report.

        Returns
        -------
        dict
            Config echo, per-layer and per-package results, the sparsity
            audit, calibration passes, peak accumulator memory and operation
            counts. The schema is described in the documentation.
        """
        audit = sparsity_report(self.model, self.config.sparsity,
                                layers=self.target_layers)
        return {'config': self.config.to_dict(),
                'model': self.model.config.to_dict(),
                'completed': self.completed,
                'layers': self.results(format='list'),
                'packages': list(self.package_reports),
                'recon_error_total': float(sum(r['recon_error']
                                               for r in self.layer_reports)),
                'global_sparsity': audit.global_sparsity,
                'audit': audit.to_dict(),
                'calibration_passes': self.calibration_passes,
                'peak_accumulator_bytes': self.peak_accumulator_bytes,
                'flops': theoretical_flops(self.model),
                'pruned_heads': {str(block): heads for block, heads
                                 in self.model.pruned_heads.items()},
                'pruned_neurons': dict(self.model.pruned_neurons)}


def run_pipeline(model, calib, config=None, callback=None, method=None):
    """
    Prune ``model`` with the statistics of ``calib``.

    Parameters
    ----------
    model : `ToyModel`
        Dense model, not modified.
    calib : `CalibrationSet`
    config : `PipelineConfig`, optional
    callback : optional
        See `PackageScheduler.run`; silent by default.
    method : `PruningMethod`, optional

    Returns
    -------
    pruned : `ToyModel`
    report : dict
    """
    scheduler = PackageScheduler(model, calib, config=config, method=method)
    return scheduler.run(callback=callback)
