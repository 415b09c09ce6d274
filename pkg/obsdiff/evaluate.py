'''
Comparison of pruned and dense models: reconstruction errors, trajectory
divergence, sparsity audits and operation counts.
'''
import abc
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd
from brian2.utils.logger import get_logger

from .errors import BadConfig, ShapeMismatch
from .toy_diffusion import run_trajectory, ATTN_PATHS

logger = get_logger(__name__)


def layer_recon_error(W, W_hat, H):
    """
    Reconstruction error ``trace((W - W_hat) (H/2) (W - W_hat)^T)``.

    With ``H = 2 X X^T`` this is ``||W X - W_hat X||^2``.

    Parameters
    ----------
    W, W_hat : `~numpy.ndarray`
        Original and pruned weights, ``(rows, n)`` or a single row.
    H : `~numpy.ndarray`
        The ``n x n`` statistic (usually the damped one).
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    W_hat = np.atleast_2d(np.asarray(W_hat, dtype=np.float64))
    H = np.asarray(H, dtype=np.float64)
    if W.shape != W_hat.shape:
        raise ShapeMismatch(f'Weights have shapes {W.shape} and {W_hat.shape}')
    if H.shape != (W.shape[1], W.shape[1]):
        raise ShapeMismatch(f'Statistic has shape {H.shape}, weights have '
                            f'{W.shape[1]} columns')
    delta = W - W_hat
    return float(np.sum((delta @ H) * delta) / 2)


class Metric(metaclass=abc.ABCMeta):
    """
    Distance between the final latents of two trajectories.

    Parameters
    ----------
    normalization : float, optional
        Errors are divided by this value. Defaults to 1.
    """
    def __init__(self, normalization=1.):
        if not normalization > 0:
            raise BadConfig(f'Normalization has to be positive, got '
                            f'{normalization}')
        self.normalization = 1/normalization

    @abc.abstractmethod
    def get_features(self, pruned_latents, dense_latents):
        """
        Per-sample error.

        Parameters
        ----------
        pruned_latents, dense_latents : `~numpy.ndarray`
            Final latents of shape ``(n_samples, tokens, D)``.

        Returns
        -------
        `~numpy.ndarray`
            Error of each sample, shape ``(n_samples,)``.
        """
        pass

    def calc(self, pruned_latents, dense_latents):
        pruned_latents = np.asarray(pruned_latents, dtype=np.float64)
        dense_latents = np.asarray(dense_latents, dtype=np.float64)
        return self.get_features(pruned_latents, dense_latents) * self.normalization


class MSEMetric(Metric):
    """
    Mean square error over all tokens and channels.
    """
    def get_features(self, pruned_latents, dense_latents):
        error = (pruned_latents - dense_latents)**2
        return error.reshape(error.shape[0], -1).mean(axis=1)


class MaxAbsMetric(Metric):
    """Largest absolute deviation of any latent entry"""
    def get_features(self, pruned_latents, dense_latents):
        error = np.abs(pruned_latents - dense_latents)
        return error.reshape(error.shape[0], -1).max(axis=1)


@dataclass(eq=False)
class DivergenceStats(object):
    """Per-sample divergences and their aggregates"""
    sample_ids: list
    per_sample: np.ndarray
    mean: float
    max: float
    metric: str = 'MSEMetric'

    def to_dict(self):
        return {'metric': self.metric, 'mean': self.mean, 'max': self.max,
                'per_sample': [float(v) for v in self.per_sample],
                'sample_ids': list(self.sample_ids)}

    def to_dataframe(self):
        return pd.DataFrame({'sample_id': self.sample_ids,
                             'divergence': self.per_sample})

    def to_csv(self, filename):
        self.to_dataframe().to_csv(filename, index=False)


def final_latents(model, eval_set):
    """Final latents of every sample, shape ``(n_samples, tokens, D)``"""
    return np.stack([run_trajectory(model, sample).final for sample in eval_set])


def trajectory_divergence(dense, pruned, eval_set, metric=None):
    """
    Compare the final latents of two models from identical noise and
    condition tokens.

    Parameters
    ----------
    dense, pruned : `ToyModel`
        Models with the same configuration.
    eval_set : `CalibrationSet`
        Evaluation samples, see `gen_eval_set`.
    metric : `Metric`, optional
        Defaults to `MSEMetric`.

    Returns
    -------
    `DivergenceStats`
    """
    if dense.config.to_dict() != pruned.config.to_dict():
        raise BadConfig('Dense and pruned models have different '
                        'configurations')
    if len(eval_set) == 0:
        raise BadConfig('Evaluation set is empty')
    if metric is None:
        metric = MSEMetric()
    errors = metric.calc(final_latents(pruned, eval_set),
                         final_latents(dense, eval_set))
    stats = DivergenceStats(sample_ids=[s.sample_id for s in eval_set],
                            per_sample=errors, mean=float(np.mean(errors)),
                            max=float(np.max(errors)),
                            metric=metric.__class__.__name__)
    logger.debug(f'Divergence over {len(eval_set)} samples: mean '
                 f'{stats.mean:.4g}, max {stats.max:.4g}')
    return stats


@dataclass(eq=False)
class SparsityAudit(object):
    """
    Result of `sparsity_report`.

    ``nm_violations`` lists ``(layer_id, row, group)`` triples,
    ``structural_violations`` lists ``(layer_id, description)`` pairs.
    """
    layers: dict
    global_sparsity: float
    nm_violations: list = field(default_factory=list)
    structural_violations: list = field(default_factory=list)
    ratio_violations: list = field(default_factory=list)

    @property
    def passed(self):
        return not (self.nm_violations or self.structural_violations or
                    self.ratio_violations)

    def to_dict(self):
        values = asdict(self)
        values['nm_violations'] = [list(v) for v in self.nm_violations]
        values['structural_violations'] = [list(v) for v in
                                           self.structural_violations]
        values['ratio_violations'] = [list(v) for v in self.ratio_violations]
        values['passed'] = self.passed
        return values


def _zero_rows(W, rows):
    return all(not np.any(W[row, :]) for row in rows)


def _zero_columns(W, columns):
    return all(not np.any(W[:, column]) for column in columns)


def sparsity_report(model, spec=None, layers=None):
    """
    Audit the zero pattern of a model.

    Parameters
    ----------
    model : `ToyModel`
    spec : `SparsitySpec`, optional
        If given, layers are checked against it: N:M windows for ``'n:m'``
        specs, the achieved ratio for unstructured specs.
    layers : list of str, optional
        Layers the spec applies to, defaults to all linear layers.

    Returns
    -------
    `SparsityAudit`
        Dead heads and neurons recorded in the model are always checked.
    """
    config = model.config
    per_layer = {}
    zeros = total = 0
    for layer_id in model.layer_ids:
        W = model.weight(layer_id)
        n_zero = int(np.sum(W == 0))
        per_layer[layer_id] = n_zero / W.size
        zeros += n_zero
        total += W.size
    audit = SparsityAudit(layers=per_layer, global_sparsity=zeros / total)

    targets = model.layer_ids if layers is None else list(layers)
    kind = getattr(spec, 'kind', None)
    if kind == 'n:m':
        for layer_id in targets:
            W = model.weight(layer_id)
            if W.shape[1] % spec.m:
                audit.nm_violations.append((layer_id, -1, -1))
                continue
            groups = (W == 0).reshape(W.shape[0], -1, spec.m).sum(axis=2)
            for row, group in zip(*np.nonzero(groups < spec.n)):
                audit.nm_violations.append((layer_id, int(row), int(group)))
    elif kind == 'unstructured':
        for layer_id in targets:
            # per-block ceil never removes less than the ratio
            if per_layer[layer_id] < spec.ratio - 1e-9:
                audit.ratio_violations.append((layer_id, per_layer[layer_id]))

    d = config.head_dim
    for block, heads in sorted(model.pruned_heads.items()):
        channels = [j*d + c for j in heads for c in range(d)]
        for path in ATTN_PATHS:
            layer_id = f'b{block}.{path}'
            W = model.weight(layer_id)
            dead = (_zero_rows(W, channels) if path in ('attn.q', 'attn.k', 'attn.v')
                    else _zero_columns(W, channels))
            if not dead:
                audit.structural_violations.append(
                    (layer_id, f'heads {sorted(heads)} not fully removed'))
    for ffn, neurons in sorted(model.pruned_neurons.items()):
        if not _zero_rows(model.weight(f'{ffn}.up'), neurons):
            audit.structural_violations.append(
                (f'{ffn}.up', f'neurons {sorted(neurons)} still have inputs'))
        if not _zero_columns(model.weight(f'{ffn}.down'), neurons):
            audit.structural_violations.append(
                (f'{ffn}.down', f'neurons {sorted(neurons)} still have outputs'))
    if not audit.passed:
        logger.warn(f'Sparsity audit found '
                    f'{len(audit.nm_violations)} N:M, '
                    f'{len(audit.ratio_violations)} ratio and '
                    f'{len(audit.structural_violations)} structural '
                    f'violations.', name_suffix='audit_failed')
    return audit


def theoretical_flops(model):
    """
    Multiply-accumulate operations of one forward pass.

    Removed heads and FFN neurons are skipped; weights zeroed by unstructured
    or N:M pruning are still counted.

    Returns
    -------
    dict
        ``dense`` and ``pruned`` MAC counts per pass, the same per trajectory
        (times ``T``), and the ``ratio`` pruned/dense.
    """
    config = model.config
    D, F, d = config.hidden_dim, config.ffn_dim, config.head_dim
    n_a, n_b = config.latent_tokens, config.cond_tokens
    n = n_a + n_b

    def block_macs(channels, neurons_a, neurons_b):
        qkv = 3*n*D*channels
        attention = 2*n*n*channels
        out = (n_a + n_b)*channels*D
        ffn = 2*D*(n_a*neurons_a + n_b*neurons_b)
        return qkv + attention + out + ffn

    dense = pruned = 0
    for block in range(config.num_blocks):
        dense += block_macs(D, F, F)
        heads = len(model.pruned_heads.get(block, []))
        pruned += block_macs(D - heads*d,
                             F - len(model.pruned_neurons.get(f'b{block}.ffn_a', [])),
                             F - len(model.pruned_neurons.get(f'b{block}.ffn_b', [])))
    T = config.num_steps
    return {'dense': dense, 'pruned': pruned,
            'dense_per_trajectory': dense*T, 'pruned_per_trajectory': pruned*T,
            'ratio': pruned / dense}


@dataclass(eq=False)
class EvalReport(object):
    """
    Everything the ``eval`` command reports.

    Attributes
    ----------
    divergence : `DivergenceStats`
    sparsity : `SparsityAudit`
    flops : dict
    recon_errors : dict
        Per-layer reconstruction errors, when available (from a pipeline
        report).
    config : dict
        Echo of the pipeline configuration.
    seeds : dict
    """
    divergence: DivergenceStats
    sparsity: SparsityAudit
    flops: dict
    recon_errors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def to_dict(self):
        return {'divergence': self.divergence.to_dict(),
                'sparsity': self.sparsity.to_dict(),
                'flops': self.flops,
                'recon_errors': self.recon_errors,
                'config': self.config,
                'seeds': self.seeds}

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_csv(self, filename):
        """Per-sample divergences as CSV"""
        self.divergence.to_csv(filename)


def evaluate_models(dense, pruned, eval_set, spec=None, layers=None,
                    recon_errors=None, config=None, metric=None):
    """
    Build an `EvalReport` for a pruned model.

    Parameters
    ----------
    dense, pruned : `ToyModel`
    eval_set : `CalibrationSet`
    spec : `SparsitySpec`, optional
        Passed on to `sparsity_report`.
    layers : list of str, optional
        Target layers of ``spec``.
    recon_errors : dict, optional
    config : dict, optional
    metric : `Metric`, optional
    """
    divergence = trajectory_divergence(dense, pruned, eval_set, metric=metric)
    return EvalReport(divergence=divergence,
                      sparsity=sparsity_report(pruned, spec=spec, layers=layers),
                      flops=theoretical_flops(pruned),
                      recon_errors=dict(recon_errors or {}),
                      config=dict(config or {}),
                      seeds={'eval_seed': eval_set.seed,
                             'model_seed': dense.config.seed})
