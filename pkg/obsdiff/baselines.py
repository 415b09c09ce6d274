'''
Magnitude and Wanda mask criteria.

Both criteria only select weights; they do not compensate the remaining ones.
Masks are chosen with the same cardinality rules as the OBS pruner so that
all methods remove the same number of weights per row and group.
'''
from dataclasses import dataclass

import numpy as np

from .errors import BadSpec, ShapeMismatch
from .obs_unstructured import (Unstructured, SemiStructured, lowest_k_mask,
                               select_nm_mask, prune_count)


@dataclass(eq=False)
class CriterionScore(object):
    """Per-weight importance, compared within each row"""
    layer_id: str
    scores: np.ndarray


def criterion_mask(scores, spec, block_size=None):
    """
    Keep-mask removing the lowest ``scores`` according to ``spec``.

    Parameters
    ----------
    scores : `~numpy.ndarray`
        Non-negative scores, shape ``(rows, n)``.
    spec : `Unstructured` or `SemiStructured`
    block_size : int, optional
        For unstructured specs, select ``ceil(ratio * b)`` weights in every
        block of ``b`` columns (as the blocked OBS pruner does) instead of
        ``ceil(ratio * n)`` per row.
    """
    scores = np.atleast_2d(scores)
    if isinstance(spec, SemiStructured):
        return select_nm_mask(scores, spec.n, spec.m)
    if not isinstance(spec, Unstructured):
        raise BadSpec(f'Criterion masks support unstructured and N:M sparsity, '
                      f'not "{spec.kind}"')
    n = scores.shape[1]
    if block_size is None:
        return lowest_k_mask(scores, prune_count(spec.ratio, n))
    keep = np.ones(scores.shape, dtype=bool)
    for i1 in range(0, n, block_size):
        i2 = min(i1 + block_size, n)
        keep[:, i1:i2] = lowest_k_mask(scores[:, i1:i2],
                                       prune_count(spec.ratio, i2 - i1))
    return keep


def magnitude_score(W, layer_id=''):
    return CriterionScore(layer_id, np.abs(np.atleast_2d(W)))


def magnitude_mask(W, spec, block_size=None):
    """
    Remove the weights with the smallest absolute value.

    Parameters
    ----------
    W : `~numpy.ndarray`
    spec : `Unstructured` or `SemiStructured`
    block_size : int, optional
        See `criterion_mask`.

    Returns
    -------
    `~numpy.ndarray`
        Boolean keep-mask; ties remove the lowest index first.
    """
    return criterion_mask(magnitude_score(W).scores, spec, block_size)


def wanda_norms(inv):
    """
    Input norms ``||X_j||`` recovered from a statistic ``H = 2 X X^T``.

    Parameters
    ----------
    inv : `InverseFactor`
        The undamped statistic is used, so the norms come from the same
        timestep-weighted calibration pass as the OBS saliencies.
    """
    return np.sqrt(np.clip(np.diag(inv.hessian), 0, None) / 2)


def wanda_score(W, norms, layer_id=''):
    W = np.atleast_2d(W)
    norms = np.asarray(norms, dtype=np.float64)
    if norms.shape != (W.shape[1],):
        raise ShapeMismatch(f'Got {norms.size} input norms for a layer with '
                            f'{W.shape[1]} inputs',
                            layer_id=layer_id or None)
    return CriterionScore(layer_id, np.abs(W) * norms)


def wanda_mask(W, norms, spec, block_size=None):
    """
    Remove the weights with the smallest ``|W_ij| * ||X_j||``.

    Parameters
    ----------
    W : `~numpy.ndarray`
    norms : `~numpy.ndarray`
        Norm of every input feature, see `wanda_norms`.
    spec : `Unstructured` or `SemiStructured`
    block_size : int, optional
        See `criterion_mask`.
    """
    return criterion_mask(wanda_score(W, norms).scores, spec, block_size)
