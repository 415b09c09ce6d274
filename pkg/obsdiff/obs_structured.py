'''
Structured OBS pruning: FFN neurons, attention heads and the fusion of the
head rankings of both modalities.

Whole input columns are removed from a layer. After every removal the
remaining columns receive the optimal compensation, computed from the exact
inverse of the statistic restricted to the columns that are still present.
'''
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from brian2.utils.logger import get_logger

from .errors import BadSpec, BadConfig, ShapeMismatch
from .evaluate import layer_recon_error
from .obs_unstructured import prune_count

logger = get_logger(__name__)

DEFAULT_RRF_K = 60
HEAD_BLOCK_MODES = ('submatrix', 'inverse_block')


@dataclass(eq=False)
class NeuronSaliency(object):
    layer_id: str
    scores: np.ndarray


@dataclass(eq=False)
class HeadSaliency(object):
    """Per-head saliency of one modality's output projection"""
    modality: str
    scores: np.ndarray
    head_dim: int
    num_heads: int


@dataclass(eq=False)
class FusedHeadRanking(object):
    """
    Result of `rrf_fuse`.

    Attributes
    ----------
    rrf_k : int
    fused : `~numpy.ndarray`
        Fused score of every head, larger is more important.
    ordering : `~numpy.ndarray`
        Head indices from least to most important.
    pruned : list of int
        Heads designated for removal (sorted).
    ranks_a, ranks_b : `~numpy.ndarray`
        Rank of every head in each modality, 1 being the most salient.
    """
    rrf_k: int
    fused: np.ndarray
    ordering: np.ndarray
    pruned: list = field(default_factory=list)
    ranks_a: np.ndarray = None
    ranks_b: np.ndarray = None


@dataclass(eq=False)
class FfnPruneResult(object):
    w_down: np.ndarray
    w_up: np.ndarray
    removed: list
    recon_error: float
    saliency_trace: np.ndarray = None


@dataclass(eq=False)
class HeadPruneResult(object):
    block: int
    removed: list
    ranking: FusedHeadRanking = None
    saliency_a: HeadSaliency = None
    saliency_b: HeadSaliency = None
    recon_errors: dict = field(default_factory=dict)


def _inverse(H):
    return cho_solve(cho_factor(H), np.eye(H.shape[0]))


def _remove_column(W, H, support, column, compensate=True, Hinv=None):
    """
    Zero ``column`` of ``W`` and compensate the other columns in ``support``.

    ``W`` is updated in place and ``column`` is dropped from ``support``.
    Returns the loss of the removal.
    """
    if Hinv is None:
        Hinv = _inverse(H[np.ix_(support, support)])
    q = support.index(column)
    loss = float(np.sum(W[:, column]**2) / (2*Hinv[q, q]))
    if compensate:
        W[:, support] -= np.outer(W[:, column] / Hinv[q, q], Hinv[:, q])
    W[:, column] = 0.0
    support.remove(column)
    return loss


def ffn_neuron_saliency(W_down, inv):
    """
    Saliency ``L_q = sum_i W_iq^2 / (2 [H^-1]_qq)`` of every hidden neuron.

    Parameters
    ----------
    W_down : `~numpy.ndarray`
        Down projection, shape ``(D, F)``.
    inv : `InverseFactor`
        Statistic of the down projection's inputs (hidden activations).

    Returns
    -------
    `NeuronSaliency`
    """
    W_down = np.atleast_2d(np.asarray(W_down, dtype=np.float64))
    if W_down.shape[1] != inv.n:
        raise ShapeMismatch(f'Down projection has {W_down.shape[1]} columns, '
                            f'statistic has {inv.n}',
                            layer_id=inv.layer_id or None)
    scores = np.sum(W_down**2, axis=0) / (2*inv.diag)
    return NeuronSaliency(inv.layer_id, scores)


def prune_ffn(W_down, W_up, inv, ratio, compensate=True):
    """
    Greedily remove ``ceil(ratio * F)`` hidden neurons of an FFN.

    Each step removes the neuron with the smallest saliency with respect to
    the inverse restricted to the remaining neurons (ties go to the lowest
    index), compensates the remaining columns of ``W_down`` and zeroes the
    matching row of ``W_up``.

    Parameters
    ----------
    W_down : `~numpy.ndarray`
        Shape ``(D, F)``.
    W_up : `~numpy.ndarray`
        Shape ``(F, D)``.
    inv : `InverseFactor`
        Statistic of the down projection's inputs.
    ratio : float
        Fraction of neurons to remove, ``0 < ratio < 1``.
    compensate : bool, optional
        Apply the OBS update to the remaining columns (default). Without it,
        neurons are only zeroed.

    Returns
    -------
    `FfnPruneResult`
        ``removed`` lists the neurons in removal order.
    """
    if not 0 < ratio < 1:
        raise BadSpec(f'FFN neuron ratio has to lie strictly between 0 and 1, '
                      f'got {ratio}', layer_id=inv.layer_id or None)
    W0 = np.atleast_2d(np.asarray(W_down, dtype=np.float64))
    W_up = np.array(W_up, dtype=np.float64)
    F = W0.shape[1]
    if W_up.shape[0] != F or inv.n != F:
        raise ShapeMismatch(f'Down projection has {F} columns, up projection '
                            f'{W_up.shape[0]} rows and the statistic '
                            f'{inv.n} inputs', layer_id=inv.layer_id or None)
    k = prune_count(ratio, F)
    if k >= F:
        raise BadSpec(f'Ratio {ratio} would remove all {F} neurons',
                      layer_id=inv.layer_id or None)
    H = inv.damped
    W = W0.copy()
    support = list(range(F))
    removed, losses = [], []
    for _ in range(k):
        Hinv = _inverse(H[np.ix_(support, support)])
        scores = np.sum(W[:, support]**2, axis=0) / (2*np.diag(Hinv))
        neuron = support[int(np.argmin(scores))]
        losses.append(_remove_column(W, H, support, neuron,
                                     compensate=compensate, Hinv=Hinv))
        removed.append(neuron)
    W_up[removed, :] = 0.0
    recon = layer_recon_error(W0, W, H)
    logger.debug(f'Removed {k} of {F} neurons from "{inv.layer_id}" '
                 f'(recon {recon:.4g})')
    return FfnPruneResult(w_down=W, w_up=W_up, removed=removed,
                          recon_error=recon, saliency_trace=np.array(losses))


def head_saliency(W_out, inv, head_dim, modality='A', block_mode='submatrix'):
    """
    Saliency of every attention head for one output projection.

    Parameters
    ----------
    W_out : `~numpy.ndarray`
        Output projection, shape ``(D, H * d)``; head ``j`` owns the
        contiguous input columns ``j*d .. (j+1)*d``.
    inv : `InverseFactor`
        Statistic of the projection's inputs.
    head_dim : int
        ``d``.
    modality : str, optional
        Tag stored in the result.
    block_mode : str, optional
        ``'submatrix'`` (default) inverts the principal ``d x d`` submatrix
        of ``H`` belonging to the head; ``'inverse_block'`` uses the diagonal
        block of the full inverse instead.

    Returns
    -------
    `HeadSaliency`
        ``L_j = sum_k ||W_{:, jd+k}||^2 / (H_j^-1)_kk``.
    """
    if block_mode not in HEAD_BLOCK_MODES:
        raise BadConfig(f'Unknown head block mode "{block_mode}", use one of '
                        f'{", ".join(HEAD_BLOCK_MODES)}')
    W_out = np.atleast_2d(np.asarray(W_out, dtype=np.float64))
    width = W_out.shape[1]
    if head_dim < 1 or width % head_dim:
        raise BadSpec(f'Width {width} is not divisible by the head dimension '
                      f'{head_dim}', layer_id=inv.layer_id or None)
    if width != inv.n:
        raise ShapeMismatch(f'Output projection has {width} columns, '
                            f'statistic has {inv.n}',
                            layer_id=inv.layer_id or None)
    num_heads = width // head_dim
    column_norms = np.sum(W_out**2, axis=0)
    scores = np.zeros(num_heads)
    for j in range(num_heads):
        cols = slice(j*head_dim, (j + 1)*head_dim)
        if block_mode == 'submatrix':
            diag = np.diag(_inverse(inv.damped[cols, cols]))
        else:
            diag = np.diag(inv.inverse[cols, cols])
        scores[j] = np.sum(column_norms[cols] / diag)
    return HeadSaliency(modality, scores, head_dim, num_heads)


def _ranks(scores):
    # rank 1 for the largest score, equal scores favour the lower index
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='stable')
    ranks = np.empty(len(order), dtype=int)
    ranks[order] = np.arange(1, len(order) + 1)
    return ranks


def rrf_fuse(scores_a, scores_b, rrf_k=DEFAULT_RRF_K, n_prune=0):
    """
    Reciprocal rank fusion of two head rankings.

    Parameters
    ----------
    scores_a, scores_b : array-like
        Per-head saliency of the two modalities.
    rrf_k : int, optional
        Smoothing constant, defaults to 60.
    n_prune : int, optional
        Number of heads with the lowest fused score to designate for removal.

    Returns
    -------
    `FusedHeadRanking`
        Fused scores ``1/(k + rank_a) + 1/(k + rank_b)``.
    """
    scores_a = np.asarray(scores_a)
    scores_b = np.asarray(scores_b)
    if scores_a.shape != scores_b.shape or scores_a.ndim != 1:
        raise ShapeMismatch(f'Head scores have shapes {scores_a.shape} and '
                            f'{scores_b.shape}')
    if rrf_k < 1:
        raise BadConfig(f'rrf_k has to be at least 1, got {rrf_k}')
    if not 0 <= n_prune <= len(scores_a):
        raise BadSpec(f'Cannot prune {n_prune} of {len(scores_a)} heads')
    ranks_a = _ranks(scores_a)
    ranks_b = _ranks(scores_b)
    fused = 1.0/(rrf_k + ranks_a) + 1.0/(rrf_k + ranks_b)
    ordering = np.argsort(fused, kind='stable')
    return FusedHeadRanking(rrf_k=rrf_k, fused=fused, ordering=ordering,
                            pruned=sorted(int(j) for j in ordering[:n_prune]),
                            ranks_a=ranks_a, ranks_b=ranks_b)


def head_prune_count(ratio, num_heads):
    return int(math.floor(round(ratio * num_heads, 9)))


def prune_heads(model, block, inv_a, inv_b, ratio, rrf_k=DEFAULT_RRF_K,
                compensate=True, block_mode='submatrix'):
    """
    Remove the ``floor(ratio * H)`` least important heads of a block.

    Heads are ranked per modality with `head_saliency` and fused with
    `rrf_fuse`. The heads' input columns of both output projections are
    removed left to right, each with the OBS compensation under that
    modality's full statistic; the heads' rows of the query, key and value
    projections are zeroed. The model is modified in place.

    Parameters
    ----------
    model : `ToyModel`
    block : int
    inv_a, inv_b : `InverseFactor`
        Statistics of ``attn.out_a`` and ``attn.out_b`` inputs.
    ratio : float
        ``0 < ratio < 1``.
    rrf_k : int, optional
    compensate : bool, optional
        Apply the OBS update to the output projections (default).
    block_mode : str, optional
        See `head_saliency`.

    Returns
    -------
    `HeadPruneResult`
    """
    if not 0 < ratio < 1:
        raise BadSpec(f'Head ratio has to lie strictly between 0 and 1, got '
                      f'{ratio}')
    config = model.config
    prefix = f'b{block}.attn.'
    n_prune = head_prune_count(ratio, config.num_heads)
    if n_prune >= config.num_heads:
        raise BadSpec(f'Ratio {ratio} would remove all {config.num_heads} '
                      f'heads of block {block}', layer_id=prefix + 'out_a')
    if n_prune == 0:
        logger.warn(f'Head ratio {ratio} removes no head of '
                    f'{config.num_heads} in block {block}.',
                    name_suffix='no_heads_removed')
        return HeadPruneResult(block=block, removed=[])

    d = config.head_dim
    W_a = np.array(model.weight(prefix + 'out_a'), dtype=np.float64)
    W_b = np.array(model.weight(prefix + 'out_b'), dtype=np.float64)
    saliency_a = head_saliency(W_a, inv_a, d, 'A', block_mode=block_mode)
    saliency_b = head_saliency(W_b, inv_b, d, 'B', block_mode=block_mode)
    ranking = rrf_fuse(saliency_a.scores, saliency_b.scores, rrf_k=rrf_k,
                       n_prune=n_prune)
    channels = [j*d + c for j in ranking.pruned for c in range(d)]

    recon_errors = {}
    for path, W, inv in (('out_a', W_a, inv_a), ('out_b', W_b, inv_b)):
        W0 = W.copy()
        support = list(range(W.shape[1]))
        for channel in channels:
            _remove_column(W, inv.damped, support, channel,
                           compensate=compensate)
        recon_errors[prefix + path] = layer_recon_error(W0, W, inv.damped)
        model.set_weight(prefix + path, W)
    for path in ('q', 'k', 'v'):
        W = np.array(model.weight(prefix + path))
        W[channels, :] = 0
        model.set_weight(prefix + path, W)
    model.pruned_heads[block] = sorted(set(model.pruned_heads.get(block, [])) |
                                       set(ranking.pruned))
    logger.debug(f'Removed heads {ranking.pruned} from block {block}')
    return HeadPruneResult(block=block, removed=ranking.pruned, ranking=ranking,
                           saliency_a=saliency_a, saliency_b=saliency_b,
                           recon_errors=recon_errors)
