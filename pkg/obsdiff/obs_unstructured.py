'''
Unstructured and N:M OBS pruning of a single linear layer.

Weights are removed column by column in a fixed left-to-right order. The
inverse statistic is never recomputed: the rows of the upper Cholesky factor
of ``(H + lambda I)^-1`` give exactly the inverse over the not yet visited
columns, so every removal only needs one rank-one update. Updates inside a
block of columns are applied lazily and flushed to the remaining columns at
the block boundary.
'''
from dataclasses import dataclass, asdict
import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from brian2.utils.logger import get_logger

from .errors import BadSpec, BadConfig, ShapeMismatch, NotFinalized
from .hessian import HessianAccumulator, InverseFactor
from .evaluate import layer_recon_error

logger = get_logger(__name__)

DEFAULT_BLOCK_SIZE = 32


class SparsitySpec(object):
    """
    Base class of sparsity requests.

    Subclasses set a ``kind`` tag that is used in reports and configuration
    files.
    """
    kind = None

    def to_dict(self):
        values = asdict(self)
        values['kind'] = self.kind
        return values

    @property
    def pattern(self):
        """The ``--pattern`` string selecting this spec on the command line"""
        return self.kind

    def __str__(self):
        return f'{self.pattern}@{getattr(self, "ratio", "")}'


def _check_ratio(ratio, what):
    if not (isinstance(ratio, (int, float, np.floating)) and 0 < ratio < 1):
        raise BadSpec(f'{what} ratio has to lie strictly between 0 and 1, '
                      f'got {ratio!r}')


@dataclass(frozen=True)
class Unstructured(SparsitySpec):
    """Remove a fraction ``ratio`` of the weights in every row"""
    ratio: float
    kind = 'unstructured'

    def __post_init__(self):
        _check_ratio(self.ratio, 'Unstructured')


@dataclass(frozen=True)
class SemiStructured(SparsitySpec):
    """Remove exactly ``n`` weights in every consecutive group of ``m``"""
    n: int
    m: int
    kind = 'n:m'

    def __post_init__(self):
        if int(self.n) != self.n or int(self.m) != self.m:
            raise BadSpec(f'N:M needs integers, got {self.n}:{self.m}')
        if not 1 <= self.n < self.m:
            raise BadSpec(f'N:M needs 1 <= n < m, got {self.n}:{self.m}')

    @property
    def ratio(self):
        return self.n / self.m

    @property
    def pattern(self):
        return f'{self.n}:{self.m}'

    def __str__(self):
        return self.pattern


@dataclass(frozen=True)
class FfnNeurons(SparsitySpec):
    """Remove a fraction ``ratio`` of the hidden neurons of every FFN"""
    ratio: float
    kind = 'ffn'

    def __post_init__(self):
        _check_ratio(self.ratio, 'FFN neuron')


@dataclass(frozen=True)
class Heads(SparsitySpec):
    """Remove a fraction ``ratio`` of the attention heads of every block"""
    ratio: float
    kind = 'heads'

    def __post_init__(self):
        _check_ratio(self.ratio, 'Head')


@dataclass(frozen=True)
class Structured(SparsitySpec):
    """Remove heads and FFN neurons at the same ``ratio``"""
    ratio: float
    kind = 'structured'

    def __post_init__(self):
        _check_ratio(self.ratio, 'Structured')


SPEC_KINDS = {cls.kind: cls for cls in (Unstructured, SemiStructured,
                                        FfnNeurons, Heads, Structured)}
PATTERNS = ('unstructured', 'N:M', 'ffn', 'heads', 'structured')


def parse_sparsity(pattern, ratio=None):
    """
    Build a `SparsitySpec` from command-line style arguments.

    Parameters
    ----------
    pattern : str
        ``'unstructured'``, ``'ffn'``, ``'heads'``, ``'structured'`` or an
        ``'N:M'`` string such as ``'2:4'``.
    ratio : float, optional
        Required for everything except ``'N:M'``, where it is ignored.

    Examples
    --------
    >>> parse_sparsity('2:4')
    SemiStructured(n=2, m=4)
    >>> parse_sparsity('unstructured', 0.5)
    Unstructured(ratio=0.5)
    """
    pattern = pattern.strip().lower()
    if ':' in pattern:
        try:
            n, m = (int(part) for part in pattern.split(':'))
        except ValueError:
            raise BadSpec(f'Cannot parse N:M pattern "{pattern}"')
        return SemiStructured(n, m)
    if pattern not in SPEC_KINDS:
        raise BadSpec(f'Unknown sparsity pattern "{pattern}", use one of '
                      f'{", ".join(PATTERNS)}')
    if ratio is None:
        raise BadSpec(f'Pattern "{pattern}" needs a sparsity ratio')
    return SPEC_KINDS[pattern](float(ratio))


def spec_from_dict(values):
    """Inverse of `SparsitySpec.to_dict`"""
    values = dict(values)
    kind = values.pop('kind', None)
    if kind not in SPEC_KINDS:
        raise BadSpec(f'Unknown sparsity kind "{kind}"')
    return SPEC_KINDS[kind](**values)


@dataclass(eq=False)
class PruneResult(object):
    """
    Outcome of pruning one layer (or one row).

    Attributes
    ----------
    weights : `~numpy.ndarray`
        Pruned, compensated weights (double precision).
    keep_mask : `~numpy.ndarray`
        Boolean, ``True`` where the weight was retained.
    recon_error : float
        ``trace(dW (H/2) dW^T)`` under the damped statistic.
    saliency_trace : `~numpy.ndarray`, optional
        Loss ``L_q`` of every removal (naive pruning: in removal order;
        blocked pruning: one entry per weight, zero for kept weights).
    """
    weights: np.ndarray
    keep_mask: np.ndarray
    recon_error: float
    saliency_trace: np.ndarray = None

    @property
    def sparsity(self):
        return 1.0 - float(np.mean(self.keep_mask))


def prune_count(ratio, width):
    """Number of weights ``ceil(ratio * width)`` to remove from ``width``"""
    # rounding first keeps e.g. 0.3*10 from becoming 4
    return int(math.ceil(round(ratio * width, 9)))


def obs_saliency(W, inv):
    """
    Per-weight saliency ``L_q = w_q^2 / (2 [H^-1]_qq)``.

    Parameters
    ----------
    W : `~numpy.ndarray`
        Weights, shape ``(rows, n)``.
    inv : `InverseFactor`
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if W.shape[1] != inv.n:
        raise ShapeMismatch(f'Weight has {W.shape[1]} columns, statistic has '
                            f'{inv.n}', layer_id=inv.layer_id or None)
    return W**2 / (2*inv.diag)


def lowest_k_mask(scores, k):
    """
    Keep-mask that removes the ``k`` lowest scores of every row.

    Ties are broken towards the lowest column index.
    """
    scores = np.atleast_2d(scores)
    keep = np.ones(scores.shape, dtype=bool)
    if k > 0:
        order = np.argsort(scores, axis=1, kind='stable')[:, :k]
        np.put_along_axis(keep, order, False, axis=1)
    return keep


def select_nm_mask(saliency, n, m):
    """
    Keep-mask with exactly ``n`` removed entries per consecutive group of ``m``.

    Parameters
    ----------
    saliency : `~numpy.ndarray`
        A row (1D) or a matrix whose rows are treated independently.
    n, m : int
        Number of entries removed per group, and group size.

    Returns
    -------
    `~numpy.ndarray`
        Boolean keep-mask with the shape of ``saliency``. Within a group, the
        lowest saliencies are removed, ties going to the lowest index.
    """
    if not 1 <= n < m:
        raise BadSpec(f'N:M needs 1 <= n < m, got {n}:{m}')
    saliency = np.asarray(saliency)
    if saliency.shape[-1] % m:
        raise BadSpec(f'Width {saliency.shape[-1]} is not divisible by the '
                      f'group size {m}')
    groups = saliency.reshape(saliency.shape[:-1] + (-1, m))
    order = np.argsort(groups, axis=-1, kind='stable')[..., :n]
    keep = np.ones(groups.shape, dtype=bool)
    np.put_along_axis(keep, order, False, axis=-1)
    return keep.reshape(saliency.shape)


def _inverse(H):
    return cho_solve(cho_factor(H), np.eye(H.shape[0]))


def prune_row_naive(w, H_damped, k_remove):
    """
    Exact greedy OBS on a single row.

    Each of the ``k_remove`` steps inverts the damped statistic restricted to
    the remaining support, removes the weight with the smallest saliency
    (lowest index on ties) and applies the optimal update to the rest of the
    support. Slow, but exact; used as a reference.

    Parameters
    ----------
    w : `~numpy.ndarray`
        Weight row of length ``n``.
    H_damped : `~numpy.ndarray`
        Positive definite ``n x n`` statistic.
    k_remove : int
        Number of weights to remove, ``0 <= k_remove <= n``.

    Returns
    -------
    `PruneResult`
        With one-dimensional ``weights`` and ``keep_mask``.
    """
    w0 = np.asarray(w, dtype=np.float64).ravel()
    H = np.asarray(H_damped, dtype=np.float64)
    n = len(w0)
    if H.shape != (n, n):
        raise ShapeMismatch(f'Statistic has shape {H.shape}, expected {(n, n)}')
    if int(k_remove) != k_remove or not 0 <= k_remove <= n:
        raise BadSpec(f'Cannot remove {k_remove} of {n} weights')
    w = w0.copy()
    support = list(range(n))
    losses = []
    for _ in range(int(k_remove)):
        Hinv = _inverse(H[np.ix_(support, support)])
        diag = np.diag(Hinv)
        saliency = w[support]**2 / (2*diag)
        q = int(np.argmin(saliency))
        losses.append(saliency[q])
        w[support] -= (w[support[q]] / diag[q]) * Hinv[:, q]
        w[support[q]] = 0.0
        del support[q]
    keep = np.zeros(n, dtype=bool)
    keep[support] = True
    w[~keep] = 0.0
    return PruneResult(weights=w, keep_mask=keep,
                       recon_error=layer_recon_error(w0, w, H),
                       saliency_trace=np.array(losses))


def prune_layer_blocked(W, inv, spec, block_size=DEFAULT_BLOCK_SIZE):
    """
    Blocked fixed-order OBS pruning of a layer.

    Parameters
    ----------
    W : `~numpy.ndarray`
        Weights of shape ``(rows, n)``.
    inv : `InverseFactor`
        Finalized statistic of the layer inputs.
    spec : `Unstructured` or `SemiStructured`
    block_size : int, optional
        Width ``B`` of the lazily updated column blocks (default 32). For
        ``Unstructured(ratio)`` every row loses ``ceil(ratio * b)`` weights
        in each block of width ``b``. For N:M the block size is rounded down
        to a multiple of ``m`` (at least ``m``).

    Returns
    -------
    `PruneResult`
    """
    if isinstance(inv, HessianAccumulator) or not isinstance(inv, InverseFactor):
        raise NotFinalized('Pruning needs a finalized statistic, call '
                           'finalize() first',
                           layer_id=getattr(inv, 'layer_id', None) or None)
    if not isinstance(spec, (Unstructured, SemiStructured)):
        raise BadSpec(f'Layer-wise OBS handles unstructured and N:M sparsity, '
                      f'not "{spec.kind}"', layer_id=inv.layer_id or None)
    W0 = np.atleast_2d(np.asarray(W, dtype=np.float64))
    rows, n = W0.shape
    if n != inv.n:
        raise ShapeMismatch(f'Weight has {n} columns, statistic has {inv.n}',
                            layer_id=inv.layer_id or None)
    if int(block_size) != block_size or block_size < 1:
        raise BadConfig(f'Block size has to be a positive integer, got '
                        f'{block_size}')
    block_size = int(block_size)
    nm = isinstance(spec, SemiStructured)
    if nm:
        if n % spec.m:
            raise BadSpec(f'Width {n} is not divisible by the group size '
                          f'{spec.m} of {spec.pattern}',
                          layer_id=inv.layer_id or None)
        block_size = max(spec.m, block_size - block_size % spec.m)

    U = inv.upper
    Wp = W0.copy()
    keep = np.ones_like(Wp, dtype=bool)
    losses = np.zeros_like(Wp)
    for i1 in range(0, n, block_size):
        i2 = min(i1 + block_size, n)
        width = i2 - i1
        W1 = Wp[:, i1:i2].copy()
        U1 = U[i1:i2, i1:i2]
        d1 = np.diag(U1)
        Q1 = np.zeros_like(W1)
        Err1 = np.zeros_like(W1)
        if nm:
            keep1 = np.ones_like(W1, dtype=bool)
        else:
            keep1 = lowest_k_mask(W1**2 / d1**2,
                                  prune_count(spec.ratio, width))
        for i in range(width):
            if nm and i % spec.m == 0:
                group = slice(i, i + spec.m)
                keep1[:, group] = select_nm_mask(W1[:, group]**2 / d1[group]**2,
                                                 spec.n, spec.m)
            w = W1[:, i]
            q = np.where(keep1[:, i], w, 0.0)
            losses[:, i1 + i] = (w - q)**2 / d1[i]**2 / 2
            err = (w - q) / d1[i]
            W1[:, i:] -= np.outer(err, U1[i, i:])
            Q1[:, i] = q
            Err1[:, i] = err
        Wp[:, i1:i2] = Q1
        keep[:, i1:i2] = keep1
        Wp[:, i2:] -= Err1 @ U[i1:i2, i2:]
    Wp[~keep] = 0.0
    recon = layer_recon_error(W0, Wp, inv.damped)
    logger.debug(f'Pruned "{inv.layer_id}" to {spec} '
                 f'(sparsity {1 - keep.mean():.3f}, recon {recon:.4g})')
    return PruneResult(weights=Wp, keep_mask=keep, recon_error=recon,
                       saliency_trace=losses)
