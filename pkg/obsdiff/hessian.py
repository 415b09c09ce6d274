'''
Timestep-aware Hessian statistics and their damped inverse factors.

For a linear layer with inputs ``X_t`` (features x tokens) at denoising step
``t``, the accumulated statistic is ``H = 2 * sum_t alpha_t * X_t X_t^T``.
`finalize` adds damping and computes the Cholesky-based inverse
representation consumed by the OBS routines.
'''
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, cho_solve, LinAlgError
from brian2.utils.logger import get_logger

from .errors import BadConfig, ShapeMismatch, NotPositiveDefinite
from .tensor_store import Container

logger = get_logger(__name__)

WEIGHTING_SCHEMES = ('uniform', 'linear-increase', 'linear-decrease',
                     'log-increase', 'log-decrease')
DEFAULT_ALPHA_MIN = 0.1
DEFAULT_ALPHA_MAX = 1.0
DEFAULT_DAMPING = 0.01


@dataclass(eq=False)
class TimestepWeights(object):
    """Per-step weights ``alpha_1 .. alpha_T`` (``values[t - 1]`` is ``alpha_t``)"""
    scheme: str
    num_steps: int
    alpha_min: float
    alpha_max: float
    values: np.ndarray

    def __getitem__(self, t):
        return self.values[t - 1]

    def __len__(self):
        return len(self.values)


def timestep_weights(scheme='log-decrease', num_steps=8,
                     alpha_min=DEFAULT_ALPHA_MIN, alpha_max=DEFAULT_ALPHA_MAX):
    """
    Weights of the denoising steps in the Hessian.

    Parameters
    ----------
    scheme : str
        One of ``'uniform'``, ``'linear-increase'``, ``'linear-decrease'``,
        ``'log-increase'`` or ``'log-decrease'``.
    num_steps : int
        Number of denoising steps ``T``.
    alpha_min, alpha_max : float
        Smallest and largest weight, ``0 < alpha_min <= alpha_max``. Ignored
        for ``'uniform'``, which weights every step with 1.

    Returns
    -------
    `TimestepWeights`

    Notes
    -----
    The logarithmic decrease is
    :math:`\\alpha_t = \\alpha_{min} + (\\alpha_{max} - \\alpha_{min})
    \\ln(T - t + 1) / \\ln(T)`, highest at the first step. The increasing
    variants are its time reversal, the linear variants interpolate linearly
    between the two end points. For ``T = 1`` every scheme gives
    ``alpha_1 = alpha_max``.
    """
    if scheme not in WEIGHTING_SCHEMES:
        raise BadConfig(f'Unknown weighting scheme "{scheme}", use one of '
                        f'{", ".join(WEIGHTING_SCHEMES)}')
    if int(num_steps) != num_steps or num_steps < 1:
        raise BadConfig(f'Need at least one step, got num_steps={num_steps}')
    if not 0 < alpha_min <= alpha_max:
        raise BadConfig(f'Need 0 < alpha_min <= alpha_max, got '
                        f'alpha_min={alpha_min}, alpha_max={alpha_max}')
    T = int(num_steps)
    t = np.arange(1, T + 1, dtype=np.float64)
    span = alpha_max - alpha_min
    if scheme == 'uniform':
        values = np.ones(T)
    elif T == 1:
        if scheme.startswith('log'):
            logger.warn('Logarithmic weighting is undefined for a single '
                        'step, using alpha_max.', name_suffix='single_step')
        values = np.array([float(alpha_max)])
    elif scheme == 'log-decrease':
        values = alpha_min + span*np.log(T - t + 1)/np.log(T)
    elif scheme == 'log-increase':
        values = alpha_min + span*np.log(t)/np.log(T)
    elif scheme == 'linear-decrease':
        values = alpha_max - span*(t - 1)/(T - 1)
    else:  # linear-increase
        values = alpha_min + span*(t - 1)/(T - 1)
    return TimestepWeights(scheme, T, float(alpha_min), float(alpha_max),
                           values)


class HessianAccumulator(object):
    """
    Running sum ``H = sum 2 * alpha * X X^T`` for one layer.

    Parameters
    ----------
    layer_id : str
    n : int
        Input width of the layer.
    """
    def __init__(self, layer_id, n):
        self.layer_id = layer_id
        self.n = int(n)
        self.H = np.zeros((self.n, self.n))
        self.sample_count = 0

    @classmethod
    def from_matrix(cls, H, layer_id='', sample_count=1):
        """Wrap an existing statistic, e.g. for tests and offline analysis"""
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ShapeMismatch(f'Hessian has to be square, got {H.shape}')
        acc = cls(layer_id, H.shape[0])
        acc.H = H.copy()
        acc.sample_count = sample_count
        return acc

    @property
    def nbytes(self):
        return self.H.nbytes

    def accumulate(self, X, alpha):
        return accumulate(self, X, alpha)

    def __repr__(self):
        return (f'HessianAccumulator({self.layer_id!r}, n={self.n}, '
                f'sample_count={self.sample_count})')


def accumulate(acc, X, alpha):
    """
    Add ``2 * alpha * X X^T`` to the accumulator.

    Parameters
    ----------
    acc : `HessianAccumulator`
    X : `~numpy.ndarray`
        Activations of shape ``(n, m)``: input features as rows, tokens or
        samples as columns.
    alpha : float
        Positive weight.

    Returns
    -------
    `HessianAccumulator`
        The updated accumulator (updated in place).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != acc.n:
        raise ShapeMismatch(f'Expected activations with {acc.n} rows, got '
                            f'shape {X.shape}', layer_id=acc.layer_id or None)
    if not alpha > 0:
        raise BadConfig(f'Weights have to be positive, got {alpha}')
    acc.H += 2*alpha*(X @ X.T)
    acc.sample_count += X.shape[1]
    return acc


class InverseFactor(object):
    """
    Damped statistic and its inverse for one layer.

    Attributes
    ----------
    layer_id : str
    hessian : `~numpy.ndarray`
        The undamped (symmetrized) statistic ``H``.
    damping : float
        The damping ``lambda`` added to the diagonal.
    damped : `~numpy.ndarray`
        ``H + lambda * I``.
    inverse : `~numpy.ndarray`
        ``(H + lambda * I)^-1``.
    upper : `~numpy.ndarray`
        Upper Cholesky factor ``U`` of the inverse (``U^T U = inverse``).
        Row ``q`` of ``U`` times ``U[q, q]`` is the first row of the inverse of
        ``damped[q:, q:]``, and ``U[q, q]**2`` its leading diagonal entry; this
        is what the fixed-order algorithm needs.
    """
    def __init__(self, layer_id, hessian, damping, damped, inverse, upper):
        self.layer_id = layer_id
        self.hessian = hessian
        self.damping = damping
        self.damped = damped
        self.inverse = inverse
        self.upper = upper

    @property
    def n(self):
        return self.damped.shape[0]

    @property
    def diag(self):
        """Diagonal ``[H^-1]_qq`` of the damped inverse"""
        return np.diag(self.inverse)

    def column(self, q):
        """Column ``H^-1_{:,q}`` of the damped inverse"""
        return self.inverse[:, q]

    def __repr__(self):
        return (f'InverseFactor({self.layer_id!r}, n={self.n}, '
                f'damping={self.damping:.3g})')


def finalize(acc, damp_rel=DEFAULT_DAMPING):
    """
    Damp the accumulated statistic and factor it.

    Parameters
    ----------
    acc : `HessianAccumulator`
    damp_rel : float, optional
        Damping relative to the mean diagonal:
        ``lambda = damp_rel * mean(diag(H))``. Defaults to 0.01.

    Returns
    -------
    `InverseFactor`

    Raises
    ------
    NotPositiveDefinite
        If ``H + lambda * I`` has no Cholesky factorization, e.g. because
        all calibration activations of the layer were zero.
    """
    if damp_rel < 0:
        raise BadConfig(f'Damping has to be non-negative, got {damp_rel}')
    layer_id = acc.layer_id or None
    H = (acc.H + acc.H.T)/2
    diag = np.diag(H)
    if acc.sample_count == 0:
        logger.warn(f'No activations were accumulated for "{acc.layer_id}".',
                    name_suffix='empty_statistics')
    elif np.any(diag == 0):
        logger.debug(f'{np.sum(diag == 0)} inputs of "{acc.layer_id}" never '
                     f'received activity; relying on damping.')
    damping = float(damp_rel*np.mean(diag))
    damped = H + damping*np.eye(acc.n)
    try:
        lower = cholesky(damped, lower=True)
        inverse = cho_solve((lower, True), np.eye(acc.n))
        inverse = (inverse + inverse.T)/2
        upper = cholesky(inverse, lower=False)
    except (LinAlgError, ValueError) as ex:
        raise NotPositiveDefinite(f'Damped statistic (lambda={damping:.3g}, '
                                  f'{acc.sample_count} samples) is not positive '
                                  f'definite: {ex}', layer_id=layer_id)
    logger.debug(f'Finalized "{acc.layer_id}" (n={acc.n}, lambda={damping:.3g})')
    return InverseFactor(acc.layer_id, H, damping, damped, inverse, upper)


def identity_factor(n, layer_id=''):
    """`InverseFactor` of the identity, used by norm-based rankings"""
    eye = np.eye(n)
    return InverseFactor(layer_id, eye.copy(), 0.0, eye.copy(), eye.copy(),
                         eye.copy())


def hessians_to_container(factors, metadata=None):
    """
    Snapshot of finalized statistics for debugging.

    Parameters
    ----------
    factors : dict
        Mapping of layer id to `InverseFactor`.
    metadata : dict, optional
    """
    meta = dict(metadata or {})
    meta.update({'kind': 'hessians',
                 'damping': {layer_id: factor.damping
                             for layer_id, factor in factors.items()}})
    container = Container(metadata=meta)
    for layer_id in sorted(factors):
        container.add(f'{layer_id}.H', factors[layer_id].hessian, 'f64')
        container.add(f'{layer_id}.H_damped', factors[layer_id].damped, 'f64')
    return container
