'''
Pruning methods that can be plugged into the `PackageScheduler`.
'''
import abc

import numpy as np
from brian2.utils.logger import get_logger

from .errors import BadSpec, BadConfig
from .hessian import identity_factor
from .evaluate import layer_recon_error
from .obs_unstructured import PruneResult, prune_layer_blocked, DEFAULT_BLOCK_SIZE
from .obs_structured import prune_ffn, prune_heads, DEFAULT_RRF_K
from .baselines import magnitude_mask, wanda_mask, wanda_norms

logger = get_logger(__name__)


def apply_mask(W, keep_mask, inv):
    """Zero ``W`` outside ``keep_mask`` without compensation"""
    W0 = np.atleast_2d(np.asarray(W, dtype=np.float64))
    W_hat = np.where(keep_mask, W0, 0.0)
    return PruneResult(weights=W_hat, keep_mask=np.asarray(keep_mask),
                       recon_error=layer_recon_error(W0, W_hat, inv.damped))


class PruningMethod(metaclass=abc.ABCMeta):
    """
    Base class for the criteria used by the `PackageScheduler`.

    Every method receives the finalized statistics of the current package
    and returns the pruned weights; reconstruction errors are always
    reported under the damped statistic of the layer.
    """
    name = None

    @abc.abstractmethod
    def prune_layer(self, W, inv, spec, block_size=DEFAULT_BLOCK_SIZE):
        """
        Prune a single linear layer to an unstructured or N:M pattern.

        Parameters
        ----------
        W : `~numpy.ndarray`
            Weights ``(rows, n)``.
        inv : `InverseFactor`
            Finalized statistic of the layer inputs.
        spec : `Unstructured` or `SemiStructured`
        block_size : int, optional

        Returns
        -------
        `PruneResult`
        """
        pass

    @abc.abstractmethod
    def prune_ffn(self, W_down, W_up, inv, ratio):
        """
        Remove hidden neurons of an FFN.

        Returns
        -------
        `FfnPruneResult`
        """
        pass

    @abc.abstractmethod
    def prune_heads(self, model, block, inv_a, inv_b, ratio,
                    rrf_k=DEFAULT_RRF_K, block_mode='submatrix'):
        """
        Remove attention heads of a block in place.

        Returns
        -------
        `HeadPruneResult`
        """
        pass

    def __repr__(self):
        return f'{self.__class__.__name__}()'


class OBSMethod(PruningMethod):
    """Second-order selection with optimal compensation"""
    name = 'obs'

    def prune_layer(self, W, inv, spec, block_size=DEFAULT_BLOCK_SIZE):
        return prune_layer_blocked(W, inv, spec, block_size=block_size)

    def prune_ffn(self, W_down, W_up, inv, ratio):
        return prune_ffn(W_down, W_up, inv, ratio)

    def prune_heads(self, model, block, inv_a, inv_b, ratio,
                    rrf_k=DEFAULT_RRF_K, block_mode='submatrix'):
        return prune_heads(model, block, inv_a, inv_b, ratio, rrf_k=rrf_k,
                           block_mode=block_mode)


class MagnitudeMethod(PruningMethod):
    """
    Remove the smallest weights, or the neurons and heads with the smallest
    weight norms, without compensation.
    """
    name = 'magnitude'

    def prune_layer(self, W, inv, spec, block_size=DEFAULT_BLOCK_SIZE):
        return apply_mask(W, magnitude_mask(W, spec, block_size=block_size), inv)

    def prune_ffn(self, W_down, W_up, inv, ratio):
        W_down = np.asarray(W_down, dtype=np.float64)
        result = prune_ffn(W_down, W_up, identity_factor(inv.n, inv.layer_id),
                           ratio, compensate=False)
        result.recon_error = layer_recon_error(W_down, result.w_down, inv.damped)
        return result

    def prune_heads(self, model, block, inv_a, inv_b, ratio,
                    rrf_k=DEFAULT_RRF_K, block_mode='submatrix'):
        before = {inv.layer_id: np.array(model.weight(inv.layer_id),
                                         dtype=np.float64)
                  for inv in (inv_a, inv_b)}
        result = prune_heads(model, block, identity_factor(inv_a.n, inv_a.layer_id),
                             identity_factor(inv_b.n, inv_b.layer_id), ratio,
                             rrf_k=rrf_k, compensate=False, block_mode=block_mode)
        result.recon_errors = {
            inv.layer_id: layer_recon_error(before[inv.layer_id],
                                            model.weight(inv.layer_id),
                                            inv.damped)
            for inv in (inv_a, inv_b)}
        return result


class WandaMethod(PruningMethod):
    """
    Remove the weights with the smallest ``|W| * ||X||``, input norms taken
    from the timestep-weighted statistic.
    """
    name = 'wanda'

    def prune_layer(self, W, inv, spec, block_size=DEFAULT_BLOCK_SIZE):
        keep = wanda_mask(W, wanda_norms(inv), spec, block_size=block_size)
        return apply_mask(W, keep, inv)

    def prune_ffn(self, W_down, W_up, inv, ratio):
        raise BadSpec('Wanda does not support structured pruning',
                      layer_id=inv.layer_id or None)

    def prune_heads(self, model, block, inv_a, inv_b, ratio,
                    rrf_k=DEFAULT_RRF_K, block_mode='submatrix'):
        raise BadSpec('Wanda does not support structured pruning',
                      layer_id=inv_a.layer_id or None)


METHODS = {cls.name: cls for cls in (OBSMethod, MagnitudeMethod, WandaMethod)}


def get_method(method):
    """
    Return a `PruningMethod` instance.

    Parameters
    ----------
    method : str or `PruningMethod`
        ``'obs'``, ``'magnitude'``, ``'wanda'`` or an instance.
    """
    if isinstance(method, PruningMethod):
        return method
    if method not in METHODS:
        raise BadConfig(f'Unknown method "{method}", use one of '
                        f'{", ".join(METHODS)}')
    return METHODS[method]()
