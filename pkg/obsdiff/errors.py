'''
Exceptions raised by obsdiff.

Every error derives from `ObsDiffError` and from the builtin exception that
describes it best, so ``except ValueError`` keeps working for callers that do
not care about the specific kind.
'''


class ObsDiffError(Exception):
    """
    Base class of all obsdiff errors.

    Parameters
    ----------
    message : str
        Human-readable description.
    layer_id : str, optional
        Identifier of the layer that was being processed, if any. The pipeline
        fills it in when an error escapes from a single layer.
    """
    def __init__(self, message='', layer_id=None):
        super(ObsDiffError, self).__init__(message)
        self.message = message
        self.layer_id = layer_id

    def __str__(self):
        if self.layer_id is not None:
            return f'{self.layer_id}: {self.message}'
        return self.message


class ContainerError(ObsDiffError, ValueError):
    """Malformed ``.obsd`` container."""


class NotAContainer(ContainerError):
    pass


class Truncated(ContainerError):
    pass


class UnknownDtype(ContainerError):
    pass


class DuplicateName(ContainerError):
    pass


class BadShape(ContainerError):
    pass


class MissingRecord(ContainerError, KeyError):
    """Tensor or metadata entry absent from a container."""


class BadConfig(ObsDiffError, ValueError):
    """Invalid configuration value."""


class BadSpec(BadConfig):
    """Sparsity request that cannot be applied to a layer."""


class BadStep(ObsDiffError, ValueError):
    """Denoising step index outside ``1..T``."""


class ShapeMismatch(ObsDiffError, ValueError):
    pass


class UnknownLayer(ObsDiffError, LookupError):
    pass


class NotPositiveDefinite(ObsDiffError, ValueError):
    """Cholesky factorisation failed even after damping."""


class NotFinalized(ObsDiffError, RuntimeError):
    pass
