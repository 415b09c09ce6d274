'''
A small joint-attention diffusion transformer and a deterministic sampler.

The model mirrors the layer structure of a multi-modal diffusion transformer:
a latent stream and a condition stream are normalized, concatenated and
processed by shared attention heads; the attention output is split back into
the two streams and fed through modality-specific output projections and
feed-forward networks. Only the latent stream's residual updates form the
model output.

Linear layers are addressed by ``LayerId`` strings of the form
``b<block>.<path>``, e.g. ``b0.attn.q``, ``b0.attn.out_a`` or
``b1.ffn_b.down``.
'''
import hashlib
from dataclasses import dataclass, asdict, fields

import numpy as np
from brian2.utils.logger import get_logger

from .errors import (BadConfig, BadStep, ShapeMismatch, UnknownLayer,
                     MissingRecord)
from .tensor_store import Container, NUMPY_DTYPES

logger = get_logger(__name__)

ATTN_PATHS = ('attn.q', 'attn.k', 'attn.v', 'attn.out_a', 'attn.out_b')
FFN_PATHS = ('ffn_a.up', 'ffn_a.down', 'ffn_b.up', 'ffn_b.down')
LINEAR_PATHS = ATTN_PATHS + FFN_PATHS
NORM_PATHS = ('norm1_a', 'norm1_b', 'norm2_a', 'norm2_b')
# Layers writing into the residual stream, initialized with a smaller std
OUTPUT_PATHS = ('attn.out_a', 'attn.out_b', 'ffn_a.down', 'ffn_b.down')
STREAMS = ('a', 'b')

INIT_STD = 0.02
LN_EPS = 1e-5
CALIBRATION_STREAM = 0
EVAL_STREAM = 1


@dataclass
class ModelConfig(object):
    """
    Shape and seed of a `ToyModel`.

    Parameters
    ----------
    hidden_dim : int
        Model width ``D``.
    num_heads : int
        Number of attention heads ``H``; ``D`` has to be divisible by ``H``.
    ffn_dim : int
        Hidden width ``F`` of the feed-forward networks.
    num_blocks : int
        Number of transformer blocks.
    latent_tokens, cond_tokens : int
        Number of tokens in the latent and in the condition stream.
    num_steps : int
        Number of denoising steps ``T``.
    seed : int
        Seed for the weight initialization.
    dtype : str
        Storage dtype of the weights, ``'f32'`` or ``'f64'``. Computation is
        always carried out in double precision.
    """
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 128
    num_blocks: int = 2
    latent_tokens: int = 8
    cond_tokens: int = 4
    num_steps: int = 8
    seed: int = 0
    dtype: str = 'f32'

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads

    @property
    def tokens_total(self):
        return self.latent_tokens + self.cond_tokens

    def validate(self):
        for name in ('hidden_dim', 'num_heads', 'ffn_dim', 'num_blocks',
                     'latent_tokens', 'cond_tokens', 'num_steps'):
            value = getattr(self, name)
            try:
                valid = int(value) == value and value >= 1
            except (TypeError, ValueError):
                valid = False
            if not valid:
                raise BadConfig(f'"{name}" has to be a positive integer, '
                                f'got {value!r}')
        if self.hidden_dim % self.num_heads != 0:
            raise BadConfig(f'hidden_dim={self.hidden_dim} is not divisible '
                            f'by num_heads={self.num_heads}')
        if self.dtype not in NUMPY_DTYPES:
            raise BadConfig(f'Unknown dtype "{self.dtype}"')
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        if not isinstance(values, dict):
            raise BadConfig('Model config has to be a dictionary')
        unknown = set(values) - known
        if unknown:
            raise BadConfig(f'Unknown model config entries: {sorted(unknown)}')
        return cls(**values)


def param_shapes(config):
    """Ordered mapping of parameter name to shape for ``config``"""
    D, F = config.hidden_dim, config.ffn_dim
    shapes = {}
    for block in range(config.num_blocks):
        for path in ATTN_PATHS:
            shapes[f'b{block}.{path}'] = (D, D)
        for stream in STREAMS:
            shapes[f'b{block}.ffn_{stream}.up'] = (F, D)
            shapes[f'b{block}.ffn_{stream}.down'] = (D, F)
        for path in NORM_PATHS:
            shapes[f'b{block}.{path}'] = (D,)
    shapes['temb'] = (config.num_steps, D)
    return shapes


def block_of(layer_id):
    """Block index of a ``LayerId`` (``'b1.attn.q'`` -> 1)"""
    try:
        return int(layer_id.split('.', 1)[0][1:])
    except (ValueError, IndexError):
        raise UnknownLayer(f'Malformed layer id "{layer_id}"')


class ToyModel(object):
    """
    Weights of the toy joint-attention denoiser.

    Parameters
    ----------
    config : `ModelConfig`
    params : dict
        Mapping of parameter name to array, as produced by `init_model`.

    Notes
    -----
    The model keeps track of structurally removed attention heads
    (``pruned_heads``, block index to head list) and FFN neurons
    (``pruned_neurons``, ``'b0.ffn_a'`` to neuron list) so that audits and the
    shrunk export know which slices are dead.
    """
    def __init__(self, config, params):
        self.config = config
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise BadConfig(f'Parameters do not match the config (missing: '
                            f'{missing}, unexpected: {extra})')
        dtype = NUMPY_DTYPES[config.dtype]
        self.params = {}
        for name in expected:
            value = np.asarray(params[name])
            if value.shape != expected[name]:
                raise ShapeMismatch(f'Parameter "{name}" has shape '
                                    f'{value.shape}, expected {expected[name]}')
            self.params[name] = np.array(value, dtype=dtype)
        self.pruned_heads = {}
        self.pruned_neurons = {}
        self._float_params = None

    @property
    def layer_ids(self):
        """All linear layers in forward topological order"""
        return [f'b{block}.{path}' for block in range(self.config.num_blocks)
                for path in LINEAR_PATHS]

    def has_layer(self, layer_id):
        return layer_id in self.params and layer_id.split('.', 1)[-1] in LINEAR_PATHS

    def check_layer(self, layer_id):
        if not self.has_layer(layer_id):
            raise UnknownLayer(f'The model has no linear layer "{layer_id}"')

    def weight(self, layer_id):
        """Weight matrix (out x in) of a linear layer"""
        self.check_layer(layer_id)
        return self.params[layer_id]

    def set_weight(self, layer_id, value):
        """Replace the weight of a linear layer, cast to the model dtype"""
        self.check_layer(layer_id)
        self.set_param(layer_id, value)

    def set_param(self, name, value):
        if name not in self.params:
            raise UnknownLayer(f'The model has no parameter "{name}"')
        value = np.asarray(value)
        if value.shape != self.params[name].shape:
            raise ShapeMismatch(f'Parameter "{name}" has shape '
                                f'{self.params[name].shape}, got {value.shape}')
        self.params[name] = np.array(value, dtype=self.params[name].dtype)
        self._float_params = None

    def float_params(self):
        """Double precision view of all parameters (cached)"""
        if self._float_params is None:
            self._float_params = {name: value.astype(np.float64)
                                  for name, value in self.params.items()}
        return self._float_params

    def input_dim(self, layer_id):
        return self.weight(layer_id).shape[1]

    def num_parameters(self):
        return int(sum(value.size for value in self.params.values()))

    def checksum(self):
        """SHA-256 over all parameters, in a fixed order"""
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode('utf-8'))
            digest.update(self.params[name].tobytes())
        return digest.hexdigest()

    def copy(self):
        model = ToyModel(self.config, self.params)
        model.pruned_heads = {block: list(heads)
                              for block, heads in self.pruned_heads.items()}
        model.pruned_neurons = {ffn: list(neurons)
                                for ffn, neurons in self.pruned_neurons.items()}
        return model

    def __repr__(self):
        return (f'ToyModel(D={self.config.hidden_dim}, '
                f'H={self.config.num_heads}, F={self.config.ffn_dim}, '
                f'blocks={self.config.num_blocks}, T={self.config.num_steps})')


def init_model(config):
    """
    Create a model with seeded Gaussian weights.

    All linear weights are drawn with std 0.02; the projections writing into
    the residual stream are additionally scaled by ``1/sqrt(num_blocks)``.
    Layer-norm gains start at one.

    Parameters
    ----------
    config : `ModelConfig`

    Returns
    -------
    `ToyModel`
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        path = name.split('.', 1)[-1]
        if path in NORM_PATHS:
            params[name] = np.ones(shape)
            continue
        std = INIT_STD
        if path in OUTPUT_PATHS:
            std /= np.sqrt(config.num_blocks)
        params[name] = rng.standard_normal(shape) * std
    return ToyModel(config, params)


def layer_norm(x, gain):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean)**2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * gain


def gelu(x):
    return 0.5*x*(1 + np.tanh(np.sqrt(2/np.pi)*(x + 0.044715*x**3)))


def ffn_forward(x, w_up, w_down):
    """Feed-forward network ``gelu(x W_up^T) W_down^T``"""
    return gelu(x @ w_up.T) @ w_down.T


def joint_attention(q, k, v, num_heads):
    """
    Multi-head softmax attention over all tokens of both streams.

    Head ``j`` uses the contiguous channels ``j*d .. (j+1)*d`` of ``q``,
    ``k`` and ``v``, and writes the same channels of the result.
    """
    n_tokens, width = q.shape
    d = width // num_heads
    qh = q.reshape(n_tokens, num_heads, d).transpose(1, 0, 2)
    kh = k.reshape(n_tokens, num_heads, d).transpose(1, 0, 2)
    vh = v.reshape(n_tokens, num_heads, d).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(d)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    return (weights @ vh).transpose(1, 0, 2).reshape(n_tokens, width)


def model_output(model, state, cond, t, hook=None):
    """
    One transformer pass, returns the latent stream's accumulated update.

    Parameters
    ----------
    model : `ToyModel`
    state : `~numpy.ndarray`
        Latent tokens, shape ``(latent_tokens, D)``.
    cond : `~numpy.ndarray`
        Condition tokens, shape ``(cond_tokens, D)``.
    t : int
        Step index in ``1..T``.
    hook : callable, optional
        Called as ``hook(layer_id, t, X)`` with the input matrix ``X``
        (tokens x features) of every linear layer before it is applied.
    """
    config = model.config
    p = model.float_params()
    n_latent = config.latent_tokens

    def linear(layer_id, x):
        if hook is not None:
            hook(layer_id, t, x)
        return x @ p[layer_id].T

    h_a = state + p['temb'][t - 1]
    h_b = np.array(cond, dtype=np.float64)
    output = np.zeros_like(h_a)
    for block in range(config.num_blocks):
        pre = f'b{block}.'
        z = np.concatenate([layer_norm(h_a, p[pre + 'norm1_a']),
                            layer_norm(h_b, p[pre + 'norm1_b'])])
        attn = joint_attention(linear(pre + 'attn.q', z),
                               linear(pre + 'attn.k', z),
                               linear(pre + 'attn.v', z),
                               config.num_heads)
        update_a = linear(pre + 'attn.out_a', attn[:n_latent])
        h_b = h_b + linear(pre + 'attn.out_b', attn[n_latent:])
        h_a = h_a + update_a
        output += update_a

        hidden = gelu(linear(pre + 'ffn_a.up',
                             layer_norm(h_a, p[pre + 'norm2_a'])))
        update_a = linear(pre + 'ffn_a.down', hidden)
        h_a = h_a + update_a
        output += update_a
        hidden = gelu(linear(pre + 'ffn_b.up',
                             layer_norm(h_b, p[pre + 'norm2_b'])))
        h_b = h_b + linear(pre + 'ffn_b.down', hidden)
    return output


def _check_inputs(config, state, cond):
    expected = (config.latent_tokens, config.hidden_dim)
    if np.shape(state) != expected:
        raise ShapeMismatch(f'Latent state has shape {np.shape(state)}, '
                            f'expected {expected}')
    expected = (config.cond_tokens, config.hidden_dim)
    if np.shape(cond) != expected:
        raise ShapeMismatch(f'Condition tokens have shape {np.shape(cond)}, '
                            f'expected {expected}')


def denoise_step(model, state, cond, t, hook=None):
    """
    Apply one deterministic sampler step ``x <- x - model_output / T``.

    Parameters
    ----------
    model : `ToyModel`
    state : `~numpy.ndarray`
        Latent tokens before the step.
    cond : `~numpy.ndarray`
        Condition tokens.
    t : int
        Step index, ``1 <= t <= T``.
    hook : callable, optional
        See `model_output`.

    Returns
    -------
    `~numpy.ndarray`
        Latent tokens after the step (double precision).
    """
    config = model.config
    if int(t) != t or not 1 <= t <= config.num_steps:
        raise BadStep(f'Step {t} is outside 1..{config.num_steps}')
    _check_inputs(config, state, cond)
    state = np.asarray(state, dtype=np.float64)
    gamma = 1.0 / config.num_steps
    return state - gamma * model_output(model, state, cond, int(t), hook=hook)


@dataclass(eq=False)
class Trajectory(object):
    """Result of `run_trajectory`"""
    final: np.ndarray
    # layer id -> list of T input matrices (tokens x features), step order
    activations: dict


def run_trajectory(model, sample, capture=None, hook=None):
    """
    Run the full denoising trajectory ``t = 1..T`` for one sample.

    Parameters
    ----------
    model : `ToyModel`
    sample : `CalibrationSample`
    capture : iterable of str, optional
        Layers whose input matrices should be recorded at every step.
    hook : callable, optional
        Additional ``hook(layer_id, t, X)`` forwarded to every step.

    Returns
    -------
    `Trajectory`
    """
    capture = set() if capture is None else set(capture)
    for layer_id in capture:
        model.check_layer(layer_id)
    activations = {layer_id: [] for layer_id in sorted(capture)}

    def capture_hook(layer_id, t, x):
        if layer_id in activations:
            activations[layer_id].append(np.array(x, copy=True))
        if hook is not None:
            hook(layer_id, t, x)

    step_hook = capture_hook if (capture or hook is not None) else None
    state = np.asarray(sample.latent, dtype=np.float64)
    for t in range(1, model.config.num_steps + 1):
        state = denoise_step(model, state, sample.cond, t, hook=step_hook)
    return Trajectory(final=state, activations=activations)


@dataclass(eq=False)
class CalibrationSample(object):
    sample_id: int
    latent: np.ndarray
    cond: np.ndarray


class CalibrationSet(object):
    """
    Seeded latent noise and condition tokens.

    Parameters
    ----------
    seed : int
        Seed the samples were generated from.
    samples : list of `CalibrationSample`
    stream : int
        Seed stream (calibration and evaluation sets use different streams so
        they never share samples).
    """
    def __init__(self, seed, samples, stream=CALIBRATION_STREAM):
        self.seed = seed
        self.samples = list(samples)
        self.stream = stream

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return CalibrationSet(self.seed, self.samples[item], self.stream)
        return self.samples[item]


def gen_calibration(seed, n_samples, config=None, stream=CALIBRATION_STREAM):
    """
    Generate a calibration set.

    Every sample draws from its own child of
    ``numpy.random.SeedSequence([seed, stream])``, so sub-seeds never
    overlap and regenerating with the same seed is bit-identical.

    Parameters
    ----------
    seed : int
    n_samples : int
        At least 1.
    config : `ModelConfig`, optional
        Provides the token counts and width; defaults to ``ModelConfig()``.
    stream : int, optional
        Seed stream, see `CalibrationSet`.

    Returns
    -------
    `CalibrationSet`
    """
    if config is None:
        config = ModelConfig()
    if int(n_samples) != n_samples or n_samples < 1:
        raise BadConfig(f'Need at least one calibration sample, got {n_samples}')
    if int(seed) != seed or seed < 0:
        raise BadConfig(f'Seeds have to be non-negative integers, got {seed!r}')
    children = np.random.SeedSequence([int(seed), int(stream)]).spawn(int(n_samples))
    samples = []
    for index, child in enumerate(children):
        rng = np.random.default_rng(child)
        latent = rng.standard_normal((config.latent_tokens, config.hidden_dim))
        cond = rng.standard_normal((config.cond_tokens, config.hidden_dim))
        samples.append(CalibrationSample(index, latent, cond))
    return CalibrationSet(seed, samples, stream=stream)


def gen_eval_set(seed, n_samples, config=None):
    """Evaluation samples, drawn from a seed stream disjoint from calibration"""
    return gen_calibration(seed, n_samples, config=config, stream=EVAL_STREAM)


def _kept(total, removed):
    removed = set(removed)
    return [i for i in range(total) if i not in removed]


def model_to_container(model, shrink=False, metadata=None):
    """
    Store a model in a `Container`.

    Parameters
    ----------
    model : `ToyModel`
    shrink : bool, optional
        Physically remove dead heads and FFN neurons. The kept channel and
        neuron indices are written to the metadata (``index_maps``) so that
        `model_from_container` can restore the original shapes.
    metadata : dict, optional
        Additional metadata (e.g. the pipeline configuration).
    """
    config = model.config
    meta = dict(metadata or {})
    meta.update({'kind': 'model',
                 'config': config.to_dict(),
                 'export': 'shrunk' if shrink else 'masked',
                 'pruned_heads': {str(block): sorted(heads)
                                  for block, heads in model.pruned_heads.items()},
                 'pruned_neurons': {ffn: sorted(neurons) for ffn, neurons
                                    in model.pruned_neurons.items()}})
    container = Container(metadata=meta)
    index_maps = {}
    d = config.head_dim
    for name in param_shapes(config):
        value = model.params[name]
        if shrink and name.split('.', 1)[-1] in LINEAR_PATHS:
            block = block_of(name)
            prefix, path = name.split('.', 1)
            if path.startswith('attn.'):
                heads = _kept(config.num_heads, model.pruned_heads.get(block, []))
                channels = [j*d + c for j in heads for c in range(d)]
                index_maps[f'{prefix}.attn'] = channels
                if path in ('attn.q', 'attn.k', 'attn.v'):
                    value = value[channels, :]
                else:
                    value = value[:, channels]
            else:
                ffn = name.rsplit('.', 1)[0]
                neurons = _kept(config.ffn_dim, model.pruned_neurons.get(ffn, []))
                index_maps[ffn] = neurons
                value = value[neurons, :] if path.endswith('.up') else value[:, neurons]
        container.add(name, value, dtype=config.dtype)
    if shrink:
        container.metadata['index_maps'] = index_maps
    return container


def model_from_container(container):
    """Inverse of `model_to_container`; shrunk models are re-expanded"""
    meta = container.metadata
    if meta.get('kind') != 'model':
        raise BadConfig(f'Container holds "{meta.get("kind")}", not a model')
    if not isinstance(meta.get('config'), dict):
        raise MissingRecord('Model container has no "config" entry')
    config = ModelConfig.from_dict(meta['config'])
    config.validate()
    shapes = param_shapes(config)
    index_maps = meta.get('index_maps', {})
    params = {}
    for name, shape in shapes.items():
        value = np.asarray(container[name], dtype=np.float64)
        if value.shape != shape:
            prefix, _, path = name.partition('.')
            key = f'{prefix}.attn' if path.startswith('attn.') else name.rsplit('.', 1)[0]
            if path not in LINEAR_PATHS or key not in index_maps:
                raise ShapeMismatch(f'Parameter "{name}" has shape '
                                    f'{value.shape}, expected {shape}')
            index = index_maps[key]
            rows = path in ('attn.q', 'attn.k', 'attn.v') or path.endswith('.up')
            limit = shape[0] if rows else shape[1]
            if not isinstance(index, list) or not all(
                    isinstance(i, int) and 0 <= i < limit for i in index):
                raise ShapeMismatch(f'Index map "{key}" has entries outside '
                                    f'0..{limit - 1}')
            expected = (len(index), shape[1]) if rows else (shape[0], len(index))
            if value.shape != expected:
                raise ShapeMismatch(f'Parameter "{name}" has shape '
                                    f'{value.shape}, expected {expected} '
                                    f'from the index map "{key}"')
            full = np.zeros(shape)
            if rows:
                full[index, :] = value
            else:
                full[:, index] = value
            value = full
        params[name] = value
    model = ToyModel(config, params)
    model.pruned_heads = {int(block): list(heads)
                          for block, heads in meta.get('pruned_heads', {}).items()}
    model.pruned_neurons = {ffn: list(neurons) for ffn, neurons
                            in meta.get('pruned_neurons', {}).items()}
    return model


def calibration_to_container(calib, metadata=None):
    """Store a `CalibrationSet` (double precision) in a `Container`"""
    meta = dict(metadata or {})
    meta.update({'kind': 'calibration', 'seed': calib.seed,
                 'stream': calib.stream, 'n_samples': len(calib),
                 'sample_ids': [s.sample_id for s in calib]})
    container = Container(metadata=meta)
    for sample in calib:
        container.add(f'sample.{sample.sample_id}.latent', sample.latent, 'f64')
        container.add(f'sample.{sample.sample_id}.cond', sample.cond, 'f64')
    return container


def calibration_from_container(container):
    meta = container.metadata
    if meta.get('kind') != 'calibration':
        raise BadConfig(f'Container holds "{meta.get("kind")}", not a '
                        f'calibration set')
    for key in ('seed', 'sample_ids'):
        if key not in meta:
            raise MissingRecord(f'Calibration container has no "{key}" entry')
    samples = [CalibrationSample(sample_id,
                                 container[f'sample.{sample_id}.latent'],
                                 container[f'sample.{sample_id}.cond'])
               for sample_id in meta['sample_ids']]
    return CalibrationSet(meta['seed'], samples, stream=meta.get('stream', 0))
