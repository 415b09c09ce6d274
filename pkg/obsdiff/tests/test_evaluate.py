'''
Test reconstruction errors, trajectory divergence and the sparsity audit
'''
import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_equal, assert_allclose

from obsdiff import (layer_recon_error, MSEMetric, MaxAbsMetric,
                     trajectory_divergence, sparsity_report,
                     theoretical_flops, evaluate_models, ModelConfig,
                     init_model, gen_eval_set, run_trajectory,
                     SemiStructured, Unstructured, BadConfig, ShapeMismatch)


def small_model(seed=0, **kwds):
    values = dict(hidden_dim=16, num_heads=4, ffn_dim=32, num_blocks=2,
                  latent_tokens=4, cond_tokens=2, num_steps=4, seed=seed)
    values.update(kwds)
    return init_model(ModelConfig(**values))


def test_recon_error_closed_form():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((3, 5))
    assert layer_recon_error(W, W, np.eye(5)) == 0
    W_hat = W.copy()
    W_hat[0, 2] -= 1.5
    assert_allclose(layer_recon_error(W, W_hat, 2*np.eye(5)), 1.5**2)
    with pytest.raises(ShapeMismatch):
        layer_recon_error(W, W[:, :4], np.eye(5))
    with pytest.raises(ShapeMismatch):
        layer_recon_error(W, W, np.eye(4))


def test_recon_error_activation_replay():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 40))
    W = rng.standard_normal((4, 6))
    W_hat = np.where(rng.uniform(size=W.shape) < 0.5, 0, W)
    H = 2*X @ X.T
    expected = np.sum((W @ X - W_hat @ X)**2)
    assert_allclose(layer_recon_error(W, W_hat, H), expected, rtol=1e-6)


def test_metrics():
    pruned = np.zeros((2, 3, 4))
    dense = np.zeros((2, 3, 4))
    dense[1] = 2
    assert_equal(MSEMetric().calc(pruned, dense), [0, 4])
    assert_equal(MSEMetric(normalization=2).calc(pruned, dense), [0, 2])
    dense[1, 0, 0] = 5
    assert_equal(MaxAbsMetric().calc(pruned, dense), [0, 5])
    with pytest.raises(BadConfig):
        MSEMetric(normalization=0)


def test_divergence_identical():
    model = small_model()
    eval_set = gen_eval_set(0, 4, model.config)
    stats = trajectory_divergence(model, model.copy(), eval_set)
    assert stats.mean == 0
    assert stats.max == 0
    assert_equal(stats.per_sample, np.zeros(4))
    assert stats.sample_ids == [0, 1, 2, 3]


def test_divergence_values():
    dense = small_model(1)
    pruned = dense.copy()
    W = np.array(pruned.weight('b1.ffn_a.down'))
    W[:, :16] = 0
    pruned.set_weight('b1.ffn_a.down', W)
    eval_set = gen_eval_set(3, 5, dense.config)
    stats = trajectory_divergence(dense, pruned, eval_set)
    expected = [np.mean((run_trajectory(pruned, s).final -
                         run_trajectory(dense, s).final)**2) for s in eval_set]
    assert_allclose(stats.per_sample, expected)
    assert stats.mean > 0
    assert stats.max == max(stats.per_sample)
    again = trajectory_divergence(dense, pruned, eval_set)
    assert_equal(again.per_sample, stats.per_sample)
    frame = stats.to_dataframe()
    assert list(frame.columns) == ['sample_id', 'divergence']
    assert len(frame) == 5


def test_divergence_first_vs_last_block():
    dense = small_model(2)
    eval_set = gen_eval_set(1, 4, dense.config)
    results = []
    for block in (0, 1):
        pruned = dense.copy()
        W = np.array(pruned.weight(f'b{block}.ffn_a.down'))
        W[:, ::2] = 0
        pruned.set_weight(f'b{block}.ffn_a.down', W)
        results.append(trajectory_divergence(dense, pruned, eval_set).mean)
    assert all(np.isfinite(results))
    assert all(r > 0 for r in results)


def test_divergence_errors():
    model = small_model()
    other = small_model(hidden_dim=8, num_heads=2)
    eval_set = gen_eval_set(0, 2, model.config)
    with pytest.raises(BadConfig):
        trajectory_divergence(model, other, eval_set)
    with pytest.raises(BadConfig):
        trajectory_divergence(model, model, eval_set[:0])


def test_divergence_csv(tmp_path):
    model = small_model()
    stats = trajectory_divergence(model, model, gen_eval_set(0, 3, model.config))
    filename = tmp_path / 'divergence.csv'
    stats.to_csv(filename)
    frame = pd.read_csv(filename)
    assert_equal(frame['sample_id'].tolist(), [0, 1, 2])
    assert_equal(frame['divergence'].tolist(), [0, 0, 0])


def test_audit_dense():
    model = small_model()
    audit = sparsity_report(model)
    assert audit.passed
    assert audit.global_sparsity == 0
    assert all(value == 0 for value in audit.layers.values())
    assert not sparsity_report(model, Unstructured(0.5)).passed


def _two_four(model, layers):
    for layer_id in layers:
        W = np.array(model.weight(layer_id))
        W.reshape(W.shape[0], -1, 4)[:, :, :2] = 0
        model.set_weight(layer_id, W)


def test_audit_nm():
    model = small_model()
    _two_four(model, model.layer_ids)
    audit = sparsity_report(model, SemiStructured(2, 4))
    assert audit.passed
    assert_allclose(audit.global_sparsity, 0.5)
    W = np.array(model.weight('b1.attn.v'))
    W[3, 9] = 0.5
    model.set_weight('b1.attn.v', W)
    audit = sparsity_report(model, SemiStructured(2, 4))
    assert not audit.passed
    assert audit.nm_violations == [('b1.attn.v', 3, 2)]
    # only the listed layers are checked
    audit = sparsity_report(model, SemiStructured(2, 4), layers=['b0.attn.q'])
    assert audit.passed


def test_audit_nm_indivisible():
    model = small_model()
    audit = sparsity_report(model, SemiStructured(2, 3), layers=['b0.attn.q'])
    assert audit.nm_violations == [('b0.attn.q', -1, -1)]


def test_audit_structural():
    model = small_model()
    model.pruned_heads = {0: [1]}
    model.pruned_neurons = {'b1.ffn_b': [0, 5]}
    audit = sparsity_report(model)
    assert not audit.passed
    layers = {layer for layer, _ in audit.structural_violations}
    assert layers == {'b0.attn.q', 'b0.attn.k', 'b0.attn.v', 'b0.attn.out_a',
                      'b0.attn.out_b', 'b1.ffn_b.up', 'b1.ffn_b.down'}
    for path in ('q', 'k', 'v'):
        W = np.array(model.weight(f'b0.attn.{path}'))
        W[4:8] = 0
        model.set_weight(f'b0.attn.{path}', W)
    for path in ('out_a', 'out_b'):
        W = np.array(model.weight(f'b0.attn.{path}'))
        W[:, 4:8] = 0
        model.set_weight(f'b0.attn.{path}', W)
    up = np.array(model.weight('b1.ffn_b.up'))
    up[[0, 5]] = 0
    model.set_weight('b1.ffn_b.up', up)
    down = np.array(model.weight('b1.ffn_b.down'))
    down[:, [0, 5]] = 0
    model.set_weight('b1.ffn_b.down', down)
    assert sparsity_report(model).passed
    as_dict = sparsity_report(model).to_dict()
    assert as_dict['passed']
    json.dumps(as_dict)


def test_flops():
    model = small_model()
    flops = theoretical_flops(model)
    assert flops['dense'] == flops['pruned']
    assert flops['ratio'] == 1
    assert flops['dense_per_trajectory'] == 4*flops['dense']
    model.pruned_heads = {0: [0, 1]}
    model.pruned_neurons = {'b1.ffn_a': list(range(16))}
    pruned = theoretical_flops(model)
    assert pruned['dense'] == flops['dense']
    assert pruned['pruned'] < flops['dense']
    # two of four heads in block 0: 8 of 16 channels; half of ffn_a in block 1
    n, n_a, D = 6, 4, 16
    saved = 3*n*D*8 + 2*n*n*8 + n*8*D + 2*D*n_a*16
    assert pruned['pruned'] == flops['dense'] - saved


def test_evaluate_models():
    dense = small_model(3)
    pruned = dense.copy()
    _two_four(pruned, ['b0.attn.q'])
    eval_set = gen_eval_set(2, 3, dense.config)
    report = evaluate_models(dense, pruned, eval_set, spec=SemiStructured(2, 4),
                             layers=['b0.attn.q'],
                             recon_errors={'b0.attn.q': 0.1},
                             config={'method': 'obs'})
    values = json.loads(report.to_json())
    assert values['sparsity']['passed']
    assert values['seeds'] == {'eval_seed': 2, 'model_seed': 3}
    assert values['recon_errors'] == {'b0.attn.q': 0.1}
    assert values['config'] == {'method': 'obs'}
    assert len(values['divergence']['per_sample']) == 3
    assert values['divergence']['mean'] > 0
