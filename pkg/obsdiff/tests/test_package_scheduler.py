'''
Test the packaging of layers and the pruning pipeline
'''
import os

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_equal, assert_allclose

from obsdiff import (ModelConfig, init_model, gen_calibration, gen_eval_set,
                     run_trajectory, timestep_weights, partition_into_packages,
                     collect_package_stats, PipelineConfig, PackageScheduler,
                     run_pipeline, Unstructured, SemiStructured, FfnNeurons,
                     Heads, Structured, trajectory_divergence,
                     model_to_container, write_container, load_container,
                     prune_count, finalize, prune_layer_blocked, BadConfig,
                     BadSpec, NotPositiveDefinite)
from obsdiff.package_scheduler import (basic_units, resolve_blocks,
                                       target_layers)


def small_config(**kwds):
    values = dict(hidden_dim=16, num_heads=4, ffn_dim=32, num_blocks=2,
                  latent_tokens=4, cond_tokens=2, num_steps=4, seed=0)
    values.update(kwds)
    return ModelConfig(**values)


def test_basic_units():
    model = init_model(small_config(num_blocks=3))
    units = basic_units(model)
    assert len(units) == 12
    assert units[0].name == 'b0.qkv'
    assert units[0].layer_ids == ('b0.attn.q', 'b0.attn.k', 'b0.attn.v')
    assert units[3].layer_ids == ('b0.ffn_a.down', 'b0.ffn_b.down')
    assert sorted(layer for unit in units for layer in unit.layer_ids) == \
        sorted(model.layer_ids)
    units = basic_units(model, exclude_blocks='first,last')
    assert [unit.name for unit in units] == ['b1.qkv', 'b1.out', 'b1.ffn_up',
                                             'b1.ffn_down']


def test_resolve_blocks():
    assert resolve_blocks('first,last', 4) == (0, 3)
    assert resolve_blocks(['last', 1, '1'], 4) == (1, 3)
    assert resolve_blocks(None, 4) == ()
    assert resolve_blocks('', 4) == ()
    with pytest.raises(BadConfig):
        resolve_blocks('middle', 4)
    with pytest.raises(BadConfig):
        resolve_blocks([4], 4)


def test_partition_sizes():
    model = init_model(small_config(num_blocks=3))
    sizes = [len(p.units) for p in partition_into_packages(model, 5)]
    assert sizes == [3, 3, 2, 2, 2]
    model = init_model(small_config(num_blocks=2))
    sizes = [len(p.units) for p in partition_into_packages(model, 3)]
    assert sizes == [3, 3, 2]
    packages = partition_into_packages(model, 1)
    assert len(packages) == 1
    assert sorted(packages[0].layer_ids) == sorted(model.layer_ids)
    packages = partition_into_packages(model, 8)
    assert all(len(p.units) == 1 for p in packages)
    assert [p.index for p in packages] == list(range(8))
    with pytest.raises(BadConfig):
        partition_into_packages(model, 0)
    with pytest.raises(BadConfig):
        partition_into_packages(model, 9)


def test_target_layers():
    layers = init_model(small_config(num_blocks=1)).layer_ids
    assert target_layers(Unstructured(0.5), layers) == layers
    assert target_layers(FfnNeurons(0.5), layers) == ['b0.ffn_a.down',
                                                      'b0.ffn_b.down']
    assert target_layers(Heads(0.5), layers) == ['b0.attn.out_a',
                                                 'b0.attn.out_b']
    assert len(target_layers(Structured(0.5), layers)) == 4


def test_single_step_statistic():
    config = small_config(num_steps=1)
    model = init_model(config)
    calib = gen_calibration(0, 1, config)
    package = partition_into_packages(model, 1)[0]
    weights = timestep_weights('log-decrease', 1, 0.1, 0.6)
    stats = collect_package_stats(model, package, calib, weights,
                                  layers=['b0.attn.k'])
    assert list(stats) == ['b0.attn.k']
    X = run_trajectory(model, calib[0], capture=['b0.attn.k']).activations['b0.attn.k'][0]
    assert_allclose(stats['b0.attn.k'].H, 2*0.6*X.T @ X, rtol=1e-12)


def test_statistic_matches_captured_activations():
    config = ModelConfig(num_steps=8)
    model = init_model(config)
    calib = gen_calibration(0, 16, config)
    package = partition_into_packages(model, 1)[0]
    weights = timestep_weights('log-decrease', 8)
    stats = collect_package_stats(model, package, calib, weights)
    assert set(stats) == set(model.layer_ids)
    offline = {layer: np.zeros((model.input_dim(layer),)*2)
               for layer in model.layer_ids}
    for sample in calib:
        traj = run_trajectory(model, sample, capture=model.layer_ids)
        for layer, activations in traj.activations.items():
            for t, X in enumerate(activations, start=1):
                offline[layer] += 2*weights[t]/len(calib) * X.T @ X
    for layer in model.layer_ids:
        H = stats[layer].H
        assert np.linalg.norm(H - offline[layer]) <= \
            1e-7*np.linalg.norm(offline[layer])
    again = collect_package_stats(model, package, calib, weights)
    for layer in model.layer_ids:
        assert_equal(again[layer].H, stats[layer].H)


def test_collect_errors():
    config = small_config()
    model = init_model(config)
    package = partition_into_packages(model, 1)[0]
    calib = gen_calibration(0, 2, config)
    with pytest.raises(BadConfig):
        collect_package_stats(model, package, calib, np.ones(3))
    with pytest.raises(BadConfig):
        collect_package_stats(model, package, calib[:0], np.ones(4))


def test_pipeline_config():
    config = PipelineConfig()
    assert config.num_packages == 4
    assert config.calib_size == 100
    assert config.weighting == 'log-decrease'
    assert config.rrf_k == 60
    assert config.sparsity == Unstructured(0.5)
    back = PipelineConfig.from_dict(config.to_dict())
    assert back == config
    config = PipelineConfig(sparsity=SemiStructured(2, 4), exclude_blocks=(0, ))
    assert PipelineConfig.from_dict(config.to_dict()) == config
    with pytest.raises(BadConfig):
        PipelineConfig.from_dict({'packages': 3})
    for bad in (dict(method='sparsegpt'), dict(weighting='cosine'),
                dict(num_packages=0), dict(calib_size=0), dict(damp_rel=-1),
                dict(alpha_min=0), dict(head_block='x'),
                dict(export_mode='zip'), dict(threads=0),
                dict(method='wanda', sparsity=Heads(0.5)),
                dict(sparsity=0.5)):
        with pytest.raises(BadConfig):
            PipelineConfig(**bad).validate()


def test_config_against_model():
    model = init_model(small_config(hidden_dim=18, num_heads=3))
    with pytest.raises(BadSpec) as ex:
        PipelineConfig(sparsity=SemiStructured(2, 4)).validate(model)
    assert ex.value.layer_id == 'b0.attn.q'
    with pytest.raises(BadConfig):
        PipelineConfig(num_packages=9).validate(model)
    model = init_model(small_config(num_heads=2, hidden_dim=16))
    # floor(0.99 * 2) leaves one of two heads
    PipelineConfig(sparsity=Heads(0.99)).validate(model)


def test_pipeline_unstructured():
    config = small_config()
    model = init_model(config)
    calib = gen_calibration(0, 8, config)
    before = model.checksum()
    scheduler = PackageScheduler(model, calib,
                                 PipelineConfig(calib_size=8, block_size=16))
    pruned, report = scheduler.run(callback=None)
    assert model.checksum() == before
    assert report['completed']
    assert report['calibration_passes'] == 4*8
    assert report['audit']['passed']
    assert abs(report['global_sparsity'] - 0.5) < 0.01
    for layer in pruned.layer_ids:
        W = pruned.weight(layer)
        for i1 in range(0, W.shape[1], 16):
            zeros = np.sum(W[:, i1:i1 + 16] == 0, axis=1)
            assert np.all(zeros >= prune_count(0.5, 16))
    assert len(report['layers']) == len(pruned.layer_ids)
    assert [p['package'] for p in report['packages']] == [0, 1, 2, 3]
    assert report['recon_error_total'] > 0
    assert report['peak_accumulator_bytes'] > 0
    frame = scheduler.results(format='dataframe')
    assert isinstance(frame, pd.DataFrame)
    assert sorted(frame['layer']) == sorted(pruned.layer_ids)
    assert set(frame['package']) == {0, 1, 2, 3}
    with pytest.raises(BadConfig):
        scheduler.results(format='xml')


def test_pipeline_nm():
    config = small_config()
    model = init_model(config)
    calib = gen_calibration(0, 4, config)
    pruned, report = run_pipeline(model, calib,
                                  PipelineConfig(sparsity=SemiStructured(2, 4),
                                                 calib_size=4))
    assert report['audit']['passed']
    for layer in pruned.layer_ids:
        W = pruned.weight(layer)
        zeros = (W == 0).reshape(W.shape[0], -1, 4).sum(axis=2)
        assert_equal(zeros, np.full(zeros.shape, 2))


def test_pipeline_structured():
    config = small_config(num_blocks=3)
    model = init_model(config)
    calib = gen_calibration(0, 4, config)
    pipeline = PipelineConfig(sparsity=Structured(0.5), calib_size=4,
                              num_packages=4, exclude_blocks=('first', 'last'))
    pruned, report = run_pipeline(model, calib, pipeline)
    assert report['audit']['passed']
    assert list(pruned.pruned_heads) == [1]
    assert len(pruned.pruned_heads[1]) == 2
    assert set(pruned.pruned_neurons) == {'b1.ffn_a', 'b1.ffn_b'}
    assert all(len(n) == 16 for n in pruned.pruned_neurons.values())
    for block in (0, 2):
        for layer in model.layer_ids:
            if layer.startswith(f'b{block}.'):
                assert_equal(pruned.weight(layer), model.weight(layer))
    assert report['flops']['ratio'] < 1
    assert report['pruned_heads'] == {'1': pruned.pruned_heads[1]}
    # the packages holding q/k/v and the up projections have nothing to prune
    # but still run their calibration pass
    assert report['calibration_passes'] == 4*4
    assert [p['skipped'] for p in report['packages']] == [True, False, True,
                                                          False]
    assert all('calibration_time' in p for p in report['packages'])
    sample = gen_eval_set(0, 1, config)[0]
    assert np.all(np.isfinite(run_trajectory(pruned, sample).final))


def test_pipeline_heads_split_package():
    config = small_config(num_blocks=1)
    model = init_model(config)
    calib = gen_calibration(0, 2, config)
    for packages in (1, 2, 4):
        pruned, report = run_pipeline(model, calib,
                                      PipelineConfig(sparsity=Heads(0.25),
                                                     calib_size=2,
                                                     num_packages=packages))
        assert len(pruned.pruned_heads[0]) == 1
        assert report['audit']['passed']
        assert report['calibration_passes'] == packages*2


def test_pipeline_methods():
    config = small_config()
    model = init_model(config)
    calib = gen_calibration(0, 4, config)
    eval_set = gen_eval_set(0, 4, config)
    errors = {}
    for method in ('obs', 'magnitude', 'wanda'):
        pruned, report = run_pipeline(model, calib,
                                      PipelineConfig(method=method, calib_size=4))
        assert report['audit']['passed']
        assert all(layer['method'] == method for layer in report['layers'])
        errors[method] = report['recon_error_total']
        assert np.isfinite(trajectory_divergence(model, pruned, eval_set).mean)
    assert errors['obs'] < errors['magnitude']


def test_pipeline_threads_and_determinism():
    config = small_config()
    model = init_model(config)
    calib = gen_calibration(0, 4, config)
    outputs = []
    for threads in (1, 1, 4):
        pruned, _ = run_pipeline(model, calib,
                                 PipelineConfig(calib_size=4, threads=threads))
        outputs.append(write_container(model_to_container(pruned)))
    assert outputs[0] == outputs[1] == outputs[2]


def test_pipeline_full_default():
    config = ModelConfig()
    model = init_model(config)
    calib = gen_calibration(0, 100, config)
    outputs = []
    for run in range(2):
        pruned, report = run_pipeline(model, calib, PipelineConfig())
        assert report['calibration_passes'] == 4*100
        assert abs(report['global_sparsity'] - 0.5) < 0.01
        outputs.append(write_container(model_to_container(pruned)))
    assert outputs[0] == outputs[1]


def test_package_count_insensitivity():
    config = ModelConfig()
    model = init_model(config)
    calib = gen_calibration(0, 16, config)
    eval_set = gen_eval_set(0, 16, config)
    divergence = {}
    for packages in (1, 4):
        pruned, report = run_pipeline(model, calib,
                                      PipelineConfig(calib_size=16,
                                                     num_packages=packages))
        assert report['calibration_passes'] == packages*16
        divergence[packages] = trajectory_divergence(model, pruned, eval_set).mean
    ratio = divergence[1] / divergence[4]
    assert 0.5 < ratio < 2


def test_stop_callback():
    config = small_config()
    model = init_model(config)
    calib = gen_calibration(0, 2, config)
    seen = []

    def stop_after_first(package, layer_reports, index):
        seen.append(index)
        return True

    pruned, report = run_pipeline(model, calib, PipelineConfig(calib_size=2),
                                  callback=stop_after_first)
    assert seen == [0]
    assert not report['completed']
    assert report['calibration_passes'] == 2
    assert len(report['packages']) == 1


def test_small_calibration_set():
    config = small_config()
    model = init_model(config)
    calib = gen_calibration(0, 3, config)
    scheduler = PackageScheduler(model, calib, PipelineConfig(calib_size=10))
    assert len(scheduler.calib) == 3


def test_save_hessians(tmp_path):
    config = small_config(num_blocks=1)
    model = init_model(config)
    calib = gen_calibration(0, 2, config)
    directory = str(tmp_path / 'stats')
    run_pipeline(model, calib, PipelineConfig(calib_size=2, num_packages=2,
                                              save_hessians=directory))
    assert sorted(os.listdir(directory)) == ['package_0.obsd', 'package_1.obsd']
    container = load_container(os.path.join(directory, 'package_0.obsd'))
    assert container.metadata['kind'] == 'hessians'
    assert 'b0.attn.q.H' in container
    package = partition_into_packages(model, 2)[0]
    weights = timestep_weights('log-decrease', config.num_steps)
    stats = collect_package_stats(model, package, calib, weights)
    assert_allclose(container['b0.attn.q.H'], stats['b0.attn.q'].H)


def test_error_names_layer():
    config = small_config(num_blocks=1)
    model = init_model(config)
    model.set_param('b0.norm1_a', np.zeros(16))
    model.set_param('b0.norm1_b', np.zeros(16))
    calib = gen_calibration(0, 2, config)
    # all inputs of q, k and v are zero: no damping can help
    with pytest.raises(NotPositiveDefinite) as ex:
        run_pipeline(model, calib, PipelineConfig(calib_size=2))
    assert ex.value.layer_id == 'b0.attn.q'


def test_packages_see_earlier_pruning(tmp_path):
    config = small_config()
    model = init_model(config)
    calib = gen_calibration(0, 2, config)
    directory = str(tmp_path / 'stats')
    pruned, report = run_pipeline(model, calib,
                                  PipelineConfig(calib_size=2, num_packages=2,
                                                 save_hessians=directory))
    first, second = partition_into_packages(model, 2)
    saved = load_container(os.path.join(directory, 'package_1.obsd'))
    weights = timestep_weights('log-decrease', config.num_steps)

    dense_stats = collect_package_stats(model, second, calib, weights)
    layer = second.layer_ids[0]
    assert not np.allclose(saved[f'{layer}.H'], dense_stats[layer].H)

    # earlier packages pruned, this package still dense
    mixed = model.copy()
    for layer_id in first.layer_ids:
        mixed.set_weight(layer_id, pruned.weight(layer_id))
    before = mixed.checksum()
    stats = collect_package_stats(mixed, second, calib, weights)
    assert mixed.checksum() == before
    for layer_id in second.layer_ids:
        H = stats[layer_id].H
        assert_allclose(saved[f'{layer_id}.H'], H, rtol=1e-10,
                        atol=1e-12*np.abs(H).max())


def test_zeroed_layer_changes_later_statistics():
    config = small_config()
    model = init_model(config)
    calib = gen_calibration(0, 2, config)
    first, second = partition_into_packages(model, 2)
    weights = timestep_weights('uniform', config.num_steps)
    dense = collect_package_stats(model, second, calib, weights)
    changed = model.copy()
    layer_id = first.layer_ids[-1]
    changed.set_weight(layer_id, np.zeros_like(model.weight(layer_id)))
    stats = collect_package_stats(changed, second, calib, weights)
    assert any(not np.allclose(stats[layer].H, dense[layer].H)
               for layer in second.layer_ids)


def test_weight_scale_keeps_ranking():
    config = small_config(num_blocks=1)
    model = init_model(config)
    calib = gen_calibration(0, 3, config)
    package = partition_into_packages(model, 1)[0]
    weights = timestep_weights('log-decrease', config.num_steps)
    c = 3.0
    stats = collect_package_stats(model, package, calib, weights.values)
    scaled = collect_package_stats(model, package, calib, c*weights.values)
    for layer_id in ('b0.attn.v', 'b0.ffn_b.down'):
        H = stats[layer_id].H
        assert_allclose(scaled[layer_id].H, c*H, rtol=1e-10,
                        atol=1e-12*np.abs(H).max())
        W = model.weight(layer_id)
        result = prune_layer_blocked(W, finalize(stats[layer_id]),
                                     Unstructured(0.5))
        other = prune_layer_blocked(W, finalize(scaled[layer_id]),
                                    Unstructured(0.5))
        assert_equal(other.keep_mask, result.keep_mask)
