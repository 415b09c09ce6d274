'''
Command-line interface: ``obsdiff <command> [options]``.

Commands
--------
gen-model   create a seeded toy model
gen-calib   create a seeded calibration set for a model
prune       run the package pipeline and write the pruned model and report
eval        compare a pruned model with its dense original
inspect     print the sparsity audit of a model
ablate      run one of the ablation sweeps and write a CSV table

Every command accepts ``--config file.json`` whose entries (named like the
long options, with dashes or underscores) replace the defaults; options given
on the command line win. Seed options fall back to the ``OBSD_SEED``
environment variable, then to 0. Errors are reported as a single JSON line on
stderr with exit code 1; invalid usage exits with code 2.
'''
import argparse
import json
import os
import sys

import numpy as np
from brian2.utils.logger import get_logger

from .errors import ObsDiffError, BadConfig
from .version import version
from .hessian import WEIGHTING_SCHEMES
from .tensor_store import load_container, save_container
from .toy_diffusion import (ModelConfig, init_model, gen_calibration,
                            gen_eval_set, model_to_container,
                            model_from_container, calibration_to_container,
                            calibration_from_container)
from .obs_unstructured import parse_sparsity, spec_from_dict
from .obs_structured import HEAD_BLOCK_MODES
from .methods import METHODS
from .package_scheduler import (PipelineConfig, PackageScheduler,
                                resolve_blocks, EXPORT_MODES)
from .evaluate import evaluate_models, sparsity_report
from . import ablation

logger = get_logger(__name__)

SEED_ENV = 'OBSD_SEED'
ABLATION_AXES = ('sparsity', 'weighting', 'packages', 'calibration')


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f'{type(value).__name__} is not JSON serializable')


def to_json(values, indent=2):
    return json.dumps(values, indent=indent, sort_keys=True,
                      default=_json_default)


def resolve_seed(value):
    """Seed from the command line, else from ``OBSD_SEED``, else 0"""
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        seed = int(env)
    except ValueError:
        raise BadConfig(f'{SEED_ENV}={env!r} is not an integer')
    if seed < 0:
        raise BadConfig(f'{SEED_ENV} has to be non-negative, got {seed}')
    return seed


def _write_output(text, filename):
    if filename in (None, '-'):
        print(text)
    else:
        with open(filename, 'w') as f:
            f.write(text + '\n')
        logger.info(f'Wrote {filename}')


def _add_pipeline_options(parser):
    parser.add_argument('--pattern', default='unstructured',
                        help='unstructured, N:M (e.g. 2:4), ffn, heads or '
                             'structured (default: %(default)s)')
    parser.add_argument('--sparsity', type=float, default=0.5,
                        help='sparsity ratio (default: %(default)s)')
    parser.add_argument('--method', choices=sorted(METHODS), default='obs')
    parser.add_argument('--packages', type=int, default=4,
                        help='number of module packages (default: %(default)s)')
    parser.add_argument('--weighting', choices=WEIGHTING_SCHEMES,
                        default='log-decrease')
    parser.add_argument('--alpha-min', type=float, default=0.1)
    parser.add_argument('--alpha-max', type=float, default=1.0)
    parser.add_argument('--damp', type=float, default=0.01,
                        help='damping relative to the mean diagonal')
    parser.add_argument('--calib-size', type=int, default=100)
    parser.add_argument('--block-size', type=int, default=32)
    parser.add_argument('--rrf-k', type=int, default=60)
    parser.add_argument('--head-block', choices=HEAD_BLOCK_MODES,
                        default='submatrix')
    parser.add_argument('--exclude-blocks', default='',
                        help='comma-separated block indices, "first", "last"')
    parser.add_argument('--threads', type=int, default=1)


def build_parser():
    """The argument parser and a mapping of command name to subparser"""
    parser = argparse.ArgumentParser(
        prog='obsdiff',
        description='One-shot OBS pruning of a toy joint-attention '
                    'diffusion transformer.')
    parser.add_argument('--version', action='version',
                        version=f'%(prog)s {version}')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True
    subparsers = {}

    def add(name, help):
        sub = commands.add_parser(name, help=help)
        sub.add_argument('--config', help='JSON file with default options')
        subparsers[name] = sub
        return sub

    sub = add('gen-model', 'create a seeded toy model')
    sub.add_argument('--out', required=True)
    sub.add_argument('--seed', type=int, default=None)
    sub.add_argument('--hidden-dim', type=int, default=32)
    sub.add_argument('--heads', type=int, default=4)
    sub.add_argument('--ffn-dim', type=int, default=128)
    sub.add_argument('--blocks', type=int, default=2)
    sub.add_argument('--latent-tokens', type=int, default=8)
    sub.add_argument('--cond-tokens', type=int, default=4)
    sub.add_argument('--steps', type=int, default=8)
    sub.add_argument('--dtype', choices=('f32', 'f64'), default='f32')

    sub = add('gen-calib', 'create a seeded calibration set')
    sub.add_argument('--model', required=True)
    sub.add_argument('--out', required=True)
    sub.add_argument('--n', type=int, default=100)
    sub.add_argument('--seed', type=int, default=None)

    sub = add('prune', 'prune a model')
    sub.add_argument('--model', required=True)
    sub.add_argument('--calib', required=True)
    sub.add_argument('--out', required=True)
    sub.add_argument('--report', default='-',
                     help='report file (default: stdout)')
    sub.add_argument('--export', choices=EXPORT_MODES, default='masked')
    sub.add_argument('--save-hessians', default=None, metavar='DIR')
    _add_pipeline_options(sub)

    sub = add('eval', 'compare a pruned model with the dense model')
    sub.add_argument('--dense', required=True)
    sub.add_argument('--pruned', required=True)
    sub.add_argument('--n-eval', type=int, default=16)
    sub.add_argument('--eval-seed', type=int, default=None)
    sub.add_argument('--report', default='-')
    sub.add_argument('--csv', default=None,
                     help='write per-sample divergences to this file')

    sub = add('inspect', 'print the sparsity audit of a model')
    sub.add_argument('--model', required=True)

    sub = add('ablate', 'run an ablation sweep')
    sub.add_argument('--model', required=True)
    sub.add_argument('--calib', required=True)
    sub.add_argument('--axis', choices=ABLATION_AXES, required=True)
    sub.add_argument('--values', default=None,
                     help='comma-separated values of the swept setting')
    sub.add_argument('--methods', default='obs,wanda,magnitude')
    sub.add_argument('--n-eval', type=int, default=16)
    sub.add_argument('--eval-seed', type=int, default=None)
    sub.add_argument('--out', default='-', help='CSV file (default: stdout)')
    _add_pipeline_options(sub)
    return parser, subparsers


def _config_request(argv):
    """Command name and ``--config`` value, found without full parsing"""
    command = path = None
    for index, token in enumerate(argv):
        if command is None and token in COMMANDS:
            command = token
        elif token == '--config' and index + 1 < len(argv):
            path = argv[index + 1]
        elif token.startswith('--config='):
            path = token.split('=', 1)[1]
    return command, path


def _apply_config_file(parser, subparsers, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    command, path = _config_request(argv)
    if command is None or path is None:
        return parser.parse_args(argv)
    with open(path) as f:
        try:
            values = json.load(f)
        except ValueError as ex:
            raise BadConfig(f'{path} is not valid JSON: {ex}')
    if not isinstance(values, dict):
        raise BadConfig(f'{path} has to contain a JSON object')
    sub = subparsers[command]
    known = {action.dest for action in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace('-', '_')
        if dest not in known or dest in ('config', 'help'):
            raise BadConfig(f'Unknown option "{key}" in {path}')
        defaults[dest] = value
    sub.set_defaults(**defaults)
    # required options may come from the file
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def pipeline_config(args, model):
    """`PipelineConfig` from the pipeline options of ``args``"""
    spec = parse_sparsity(args.pattern, args.sparsity)
    config = PipelineConfig(
        sparsity=spec, method=args.method, num_packages=args.packages,
        weighting=args.weighting, alpha_min=args.alpha_min,
        alpha_max=args.alpha_max, damp_rel=args.damp,
        calib_size=args.calib_size, block_size=args.block_size,
        rrf_k=args.rrf_k, head_block=args.head_block,
        exclude_blocks=resolve_blocks(args.exclude_blocks,
                                      model.config.num_blocks),
        threads=args.threads,
        export_mode=getattr(args, 'export', 'masked'),
        save_hessians=getattr(args, 'save_hessians', None))
    config.validate(model)
    return config


def cmd_gen_model(args):
    config = ModelConfig(hidden_dim=args.hidden_dim, num_heads=args.heads,
                         ffn_dim=args.ffn_dim, num_blocks=args.blocks,
                         latent_tokens=args.latent_tokens,
                         cond_tokens=args.cond_tokens, num_steps=args.steps,
                         seed=resolve_seed(args.seed), dtype=args.dtype)
    model = init_model(config)
    save_container(args.out, model_to_container(model))
    logger.info(f'Wrote {model} to {args.out}')


def cmd_gen_calib(args):
    model = model_from_container(load_container(args.model))
    calib = gen_calibration(resolve_seed(args.seed), args.n, model.config)
    save_container(args.out, calibration_to_container(calib))
    logger.info(f'Wrote {len(calib)} calibration samples to {args.out}')


def cmd_prune(args):
    model = model_from_container(load_container(args.model))
    calib = calibration_from_container(load_container(args.calib))
    config = pipeline_config(args, model)
    config.calib_seed = calib.seed
    scheduler = PackageScheduler(model, calib, config)
    pruned, report = scheduler.run(callback=None)
    metadata = {'pipeline': config.to_dict(),
                'targets': scheduler.target_layers,
                'calibration': {'seed': calib.seed,
                                'n_samples': len(scheduler.calib)}}
    save_container(args.out, model_to_container(
        pruned, shrink=config.export_mode == 'shrunk', metadata=metadata))
    report['output'] = args.out
    _write_output(to_json(report), args.report)


def _pipeline_spec(metadata):
    pipeline = metadata.get('pipeline')
    if not pipeline:
        return None, None
    return spec_from_dict(pipeline['sparsity']), metadata.get('targets')


def cmd_eval(args):
    dense = model_from_container(load_container(args.dense))
    container = load_container(args.pruned)
    pruned = model_from_container(container)
    spec, targets = _pipeline_spec(container.metadata)
    eval_set = gen_eval_set(resolve_seed(args.eval_seed), args.n_eval,
                            dense.config)
    report = evaluate_models(dense, pruned, eval_set, spec=spec, layers=targets,
                             config=container.metadata.get('pipeline', {}))
    if args.csv:
        report.to_csv(args.csv)
        logger.info(f'Wrote per-sample divergences to {args.csv}')
    _write_output(to_json(report.to_dict()), args.report)


def cmd_inspect(args):
    container = load_container(args.model)
    model = model_from_container(container)
    spec, targets = _pipeline_spec(container.metadata)
    audit = sparsity_report(model, spec=spec, layers=targets)
    values = audit.to_dict()
    values['model'] = model.config.to_dict()
    values['export'] = container.metadata.get('export')
    values['pruned_heads'] = container.metadata.get('pruned_heads', {})
    values['pruned_neurons'] = container.metadata.get('pruned_neurons', {})
    print(to_json(values))


def _split(text, convert):
    try:
        return [convert(part.strip()) for part in text.split(',') if part.strip()]
    except ValueError:
        raise BadConfig(f'Cannot parse the list "{text}"')


def cmd_ablate(args):
    model = model_from_container(load_container(args.model))
    calib = calibration_from_container(load_container(args.calib))
    config = pipeline_config(args, model)
    eval_set = gen_eval_set(resolve_seed(args.eval_seed), args.n_eval,
                            model.config)
    if args.axis == 'sparsity':
        ratios = _split(args.values or '0.3,0.5,0.7', float)
        table = ablation.sweep_sparsity(model, calib, eval_set, ratios=ratios,
                                        methods=_split(args.methods, str),
                                        pattern=args.pattern,
                                        base_config=config)
    elif args.axis == 'weighting':
        schemes = _split(args.values, str) if args.values else WEIGHTING_SCHEMES
        table = ablation.sweep_weighting(model, calib, eval_set, schemes,
                                         base_config=config)
    elif args.axis == 'packages':
        counts = _split(args.values or '1,2,4,8', int)
        table = ablation.sweep_packages(model, calib, eval_set, counts,
                                        base_config=config)
    else:
        sizes = _split(args.values or '1,5,10,25,50,100', int)
        table = ablation.sweep_calibration_size(model, calib, eval_set, sizes,
                                                base_config=config)
    if args.out in (None, '-'):
        print(table.to_csv(index=False), end='')
    else:
        table.to_csv(args.out, index=False)
        logger.info(f'Wrote {len(table)} rows to {args.out}')


COMMANDS = {'gen-model': cmd_gen_model,
            'gen-calib': cmd_gen_calib,
            'prune': cmd_prune,
            'eval': cmd_eval,
            'inspect': cmd_inspect,
            'ablate': cmd_ablate}


def error_line(ex):
    """Machine-readable one-line description of an error"""
    values = {'error': ex.__class__.__name__, 'message': str(ex)}
    if isinstance(ex, ObsDiffError):
        values['message'] = ex.message
        values['layer_id'] = ex.layer_id
    return json.dumps(values, sort_keys=True)


def run_cli(argv=None):
    """
    Run a command and return the exit code.

    Parameters
    ----------
    argv : list of str, optional
        Defaults to ``sys.argv[1:]``.

    Returns
    -------
    int
        0 on success, 1 for errors during the run, 2 for invalid usage.
    """
    parser, subparsers = build_parser()
    try:
        args = _apply_config_file(parser, subparsers, argv)
        COMMANDS[args.command](args)
    except SystemExit as ex:
        return ex.code if isinstance(ex.code, int) else 2
    except (ObsDiffError, OSError) as ex:
        sys.stderr.write(error_line(ex) + '\n')
        return 1
    return 0


def main():
    sys.exit(run_cli())


if __name__ == '__main__':
    main()
