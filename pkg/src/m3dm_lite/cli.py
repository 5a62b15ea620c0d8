"""
Command line interface, `m3dm <command> [options]`.

Exit codes: 0 success, 2 configuration error, 3 missing or corrupted data, 1 anything else.
"""
import os
import sys

import click
from loguru import logger

from m3dm_lite import config, pipeline, synthetic
from m3dm_lite.errors import ConfigError, DataError
from m3dm_lite.utils import aux

SEED_OPTIONS = ('ransac', 'fps', 'extractor', 'uff', 'bank', 'dlf', 'synth')


def _common_options(fn):
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                     help='JSON configuration file.'),
        click.option('--dataset', type=click.Path(file_okay=False), default=None, help='Dataset directory.'),
        click.option('--work', type=click.Path(file_okay=False), default=None, help='Work directory for artifacts.'),
        click.option('--banks', default=None, help='Memory banks to use, e.g. rgb,pt,fs.'),
        click.option('--grid', default=None, help='Patch grid GHxGW, e.g. 56x56.'),
        click.option('--groups', default=None, help='Point groups MxS, e.g. 1024x128.'),
        click.option('--coreset-ratio', type=float, default=None),
        click.option('--image-size', type=int, default=None),
        click.option('--fusion-mode', type=click.Choice(config.FUSION_MODES), default=None),
        click.option('--decision-mode', type=click.Choice(config.DECISION_MODES), default=None),
        click.option('--processes', type=int, default=None, help='Worker processes, all cores by default.'),
        click.option('--verbose', is_flag=True, default=False, help='Debug logging.'),
    ]
    options.extend(click.option(f'--seed-{name}', f'seed_{name}', type=int, default=None) for name in SEED_OPTIONS)
    for option in reversed(options):
        fn = option(fn)
    return fn


def setup_logging(verbose):
    logger.remove()
    logger.add(sys.stderr, level='DEBUG' if verbose else 'INFO')


def build_config(options, save=True):
    """
    Configuration from the `--config` file overridden by command line flags; stored to the work directory.

    :param options: dict; parsed click options
    :param save: bool;
    :return: config.PipelineConfig
    """
    setup_logging(options.pop('verbose', False))
    processes = options.pop('processes', None)
    if processes is not None:
        if processes < 1:
            raise ConfigError('`--processes` has to be at least 1.')
        config.NUMBER_OF_PROCESSES = processes

    overrides = {
        'dataset_dir': options.pop('dataset', None),
        'work_dir': options.pop('work', None),
        'banks': aux.parse_names(options.pop('banks', None)),
        'grid': aux.parse_pair(options.pop('grid', None), 'grid'),
        'groups': aux.parse_pair(options.pop('groups', None), 'groups'),
        'coreset_ratio': options.pop('coreset_ratio', None),
        'image_size': options.pop('image_size', None),
        'fusion_mode': options.pop('fusion_mode', None),
        'decision_mode': options.pop('decision_mode', None),
    }
    overrides.update({f'{name}_seed': options.pop(f'seed_{name}', None) for name in SEED_OPTIONS})
    cfg = config.load_config(options.pop('config_path', None), overrides)
    if save:
        os.makedirs(cfg.work_dir, exist_ok=True)
        config.save_config(cfg, os.path.join(cfg.work_dir, 'config.json'))
    return cfg


@click.group()
def cli():
    """Multimodal (RGB + 3D) anomaly detection with memory banks and decision layer fusion."""


@cli.command()
@_common_options
@click.option('--n-train', type=int, default=30)
@click.option('--n-test-good', type=int, default=30)
@click.option('--n-test-anomalous', type=int, default=30)
@click.option('--kinds', default=None, help='Anomaly kinds, subset of color,geometry,joint.')
def synth(n_train, n_test_good, n_test_anomalous, kinds, **options):
    """Generate synthetic dataset."""
    cfg = build_config(options, save=False)
    spec = synthetic.SyntheticDatasetSpec(
        n_train=n_train, n_test_good=n_test_good, n_test_anomalous=n_test_anomalous, image_size=cfg.image_size,
        anomaly_kinds=aux.parse_names(kinds) or synthetic.ANOMALY_KINDS, seed=cfg.synth_seed)
    synthetic.write_dataset(synthetic.generate_synthetic(spec), cfg.dataset_dir, spec=spec)
    logger.info(f'Synthetic dataset written to {cfg.dataset_dir}.')


@cli.command()
@_common_options
def extract(**options):
    """Extract patch feature grids of all scenes."""
    pipeline.extract(build_config(options))


@cli.command('train-uff')
@_common_options
def train_uff(**options):
    """Train the fusion network."""
    pipeline.train_uff_stage(build_config(options))


@cli.command('build-banks')
@_common_options
def build_banks(**options):
    """Build memory banks from the training scenes."""
    pipeline.build_banks_stage(build_config(options))


@cli.command('train-dlf')
@_common_options
def train_dlf(**options):
    """Fit the decision heads."""
    pipeline.train_dlf_stage(build_config(options))


@cli.command()
@_common_options
def infer(**options):
    """Score test scenes into the registry."""
    n_scored = pipeline.infer_stage(build_config(options))
    logger.info(f'{n_scored} scenes scored.')


@cli.command('eval')
@_common_options
@click.option('--kinds', default=None, help='Evaluate only these anomaly kinds (plus all nominal scenes).')
def evaluate(kinds, **options):
    """Evaluate the registry against the ground truth."""
    report = pipeline.eval_stage(build_config(options), kinds=aux.parse_names(kinds))
    click.echo(report.to_json())


@cli.command('run')
@_common_options
@click.option('--kinds', default=None)
def run_all(kinds, **options):
    """Run every stage from extraction to evaluation."""
    report = pipeline.run_all(build_config(options), kinds=aux.parse_names(kinds))
    click.echo(report.to_json())


@cli.command()
@_common_options
@click.option('--full', is_flag=True, default=False, help='All fusion and decision variants, not only bank subsets.')
@click.option('--kinds', default=None)
def ablate(full, kinds, **options):
    """Compare bank subsets (and fusion/decision variants with --full)."""
    rows = pipeline.ablate(build_config(options), full=full, kinds=aux.parse_names(kinds))
    click.echo(aux.format_table(rows))


def run(argv=None):
    """
    Runs one command and maps errors to exit codes.

    :param argv: List[str]; command line arguments without the program name
    :return: int; exit code
    """
    try:
        cli.main(args=argv, prog_name='m3dm', standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return 2
    except ConfigError as e:
        logger.error(f'Configuration error: {e}')
        return 2
    except (DataError, OSError) as e:
        logger.error(f'Data error: {e}')
        return 3
    except Exception as e:
        logger.error(f'{type(e).__name__}: {e}')
        return 1
    return 0


def main():
    sys.exit(run())
