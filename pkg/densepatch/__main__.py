import logging
import pathlib
import sys

import attr
import click
import humanfriendly

from densepatch.errors import ConfigError, DataError, FormatError, NumericalError, ShapeError
import densepatch.architectures
import densepatch.checkpoint
import densepatch.config
import densepatch.dataset
import densepatch.metrics
import densepatch.optimizers
import densepatch.plot
import densepatch.presets
import densepatch.trainer

# gradcheck passes below this relative error
GRADCHECK_TOLERANCE = 1e-4

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

def load_config(path):
    if path is None:
        return densepatch.config.TrainConfig()
    return densepatch.config.TrainConfig.load_file(path)

@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Log debug output.')
def cli(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(name)s: %(message)s',
    )

@cli.command()
@click.option('--config', type=click.Path(dir_okay=False), help='TOML run configuration.')
@click.option('--data', type=click.Path(dir_okay=False), required=True, help='PPAK dataset.')
@click.option('--out', type=click.Path(file_okay=False), help='Directory for checkpoints, curve and report.')
@click.option('--seed', type=int)
@click.option('--epochs', type=int)
@click.option('--threads', type=int)
@click.option('--deterministic', is_flag=True, help='Single-threaded, no prefetch.')
def train(config, data, out, seed, epochs, threads, deterministic):
    cfg = load_config(config)
    cfg.data = pathlib.Path(data)
    if out is not None:
        cfg.out = pathlib.Path(out)
    if seed is not None:
        cfg.seed = seed
    if epochs is not None:
        cfg.epochs = epochs
    if threads is not None:
        cfg.threads = threads
    if deterministic:
        cfg.deterministic = True
    attr.validate(cfg)

    timer = humanfriendly.Timer()
    checkpoint, curve, result = densepatch.trainer.train(cfg)
    click.echo('trained {} batches in {}'.format(checkpoint.batches_processed, timer))
    if result is not None:
        click.echo(result.dumps(), nl=False)
    if cfg.out is not None:
        click.echo('wrote {}'.format(cfg.out))

@cli.command()
@click.option('--checkpoint', type=click.Path(dir_okay=False), required=True)
@click.option('--data', type=click.Path(dir_okay=False), required=True)
@click.option('--batch-size', type=int, default=256, show_default=True)
@click.option('--threshold', type=float, default=0.5, show_default=True)
@click.option('--report', type=click.Path(dir_okay=False), help='Also write the report here.')
@click.option('--roc-svg', type=click.Path(dir_okay=False), help='Draw the ROC curve here.')
def evaluate(checkpoint, data, batch_size, threshold, report, roc_svg):
    ckpt = densepatch.checkpoint.Checkpoint.load(checkpoint)
    ds = densepatch.dataset.read_ppak(data)
    result = densepatch.trainer.evaluate(ckpt, ds, batch_size, threshold=threshold)
    click.echo(result.dumps(), nl=False)
    if report:
        result.save(report)
    if roc_svg:
        scores = densepatch.trainer.predict(ckpt, ds, batch_size)
        roc = densepatch.metrics.roc_curve(scores, ds.labels)
        densepatch.plot.save(densepatch.plot.roc_chart(roc, result.auc_roc), roc_svg)

@cli.command()
@click.option('--data', type=click.Path(dir_okay=False), required=True)
@click.option('--fraction', type=float, default=0.8, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--out-train', type=click.Path(dir_okay=False), required=True)
@click.option('--out-test', type=click.Path(dir_okay=False), required=True)
def split(data, fraction, seed, out_train, out_test):
    if not 0 < fraction <= 1:
        raise click.BadParameter('must be in (0, 1]', param_hint='--fraction')
    ds = densepatch.dataset.read_ppak(data)
    train, test = densepatch.dataset.split(ds, fraction, seed)
    densepatch.dataset.write_ppak(train, out_train)
    densepatch.dataset.write_ppak(test, out_test)
    click.echo('{} train, {} test'.format(len(train), len(test)))

@cli.command()
@click.option('--out', type=click.Path(dir_okay=False), required=True)
@click.option('--n', type=int, required=True)
@click.option('--hw', type=int, default=16, show_default=True)
@click.option('--channels', type=int, default=1, show_default=True)
@click.option('--pos-frac', type=float, default=0.5, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
def synth(out, n, hw, channels, pos_frac, seed):
    ds = densepatch.dataset.synth_generate(n, hw, hw, channels, pos_frac, seed)
    densepatch.dataset.write_ppak(ds, out)
    negatives, positives = ds.class_counts()
    click.echo('wrote {} records ({} positive) to {}'.format(len(ds), positives, out))

@cli.command()
@click.option('--preset', help='Preset name; all presets when omitted.')
@click.option('--list', 'list_', is_flag=True, help='List presets and exit.')
def gradcheck(preset, list_):
    names = densepatch.presets.gradcheck_names()
    if list_:
        for name in names:
            click.echo(name)
        return EXIT_OK
    if preset is not None:
        names = [preset]
    worst = 0.0
    for name in names:
        timer = humanfriendly.Timer()
        err = densepatch.presets.run_gradcheck(name)
        click.echo('{}: max_rel_err = {:.3e} ({})'.format(name, err, timer))
        worst = max(worst, err)
    if not worst < GRADCHECK_TOLERANCE:
        click.echo('gradient check failed: {:.3e} >= {:g}'.format(worst, GRADCHECK_TOLERANCE), err=True)
        return EXIT_NUMERICAL
    return EXIT_OK

@cli.command()
@click.option('--config', type=click.Path(dir_okay=False))
@click.option('--data', type=click.Path(dir_okay=False), required=True)
@click.option('--out', type=click.Path(file_okay=False), required=True)
@click.option('--kind', 'kinds', multiple=True, type=click.Choice([c.value for c in densepatch.architectures.Connectivity]))
@click.option('--optimizer', 'optimizers', multiple=True, type=click.Choice([o.value for o in densepatch.optimizers.OptimizerKind]))
@click.option('--deterministic', is_flag=True)
def compare(config, data, out, kinds, optimizers, deterministic):
    cfg = load_config(config)
    cfg.data = pathlib.Path(data)
    cfg.out = pathlib.Path(out)
    cfg.deterministic = cfg.deterministic or deterministic
    rows = densepatch.trainer.compare(cfg, list(kinds), list(optimizers))
    for row in rows:
        click.echo('{model:20} auc {auc_roc:.4f}  accuracy {accuracy:.4f}  validation loss {final_validation_loss:.4f}'.format(**row))

@cli.command()
@click.option('--curve', type=click.Path(dir_okay=False), required=True, help='curve.csv from a training run.')
@click.option('--out', type=click.Path(dir_okay=False), required=True)
def plot(curve, out):
    log = densepatch.trainer.CurveLog.load(curve)
    densepatch.plot.save(densepatch.plot.loss_chart(log), out)
    click.echo('wrote {}'.format(out))

@cli.command()
@click.option('--data', type=click.Path(dir_okay=False), required=True)
@click.option('--out', type=click.Path(dir_okay=False), required=True)
def labels(data, out):
    ds = densepatch.dataset.read_ppak(data)
    densepatch.dataset.export_labels(ds, out)
    negatives, positives = ds.class_counts()
    click.echo('{} labels ({} positive, {} negative)'.format(len(ds), positives, negatives))

@cli.command()
@click.option('--config', type=click.Path(dir_okay=False))
@click.option('--preset', help='Named model shape, e.g. densenet169.')
def summary(config, preset):
    if config and preset:
        raise click.UsageError('give --config or --preset, not both')
    if preset:
        cfg = densepatch.architectures.ModelConfig.from_dict(densepatch.presets.model_shape(preset))
    else:
        cfg = load_config(config).model

    blocks, transitions, head = densepatch.architectures.layout(cfg)
    h, w = cfg.input_hw
    click.echo('{} network, {}x{}x{} input'.format(cfg.connectivity.value, h, w, cfg.image_channels))
    click.echo('stem: {} -> {}'.format(cfg.image_channels, cfg.input_channels))
    for b, layers in enumerate(blocks):
        ins = ' '.join(str(spec.in_channels) for spec in layers)
        click.echo('block{} at {}x{}: {} layers, inputs {}'.format(b, h, w, len(layers), ins))
        if b < len(transitions):
            t = transitions[b]
            click.echo('{}: {} -> {}, {} pool'.format(t.prefix, t.in_channels, t.out_channels, cfg.transition_pool))
            h, w = h // 2, w // 2
    click.echo('head: {} features -> {} logits'.format(head, cfg.num_classes))
    plan = densepatch.architectures.param_plan(cfg)
    trainable = sum(spec.size for spec in plan if not spec.buffer)
    click.echo('parameters: {} ({} tensors)'.format(humanfriendly.format_number(trainable), len(plan)))

def cli_main(args=None):
    """Run the command line and return its exit code instead of exiting."""
    try:
        rv = cli.main(args=args, prog_name='densepatch', standalone_mode=False)
    except click.exceptions.Abort:
        click.echo('aborted', err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except ConfigError as e:
        click.echo('config error: {}'.format(e), err=True)
        return EXIT_USAGE
    except (FormatError, DataError, ShapeError, OSError) as e:
        click.echo('error: {}'.format(e), err=True)
        return EXIT_DATA
    except NumericalError as e:
        click.echo('numerical failure: {}'.format(e), err=True)
        return EXIT_NUMERICAL
    if isinstance(rv, int):
        return rv
    return EXIT_OK

if __name__ == '__main__':
    sys.exit(cli_main())
