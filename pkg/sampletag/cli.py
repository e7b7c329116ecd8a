import os
import sys
from functools import wraps

import click
import numpy as np
import structlog

from sampletag import analysis, data, gradcheck
from sampletag.checkpoint import load_checkpoint, save_checkpoint
from sampletag.config import BLOCK_KINDS, DESK_INPUT_LEN, Config, load_run_config
from sampletag.errors import ConfigError, DimensionError, NumericError, SampletagError
from sampletag.evaluate import evaluate, write_report
from sampletag.model import build
from sampletag.train import compare_variants, fit
from sampletag.utils import configure_logging, ensure_dir, write_run_lock

logger = structlog.get_logger(__name__)

# short flags accepted by `train` in front of the dotted config keys
ALIASES = {
    'block': 'model.block_kind',
    'multi-level': 'model.multi_level',
    'weight-decay': 'model.weight_decay',
    'depth': 'model.depth',
    'alpha': 'model.alpha',
    'epochs': 'train.max_epochs',
    'seed': 'seed',
    'out': 'out_dir',
    'manifest': 'data.manifest',
}


def handle_errors(f):
    """Decorator to turn library errors into a message and the matching exit code"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except SampletagError as e:
            logger.error('command_failed', error=type(e).__name__, exit_code=e.exit_code)
            click.echo(f"Error: {e}", err=True)
            click.get_current_context().exit(e.exit_code)
    return decorated_function


def parse_overrides(args):
    """`--key value` / `--key=value` pairs into (dotted_key, value), in order."""
    overrides = []
    args = list(args)
    while args:
        token = args.pop(0)
        if not token.startswith('--'):
            raise ConfigError(f"unexpected argument {token!r}; overrides look like --model.depth 6")
        key, sep, value = token[2:].partition('=')
        if not sep:
            if not args or args[0].startswith('--'):
                raise ConfigError(f"override --{key} needs a value")
            value = args.pop(0)
        dotted = ALIASES.get(key, key.replace('-', '_'))
        overrides.append((dotted, value))
    return overrides


@click.group()
@click.option('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR.')
@click.option('--log-format', type=click.Choice(['kv', 'console']), default=None)
def cli(log_level, log_format):
    """Sample-level CNN music auto-tagging on raw waveforms."""
    configure_logging(log_level, log_format)


@cli.command()
@click.option('--songs', type=int, default=200, show_default=True)
@click.option('--tags', type=int, default=8, show_default=True)
@click.option('--input-len', type=int, default=DESK_INPUT_LEN, show_default=True)
@click.option('--segments', type=int, default=2, show_default=True, help='Segments per song.')
@click.option('--seed', type=int, default=Config.DEFAULT_SEED, show_default=True)
@click.option('--format', 'fmt', type=click.Choice(['f32', 'wav']), default='f32', show_default=True)
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@handle_errors
def synth(songs, tags, input_len, segments, seed, fmt, out_dir):
    """Write a synthetic tagged dataset (audio + manifest.csv)."""
    ensure_dir(out_dir)
    dataset = data.synth_generate(songs, tags, input_len, seed, segments_per_song=segments)
    manifest_path = data.export_dataset(dataset, out_dir, fmt)
    write_run_lock(out_dir, 'synth', sys.argv[1:], {'seed': seed})
    click.echo(f"Wrote {songs} songs with {tags} tags to {manifest_path}")


def _training_sets(run, splits=('train', 'valid')):
    """Segment sets for ``splits`` and the tag names, from the manifest or synthetic audio.

    ``run.model.num_tags`` follows the vocabulary when the two disagree.
    """
    input_len = run.model.input_len
    if run.data.manifest:
        manifest, vocab = data.load_manifest(run.data.manifest, run.data.top_k)
        if run.data.audio_root:
            manifest.root = run.data.audio_root
        sets = [data.build_segments(data.load_clips(manifest, vocab, split), input_len, vocab.tags)
                for split in splits]
        tags = vocab.tags
    else:
        dataset = data.synth_generate(run.data.synth_songs, run.model.num_tags, input_len, run.seed,
                                      segments_per_song=run.data.synth_segments)
        sets = [dataset.segments(input_len, split) for split in splits]
        tags = dataset.vocab.tags
    if run.model.num_tags != len(tags):
        logger.info('num_tags_from_vocabulary', configured=run.model.num_tags, vocabulary=len(tags))
        run.model.num_tags = len(tags)
        run.validate()
    return sets, tags


@cli.command(context_settings={'ignore_unknown_options': True, 'allow_extra_args': True})
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None)
@click.option('--preset', default=None, help='mtat, msd, desk or default.')
@click.pass_context
@handle_errors
def train(ctx, config_path, preset):
    """Train a model; any other --key value pair overrides the config."""
    run = load_run_config(config_path, parse_overrides(ctx.args), preset)
    out_dir = ensure_dir(run.out_dir)
    (train_set, val_set), tags = _training_sets(run)
    with open(os.path.join(out_dir, 'config.yaml'), 'w', encoding='utf-8') as fh:
        fh.write(run.to_yaml())

    net = build(run.model, np.random.default_rng(run.seed), tags=tags)
    logger.info('train_start', kind=run.model.block_kind, depth=run.model.depth,
                params=net.param_count(), train_segments=len(train_set), val_segments=len(val_set))
    result = fit(net, train_set, val_set, run.train, seed=run.seed, out_dir=out_dir)
    save_checkpoint(net, os.path.join(out_dir, 'last.ckpt'))
    write_run_lock(out_dir, 'train', sys.argv[1:], {'seed': run.seed, 'best_epoch': result.best_epoch})
    click.echo(f"Best epoch {result.best_epoch}: val loss {result.best_val_loss:.6f}")
    click.echo(f"Checkpoint: {result.checkpoint_path}")


@cli.command(context_settings={'ignore_unknown_options': True, 'allow_extra_args': True})
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None)
@click.option('--preset', default=None, help='mtat, msd, desk or default.')
@click.option('--kinds', default=','.join(BLOCK_KINDS), show_default=True,
              help='Comma-separated block kinds; epoch times are relative to the first.')
@click.pass_context
@handle_errors
def compare(ctx, config_path, preset, kinds):
    """Train each block kind with and without multi-level aggregation; writes compare.csv."""
    run = load_run_config(config_path, parse_overrides(ctx.args), preset)
    out_dir = ensure_dir(run.out_dir)
    (train_set, val_set, test_set), tags = _training_sets(run, ('train', 'valid', 'test'))
    with open(os.path.join(out_dir, 'config.yaml'), 'w', encoding='utf-8') as fh:
        fh.write(run.to_yaml())

    chosen = [k.strip() for k in kinds.split(',') if k.strip()]
    table = compare_variants(run.model, run.train, train_set, val_set, test_set, tags, chosen, seed=run.seed)
    path = os.path.join(out_dir, 'compare.csv')
    table.to_csv(path, index=False, float_format='%.6f', na_rep='nan')
    write_run_lock(out_dir, 'compare', sys.argv[1:], {'seed': run.seed})
    click.echo(table[['kind', 'multi_level', 'macro_auc', 'rel_epoch_time']]
               .to_string(index=False, float_format='%.4f'))
    click.echo(f"Comparison: {path}")


def _labelled_segments(net, manifest_path, split):
    """Segments of one manifest split, labelled with the checkpoint's tag vocabulary."""
    top_k = len(net.tags) if net.tags else net.config.num_tags
    manifest, vocab = data.load_manifest(manifest_path, top_k)
    if net.tags:
        vocab = data.TagVocabulary(net.tags)
    if len(vocab) != net.config.num_tags:
        raise DimensionError("manifest vocabulary does not match the model's tag count",
                             (len(vocab),), (net.config.num_tags,))
    clips = data.load_clips(manifest, vocab, split)
    return data.build_segments(clips, net.config.input_len, vocab.tags), manifest, vocab


@cli.command('eval')
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(dir_okay=False))
@click.option('--manifest', 'manifest_path', required=True, type=click.Path(dir_okay=False))
@click.option('--split', type=click.Choice(data.SPLITS), default='test', show_default=True)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None,
              help='Report CSV (default: next to the checkpoint).')
@click.option('--batch-size', type=int, default=23, show_default=True)
@handle_errors
def eval_cmd(checkpoint_path, manifest_path, split, out_path, batch_size):
    """Per-tag ROC-AUC and the macro average on one split."""
    net = load_checkpoint(checkpoint_path)
    segments, _, _ = _labelled_segments(net, manifest_path, split)
    report = evaluate(net, segments, batch_size)
    out_path = out_path or os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), f'eval_{split}.csv')
    write_report(report, out_path)
    click.echo(report.to_frame().to_csv(index=False, float_format='%.6f', na_rep='nan'), nl=False)
    logger.info('eval_done', split=split, macro=report.macro, report=out_path)


@cli.command()
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(dir_okay=False))
@click.option('--manifest', 'manifest_path', required=True, type=click.Path(dir_okay=False))
@click.option('--split', type=click.Choice(data.SPLITS), default='test', show_default=True)
@click.option('--tags', 'tag_list', default=None, help='Comma-separated tags for the co-occurrence table.')
@click.option('--std-method', type=click.Choice(analysis.STD_METHODS), default='channel', show_default=True)
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@click.option('--batch-size', type=int, default=23, show_default=True)
@handle_errors
def analyze(checkpoint_path, manifest_path, split, tag_list, std_method, out_dir, batch_size):
    """Capture SE excitations and write per-tag means, std profile and co-occurrence."""
    net = load_checkpoint(checkpoint_path)
    if not net.has_se:
        raise ConfigError(f"{net.config.block_kind} checkpoint has no SE units to analyze")
    ensure_dir(out_dir)
    segments, manifest, vocab = _labelled_segments(net, manifest_path, split)
    report = analysis.build_report(analysis.capture(net, segments, batch_size), segments, std_method)

    cooc = chosen = None
    if tag_list:
        chosen = [t.strip() for t in tag_list.split(',') if t.strip()]
        cooc = data.cooccurrence(manifest, vocab, chosen)
    written = analysis.emit_report(report, out_dir, cooc, chosen)
    write_run_lock(out_dir, 'analyze', sys.argv[1:], {'checkpoint': os.path.abspath(checkpoint_path)})
    for block in report.block_ids:
        click.echo(f"block{block}: std {report.std[block]:.6f}")
    click.echo(f"Wrote {len(written)} files to {out_dir}")


@cli.command('gradcheck')
@click.option('--block', 'kind', type=click.Choice(BLOCK_KINDS), default='se', show_default=True)
@click.option('--depth', type=int, default=3, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--corrupt-gradients', is_flag=True, hidden=True,
              help='Scale analytic gradients by 1.1 (negative control).')
@handle_errors
def gradcheck_cmd(kind, depth, seed, corrupt_gradients):
    """Finite-difference check of the primitives, one block kind and a toy network."""
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    reports = gradcheck.run_suite(kind, depth, seed, corrupt_gradients)
    failed = []
    for name, report in reports.items():
        status = 'ok' if report.passed else 'FAIL'
        click.echo(f"{name:<36} worst={report.worst:<24} error={report.max_error:.3e} "
                   f"tol={report.tolerance:.0e} {status}")
        if not report.passed:
            failed.append(name)
    overall = max(r.max_error for r in reports.values())
    click.echo(f"max relative error {overall:.3e}")
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")


def main():
    cli(prog_name='sampletag')


if __name__ == '__main__':
    main()
