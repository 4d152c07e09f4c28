'''
The VDMini pipeline from one configuration:

    gen-data -> train-teacher -> profile -> plan -> distill -> eval -> report

Every artifact lands under --out and carries the config hash. Failures
print one JSON line {"error", "kind", "exit_code"} on stderr.

USAGE:
$ <script.py> [--config <file.json>] [--seed <u64>] [--out <dir>] [--force] [--verbose] <subcommand>

EXAMPLE:
$ python src/cli.py --config configs/desk.json gen-data
$ python src/cli.py --config configs/origin.json --out runs/origin plan
'''

import json
import logging
import os
import sys
from dataclasses import replace

import click
import numpy as np

from src import diffusion, evalkit, icmd, pruner, synthdata, unet
from src.netgraph import count_params, load_graph, save_graph, origin_graph, tiny_graph
from src.train_teacher import TeacherTrainer
from utils.config_utils import config_hash, config_to_dict, load_config
from utils.errors import ConfigError, FileFormatError, PrerequisiteError, VdminiError
from utils.file_utils import format_float, pretty_write_json, read_csv, read_json
from utils.log_utils import setup_logging
from utils.seed_utils import STAGE_TAGS, derive_seed, rng_for
from utils.tensor_core import load_checkpoint

logger = logging.getLogger(__name__)

ARTIFACTS = {
    'train_data': 'data/train.vdds',
    'eval_data': 'data/eval.vdds',
    'teacher': 'checkpoints/teacher.vdmk',
    'student': 'checkpoints/student.vdmk',
    'teacher_losses': 'reports/teacher_losses.csv',
    'ablation_json': 'reports/ablation_report.json',
    'ablation_csv': 'reports/ablation_report.csv',
    'profile_latency': 'reports/profile_latency.csv',
    'plan': 'reports/pruning_plan.json',
    'student_graph': 'reports/student_graph.json',
    'distill_losses': 'reports/distill_losses.csv',
    'eval_summary': 'reports/eval_summary.json',
    'eval_latency': 'reports/eval_latency.csv',
    'report_summary': 'reports/report_summary.json',
}

# Plain graph files stay loadable by the "file" graph preset, so they carry no hash;
# the pruning plan written next to them does
UNHASHED = ('student_graph', 'report_summary')

PREREQUISITE_NAMES = {
    'train_data': 'training dataset',
    'eval_data': 'evaluation dataset',
    'teacher': 'teacher checkpoint',
    'plan': 'pruning plan',
}


class HashMismatchError(PrerequisiteError):
    kind = 'hash_mismatch'


class Run():
    '''Resolved configuration plus the artifact layout of one output directory.'''
    def __init__(self, config, force=False):
        self.config = config
        self.hash = config_hash(config)
        self.force = force

    def path(self, key):
        return os.path.join(self.config.out_dir, ARTIFACTS[key])

    def require(self, key):
        path = self.path(key)
        if not os.path.exists(path):
            raise PrerequisiteError('missing prerequisite: %s' % PREREQUISITE_NAMES.get(key, key))
        return path

    def stage_seed(self, stage):
        return derive_seed(self.config.seed, STAGE_TAGS[stage])

    def graph(self):
        cfg, channels = self.config.graph, self.config.data.channels
        if cfg.preset == 'origin':
            graph = origin_graph(cfg.base_width, channels)
        elif cfg.preset == 'tiny':
            graph = tiny_graph(cfg.base_width, channels)
        else:
            if not os.path.exists(cfg.path):
                raise ConfigError('graph file not found: %r' % (cfg.path,))
            graph = load_graph(cfg.path)
        return replace(graph, conditioned=cfg.conditioned)

    def schedule(self):
        d = self.config.diffusion
        return diffusion.KarrasSchedule(d.sigma_min, d.sigma_max, d.rho, d.num_steps)

    def consistency(self):
        t = self.config.teacher
        return diffusion.ConsistencyConfig('euler', t.cfg_weight, t.skip_interval, t.ema_decay)

    def extractor(self):
        e = self.config.extractor
        return evalkit.FeatureExtractor(self.config.data.channels, e.width, e.dim, e.seed)

    def load_teacher(self):
        model, meta = unet.load_model(self.require('teacher'))
        return model, meta, precond_from_meta(meta)

    def meta(self, **extra):
        return dict(extra, config_hash=self.hash)


def precond_from_meta(meta):
    data = meta.get('preconditioner') or {}
    try:
        return diffusion.Preconditioner(**data)
    except TypeError as e:
        raise FileFormatError('checkpoint carries a malformed preconditioner: %s' % e)


def _written(what, path):
    click.echo('Written %s to: %s' % (what, path))
    return


@click.group()
@click.option('--config', 'config_path', help='JSON config file', metavar='PATH', type=str, default=None)
@click.option('--seed', help='Master seed', metavar='U64', type=click.IntRange(min=0, max=2 ** 64 - 1), default=None)
@click.option('--out', 'out_dir', help='Output directory', metavar='DIR', type=str, default=None)
@click.option('--force', help='Aggregate artifacts whose config hash differs', is_flag=True)
@click.option('--verbose', help='Debug logging', is_flag=True)
@click.pass_context
def vdmini(ctx, config_path, seed, out_dir, force, verbose):
    '''VDMini desk toolkit: prune and distill a toy video diffusion U-Net.'''
    setup_logging(verbose)
    config = load_config(config_path, seed=seed, out_dir=out_dir)
    ctx.obj = Run(config, force)
    logger.info('Config hash %s, output directory %s', ctx.obj.hash, config.out_dir)


@vdmini.command('gen-data')
@click.pass_obj
def gen_data(run):
    '''Render the train and eval moving-shape datasets.'''
    cfg = run.config.data
    template = synthdata.SceneTemplate.from_config(cfg)
    seed = run.stage_seed('gen-data')
    for split, n, key in (('train', cfg.n_train, 'train_data'), ('eval', cfg.n_eval, 'eval_data')):
        dataset = synthdata.gen_dataset(template, n, seed, split, run.config.profile.workers, run.meta())
        synthdata.save(dataset, run.path(key))
        _written('%d %s videos' % (len(dataset), split), run.path(key))
    return


@vdmini.command('train-teacher')
@click.pass_obj
def train_teacher(run):
    '''Train the EDM teacher, or consistency-distill it from an EDM base.'''
    cfg, d = run.config.teacher, run.config.diffusion
    train = synthdata.load(run.require('train_data'))
    precond = diffusion.Preconditioner(cfg.mode, d.sigma_data, d.boundary_sigma)
    base = None
    if cfg.mode == diffusion.CM:
        if not cfg.base_checkpoint or not os.path.exists(cfg.base_checkpoint):
            raise PrerequisiteError('missing prerequisite: EDM base checkpoint')
        base, base_meta = unet.load_model(cfg.base_checkpoint)
        if base_meta.get('mode', diffusion.EDM) != diffusion.EDM:
            raise ConfigError('consistency distillation needs an EDM base checkpoint')
    graph = base.graph if base is not None else run.graph()
    trainer = TeacherTrainer(graph, train.videos, mode=cfg.mode, seed=run.stage_seed('train-teacher'),
                             init_seed=cfg.init_seed, lr=cfg.lr, batch_size=cfg.batch_size, precond=precond,
                             schedule=run.schedule(), sigma_dist=diffusion.SigmaDistribution(d.p_mean, d.p_std),
                             consistency=run.consistency(), base_model=base,
                             checkpoint_every=cfg.checkpoint_every, checkpoint_path=run.path('teacher'),
                             config_hash=run.hash)
    trainer.train(cfg.steps)
    trainer.save(run.path('teacher'))
    trainer.write_losses(run.path('teacher_losses'))
    _written('%s teacher checkpoint' % cfg.mode, run.path('teacher'))
    return


@vdmini.command('profile')
@click.pass_obj
def profile(run):
    '''Ablate every block and rank blocks by the FVD proxy increase.'''
    cfg = run.config.profile
    teacher, _, precond = run.load_teacher()
    eval_set = synthdata.load(run.require('eval_data'))
    blocks = list(cfg.blocks) or teacher.graph.block_ids()
    latency = evalkit.measure_latency(teacher, (1,) + eval_set.video_shape, run.config.eval.latency_warmup,
                                      run.config.eval.latency_reps, seed=run.stage_seed('profile'))
    report = pruner.profile_importance(
        teacher, eval_set, blocks, metric=None, extractor=run.extractor(), precond=precond,
        schedule=run.schedule(), sample_steps=cfg.sample_steps, num_samples=cfg.num_samples,
        seed=run.stage_seed('profile'), workers=cfg.workers, latency_ms=latency.component_ms,
        noise_subsets=cfg.noise_subsets)
    report.save(run.path('ablation_json'), run.path('ablation_csv'), run.hash,
                {'config': config_to_dict(run.config)})
    report.save_latency(run.path('profile_latency'), run.hash)
    failed = [r.block_id for r in report.rows.values() if r.error]
    if failed:
        logger.warning('%d block(s) failed to profile: %s', len(failed), ', '.join(failed))
    _written('ablation report', run.path('ablation_json'))
    return


@vdmini.command('plan')
@click.pass_obj
def plan(run):
    '''Derive the VDMini block-removal plan for the configured graph.'''
    graph = run.graph()
    if os.path.exists(run.path('teacher')):
        teacher_graph = unet.load_model(run.path('teacher'))[0].graph
        if teacher_graph != graph:
            logger.warning('Configured graph differs from the teacher checkpoint; planning for the checkpoint')
            graph = teacher_graph
    result = pruner.plan_vdmini(graph)
    result.save(run.path('plan'), run.hash)
    save_graph(result.student_graph, run.path('student_graph'))
    ratio = count_params(result.student_graph).total / count_params(graph).total
    logger.info('Student keeps %s of the teacher parameters', format_float(ratio))
    _written('pruning plan', run.path('plan'))
    return


@vdmini.command('distill')
@click.pass_obj
def distill(run):
    '''Fine-tune the planned student with the ICMD objective.'''
    cfg = run.config.distill
    plan_data = read_json(run.require('plan'))
    teacher, teacher_meta, precond = run.load_teacher()
    train = synthdata.load(run.require('train_data'))
    plan_ = pruner.PruningPlan.from_dict(plan_data)
    seed = run.stage_seed('distill')

    student = pruner.apply_plan(teacher, plan_, trainable=True)
    if cfg.channel_ratio > 0:
        grads = None
        if cfg.channel_scorer == 'taylor':
            grads = pruner.calibration_grads(student, train.videos, precond, seed, cfg.calibration_size)
        student = pruner.channel_prune_model(student, cfg.channel_ratio, cfg.channel_scorer, grads,
                                             cfg.channel_scope)
    d = run.config.diffusion
    state = icmd.init_distill_state(
        teacher, plan_, icmd.LossWeights(cfg.lambda_icd, cfg.lambda_mca, cfg.mca_warmup_steps), seed,
        lr=cfg.lr, disc_lr=cfg.disc_lr, disc_width=cfg.disc_width, task=cfg.task, precond=precond,
        noise=icmd.InstanceNoiseParams(cfg.noise_p_mean, cfg.noise_p_std),
        consistency=run.consistency(), schedule=run.schedule(),
        sigma_dist=diffusion.SigmaDistribution(d.p_mean, d.p_std), student=student)
    meta = dict(teacher_meta, task=cfg.task)
    meta.pop('graph', None)
    distiller = icmd.Distiller(state, train.videos, cfg.batch_size, cfg.checkpoint_every, run.path('student'),
                               run.hash, meta)
    distiller.run(cfg.steps)
    distiller.save_checkpoint(run.path('student'))
    distiller.write_losses(run.path('distill_losses'))
    _written('student checkpoint', run.path('student'))
    return


def _evaluate(model, precond, run, conditions, frames, reference, extractor):
    cfg = run.config.eval
    rng = rng_for(run.config.seed, STAGE_TAGS['eval'], 'samples')
    conds = conditions if model.graph.conditioned else np.zeros_like(conditions)
    videos = evalkit.generate_videos(diffusion.Denoiser(model, precond), run.schedule(), cfg.sample_steps,
                                     conds, frames, rng)
    latency = evalkit.measure_latency(model, (1, frames) + conditions.shape[2:], cfg.latency_warmup,
                                      cfg.latency_reps, seed=run.stage_seed('eval'))
    params = count_params(model.graph)
    summary = {
        'fvd': evalkit.fvd(videos, reference, extractor, run.config.profile.workers),
        'motion': evalkit.mean_motion(videos),
        'params': params.total,
    }
    return videos, summary, latency, params


@vdmini.command('eval')
@click.pass_obj
def evaluate(run):
    '''FVD proxy, motion proxy, PSNR and latency for the teacher and (if present) the student.'''
    cfg = run.config.eval
    teacher, _, precond = run.load_teacher()
    eval_set = synthdata.load(run.require('eval_data'))
    reference = eval_set.videos[:cfg.num_samples]
    conditions = synthdata.first_frame_condition(reference)
    frames, extractor = eval_set.video_shape[0], run.extractor()

    models = [('teacher', teacher, precond)]
    if os.path.exists(run.path('student')):
        student, student_meta = unet.load_model(run.path('student'))
        models.append(('student', student, precond_from_meta(student_meta)))
    else:
        logger.info('No student checkpoint; evaluating the teacher only')

    summary = {'config_hash': run.hash, 'config': config_to_dict(run.config), 'models': {},
               'host': evalkit.host_description(), 'reference': {'motion': evalkit.mean_motion(reference)}}
    samples, latency_entries = {}, []
    for label, model, model_precond in models:
        videos, stats, latency, params = _evaluate(model, model_precond, run, conditions, frames, reference,
                                                   extractor)
        samples[label] = videos
        summary['models'][label] = stats
        latency_entries.append((label, latency, params))
    if 'student' in samples:
        summary['psnr_student_vs_teacher'] = evalkit.psnr(samples['student'], samples['teacher'], cfg.peak)
        summary['param_ratio'] = summary['models']['student']['params'] / summary['models']['teacher']['params']
    pretty_write_json(summary, run.path('eval_summary'))
    evalkit.write_latency_csv(run.path('eval_latency'), latency_entries, run.hash)
    if len(latency_entries) == 2:
        speedup = latency_entries[0][1].total_ms / latency_entries[1][1].total_ms
        logger.info('Student speedup over the teacher: %sx', format_float(speedup))
    _written('evaluation summary', run.path('eval_summary'))
    return


def artifact_hash(path):
    '''Config hash recorded inside an artifact of any of the pipeline's formats.'''
    if path.endswith('.json'):
        return read_json(path).get('config_hash')
    if path.endswith('.csv'):
        return read_csv(path)[0]
    if path.endswith('.vdmk'):
        return load_checkpoint(path)[1].get('config_hash')
    if path.endswith('.vdds'):
        return synthdata.load(path).meta.get('config_hash')
    raise FileFormatError('unknown artifact type: %s' % path)


@vdmini.command('report')
@click.pass_obj
def report(run):
    '''Aggregate every artifact present into one summary.'''
    hashes, mismatched = {}, []
    for key in ARTIFACTS:
        if key in UNHASHED or not os.path.exists(run.path(key)):
            continue
        hashes[key] = artifact_hash(run.path(key))
        if hashes[key] != run.hash:
            mismatched.append(key)
    if not hashes:
        raise PrerequisiteError('missing prerequisite: pipeline artifacts under %s' % run.config.out_dir)
    if mismatched and not run.force:
        raise HashMismatchError('config hash mismatch (expected %s) in: %s' % (run.hash, ', '.join(mismatched)))

    summary = {'config_hash': run.hash, 'artifacts': hashes, 'mismatched': mismatched}
    if 'ablation_json' in hashes:
        ablation = read_json(run.path('ablation_json'))
        summary['block_ranking'] = [
            {'block_id': r['block_id'], 'delta_fvd': r['delta_fvd']} for r in ablation['rows']]
        summary['metric_noise'] = ablation['metric_noise']
    if 'plan' in hashes:
        plan_data = read_json(run.path('plan'))
        summary['plan'] = {'removed': plan_data['removed'], 'params': plan_data['params'],
                           'student_stage_table': plan_data['student_stage_table']}
    if 'distill_losses' in hashes:
        _, header, rows = read_csv(run.path('distill_losses'))
        if rows:
            summary['final_losses'] = dict(zip(header, [float(v) for v in rows[-1]]))
    if 'eval_summary' in hashes:
        evaluation = read_json(run.path('eval_summary'))
        summary['eval'] = {k: v for k, v in evaluation.items() if k not in ('config', 'config_hash', 'host')}
    pretty_write_json(summary, run.path('report_summary'))
    _written('report summary', run.path('report_summary'))
    return


def _fail(kind, message, exit_code):
    click.echo(json.dumps({'error': message, 'kind': kind, 'exit_code': exit_code}, sort_keys=True), err=True)
    return exit_code


def main(argv=None):
    try:
        vdmini.main(args=argv, prog_name='vdmini', standalone_mode=False)
    except VdminiError as e:
        return _fail(e.kind, str(e), e.exit_code)
    except click.UsageError as e:
        return _fail('usage', e.format_message(), 2)
    except click.ClickException as e:
        return _fail('config', e.format_message(), 2)
    except click.Abort:
        return _fail('aborted', 'aborted', 1)
    return 0


if __name__ == '__main__':
    sys.exit(main())
