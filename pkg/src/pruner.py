'''
Block importance profiling by ablation, the VDMini pruning plan, and
dependency-grouped channel pruning with L2 / Taylor scores.

USAGE:
$ <script.py> <graph_json|origin> [base_width] [output_plan_json]

EXAMPLE:
$ python src/pruner.py origin 320 runs/default/reports/pruning_plan.json
'''

import logging
import sys
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from tqdm import tqdm

from src.diffusion import Denoiser, denoising_loss
from src.evalkit import fvd, generate_videos, mean_motion
from src.netgraph import (GROUP_WIDTH, HIDDEN_COUPLING, BlockGraph, ablate, channel_spaces, check_graph, count_params,
                          make_block_id, parse_block_id, param_shapes, stage_table,
                          graph_to_dict, graph_from_dict, load_graph, origin_graph, GraphError,
                          UnknownBlockError)
from src.synthdata import first_frame_condition
from src.unet import Model, init_param
from utils.errors import ConfigError, VdminiError
from utils.file_utils import format_float, pretty_write_json, write_csv
from utils.seed_utils import rng_for
from utils.tensor_core import Tape, Tensor, backward, named_grads
from utils.worker_utils import multi_run_batch

logger = logging.getLogger(__name__)


class PlanError(ConfigError):
    pass


class ChannelPruneError(ConfigError):
    pass


class MissingGradientError(VdminiError):
    pass


# ---------------------------------------------------------------- ablation


def ablated_model(model, block_id):
    '''Model with one block swapped for Identity / ShortcutConv; every other tensor is shared.'''
    graph, edit = ablate(model.graph, block_id)
    params = OrderedDict()
    for name, shape in param_shapes(graph).items():
        if name in model.params:
            params[name] = model.params[name]
        else:
            params[name] = Tensor(init_param(name, shape, 0))
    return Model(graph, params), edit


@dataclass
class AblationRow:
    block_id: str
    replacement: Optional[str]
    fvd_after_ablation: Optional[float]
    delta_fvd: Optional[float]
    latency_ms: float
    params: int
    motion: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self):
        return {
            'block_id': self.block_id,
            'replacement': self.replacement,
            'fvd_after_ablation': self.fvd_after_ablation,
            'delta_fvd': self.delta_fvd,
            'latency_ms': self.latency_ms,
            'params': self.params,
            'motion': self.motion,
            'error': self.error,
        }


@dataclass
class AblationReport:
    reference: AblationRow
    # Canonical block order of the profiled graph
    rows: 'OrderedDict[str, AblationRow]' = field(default_factory=OrderedDict)
    metric_noise: Optional[float] = None

    def ranked(self):
        scored = [r for r in self.rows.values() if r.delta_fvd is not None]
        failed = [r for r in self.rows.values() if r.delta_fvd is None]
        return sorted(scored, key=lambda r: -r.delta_fvd) + failed

    def to_dict(self, include_timing=True):
        def row_dict(r):
            d = r.to_dict()
            if not include_timing:
                d.pop('latency_ms')
            return d
        return {
            'reference': row_dict(self.reference),
            'rows': [row_dict(r) for r in self.ranked()],
            'metric_noise': self.metric_noise,
        }

    def save(self, json_path, csv_path, config_hash, extra=None):
        # No wall-clock fields here; save_latency writes those
        data = self.to_dict(include_timing=False)
        data['config_hash'] = config_hash
        data.update(extra or {})
        pretty_write_json(data, json_path)
        header = ['block_id', 'replacement', 'fvd_after_ablation', 'delta_fvd', 'params', 'motion', 'error']
        rows = []
        for r in [self.reference] + self.ranked():
            rows.append([r.block_id, r.replacement or '',
                         '' if r.fvd_after_ablation is None else float(r.fvd_after_ablation),
                         '' if r.delta_fvd is None else float(r.delta_fvd), r.params,
                         '' if r.motion is None else float(r.motion), r.error or ''])
        write_csv(csv_path, header, rows, config_hash)
        return

    def save_latency(self, csv_path, config_hash):
        rows = [[r.block_id, float(r.latency_ms), r.params] for r in [self.reference] + list(self.rows.values())]
        write_csv(csv_path, ['block_id', 'latency_ms', 'params'], rows, config_hash)
        return


class ImportanceProfiler():
    '''
    Scores blocks by the FVD proxy of samples from the model with that
    block ablated. Every model is sampled from the same noise, so rows do
    not depend on the order blocks are profiled in.
    '''
    def __init__(self, teacher, eval_videos, extractor, precond, schedule, sample_steps=8,
                 num_samples=32, seed=0, workers=4, metric=None):
        self.teacher = teacher
        self.eval_videos = np.asarray(eval_videos)
        if len(self.eval_videos) == 0:
            raise ConfigError('profiling needs a non-empty eval set')
        self.extractor = extractor
        self.precond = precond
        self.schedule = schedule
        self.sample_steps = sample_steps
        self.num_samples = min(num_samples, len(self.eval_videos))
        self.seed = seed
        self.workers = workers
        self.metric = metric or (lambda generated, reference: fvd(generated, reference, extractor, workers=1))
        self.conditions = first_frame_condition(self.eval_videos[:self.num_samples])

    def samples(self, model):
        rng = rng_for(self.seed, 'profile', 'samples')
        frames = self.eval_videos.shape[1]
        conds = self.conditions if model.graph.conditioned else np.zeros_like(self.conditions)
        return generate_videos(Denoiser(model, self.precond), self.schedule, self.sample_steps, conds, frames, rng)

    def score(self, model):
        generated = self.samples(model)
        return self.metric(generated, self.eval_videos), mean_motion(generated)

    def estimate_metric_noise(self, subsets=3):
        '''Standard deviation of the reference score over disjoint eval subsets.'''
        generated = self.samples(self.teacher)
        chunks = np.array_split(np.arange(len(self.eval_videos)), subsets)
        scores = [self.metric(generated, self.eval_videos[idx]) for idx in chunks if len(idx)]
        return float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0

    def profile(self, blocks, latency_ms=None, noise_subsets=0):
        graph = self.teacher.graph
        latency_ms = latency_ms or {}
        params = count_params(graph).per_component
        order = graph.block_ids()
        for block_id in blocks:
            if block_id not in params:
                raise UnknownBlockError('unknown block id: %r' % (block_id,))
        blocks = [b for b in order if b in set(blocks)]

        ref_fvd, ref_motion = self.score(self.teacher)
        reference = AblationRow('reference', None, ref_fvd, 0.0, float(sum(latency_ms.values())),
                                count_params(graph).total, ref_motion)

        def run(block_id):
            model, edit = ablated_model(self.teacher, block_id)
            return edit, self.score(model)

        results = multi_run_batch(run, blocks, self.workers, desc='Profiling blocks')
        rows = OrderedDict()
        for block_id, result, error in results:
            if error is not None:
                logger.warning('Profiling %s failed: %s', block_id, error)
                rows[block_id] = AblationRow(block_id, None, None, None, float(latency_ms.get(block_id, 0.0)),
                                             params[block_id], None, '%s: %s' % (type(error).__name__, error))
                continue
            edit, (score, motion) = result
            rows[block_id] = AblationRow(block_id, edit.replacement, score, score - ref_fvd,
                                         float(latency_ms.get(block_id, 0.0)), params[block_id], motion)
        noise = self.estimate_metric_noise(noise_subsets) if noise_subsets else None
        return AblationReport(reference, rows, noise)


def profile_importance(teacher, eval_set, blocks, metric, extractor=None, precond=None, schedule=None,
                       sample_steps=8, num_samples=32, seed=0, workers=4, latency_ms=None, noise_subsets=0):
    from src.diffusion import KarrasSchedule, Preconditioner
    videos = getattr(eval_set, 'videos', eval_set)
    profiler = ImportanceProfiler(teacher, videos, extractor, precond or Preconditioner(),
                                  schedule or KarrasSchedule(), sample_steps, num_samples, seed, workers, metric)
    return profiler.profile(blocks, latency_ms, noise_subsets)


# ---------------------------------------------------------------- VDMini plan

# Stage layout the plan applies to: stage id -> (R layers, A layers)
ORIGIN_LAYOUT = OrderedDict([
    ('D.0', (2, 2)), ('D.1', (2, 2)), ('D.2', (2, 2)), ('D.3', (2, 0)), ('M.0', (2, 1)),
    ('U.0', (3, 0)), ('U.1', (3, 3)), ('U.2', (3, 3)), ('U.3', (3, 3)),
])
# Layer indices removed per stage; everything else keeps its position
VDMINI_REMOVALS = OrderedDict([
    ('D.0', (1,)), ('D.1', (1,)), ('D.2', ()), ('D.3', (0, 1)), ('M.0', (0, 1)),
    ('U.0', (0, 1, 2)), ('U.1', ()), ('U.2', (1,)), ('U.3', (1,)),
])


@dataclass(frozen=True)
class StageReduction:
    stage: str
    block_type: str
    before: int
    after: int

    def to_dict(self):
        return {'stage': self.stage, 'type': self.block_type, 'before': self.before, 'after': self.after}


@dataclass
class PruningPlan:
    source_graph: BlockGraph
    student_graph: BlockGraph
    removed: Tuple[str, ...]
    reductions: Tuple[StageReduction, ...]
    # Retained student block id -> teacher block id
    inheritance: 'OrderedDict[str, str]'

    @classmethod
    def identity(cls, graph):
        return cls(graph, graph, (), (), OrderedDict((b, b) for b in graph.block_ids()))

    def to_dict(self):
        return {
            'removed': list(self.removed),
            'reductions': [r.to_dict() for r in self.reductions],
            'inheritance': dict(self.inheritance),
            'source_stage_table': stage_table(self.source_graph),
            'student_stage_table': stage_table(self.student_graph),
            'source_graph': graph_to_dict(self.source_graph),
            'student_graph': graph_to_dict(self.student_graph),
            'params': {'source': count_params(self.source_graph).total,
                       'student': count_params(self.student_graph).total},
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(graph_from_dict(data['source_graph']), graph_from_dict(data['student_graph']),
                       tuple(data['removed']),
                       tuple(StageReduction(r['stage'], r['type'], int(r['before']), int(r['after']))
                             for r in data['reductions']),
                       OrderedDict(sorted(data['inheritance'].items(),
                                          key=lambda kv: _block_order(data, kv[0]))))
        except (KeyError, TypeError, ValueError) as e:
            raise PlanError('malformed pruning plan: %s' % e)

    def save(self, path, config_hash=None):
        data = self.to_dict()
        if config_hash is not None:
            data['config_hash'] = config_hash
        pretty_write_json(data, path)
        return


def _block_order(data, block_id):
    ids = [b['block_id'] for s in data['student_graph']['stages'] for b in s['blocks']]
    return ids.index(block_id) if block_id in ids else len(ids)


def _conforms(graph):
    problems = []
    ids = [s.stage_id for s in graph.stages]
    if ids != list(ORIGIN_LAYOUT):
        return ['stages %s, expected %s' % (ids, list(ORIGIN_LAYOUT))]
    for stage in graph.stages:
        counts = stage.layer_counts()
        if counts != ORIGIN_LAYOUT[stage.stage_id]:
            problems.append('%s has %d R / %d A layers, expected %d / %d'
                            % ((stage.name,) + counts + ORIGIN_LAYOUT[stage.stage_id]))
    return problems


def plan_vdmini(graph):
    '''
    Remove the second R-A pair in Down-0, Down-1, Up-2 and Up-3 and empty
    Down-3, Mid and Up-0. Retained blocks are renumbered in order.
    '''
    problems = _conforms(graph)
    if problems:
        raise PlanError('non-conforming stage layout: ' + '; '.join(problems))
    removed, reductions, inheritance = [], [], OrderedDict()
    stages = []
    for stage in graph.stages:
        drop = set(VDMINI_REMOVALS[stage.stage_id])
        kept_layers = sorted({parse_block_id(b.block_id).layer_index for b in stage.blocks} - drop)
        renumber = {old: new for new, old in enumerate(kept_layers)}
        blocks = []
        for block in stage.blocks:
            address = parse_block_id(block.block_id)
            if address.layer_index in drop:
                removed.append(block.block_id)
                continue
            new_id = make_block_id(stage.kind, stage.index, renumber[address.layer_index], address.variant)
            blocks.append(replace(block, block_id=new_id))
            inheritance[new_id] = block.block_id
        stages.append(replace(stage, blocks=tuple(blocks)))
        for block_type, before in zip(('ResBlock', 'TransformerBlock'), stage.layer_counts()):
            after = before - len([i for i in drop if i < before])
            if after != before:
                reductions.append(StageReduction(stage.name, block_type, before, after))
    student = replace(graph, stages=tuple(stages))
    try:
        check_graph(student)
    except GraphError as e:
        raise PlanError('plan does not apply to this graph: %s' % e)
    return PruningPlan(graph, student, tuple(removed), tuple(reductions), inheritance)


def apply_plan(teacher_model, plan, trainable=True):
    '''Student whose retained blocks (and all stems) are bitwise copies of the teacher's.'''
    if teacher_model.graph != plan.source_graph:
        raise PlanError('pruning plan was made for a different graph')
    params = OrderedDict()
    retained = set(plan.student_graph.block_ids())
    for name, shape in param_shapes(plan.student_graph).items():
        source = name
        prefix = '.'.join(name.split('.')[:5])
        if prefix in retained:
            if prefix not in plan.inheritance:
                raise PlanError('no inheritance entry for student block %s' % prefix)
            source = plan.inheritance[prefix] + name[len(prefix):]
        if source not in teacher_model.params:
            raise PlanError('inheritance references missing teacher parameter %s' % source)
        tensor = teacher_model.params[source]
        if tensor.shape != tuple(shape):
            raise PlanError('%s: teacher shape %s, student expects %s' % (source, tensor.shape, shape))
        params[name] = Tensor.wrap(tensor.data, requires_grad=trainable)
    return Model(plan.student_graph, params)


# ---------------------------------------------------------------- channel pruning

HIDDEN = 'hidden'
WIDTH = 'width'


@dataclass
class ChannelGroup:
    # Block id for hidden groups; the channel space (conv_in or the block that opens it) for width groups
    block_id: str
    group_index: int
    # (parameter name, axis, channel index)
    entries: Tuple[Tuple[str, int, int], ...]
    score: float = 0.0
    kind: str = HIDDEN

    @property
    def label(self):
        if self.kind == WIDTH:
            return '%s.out#%d' % (self.block_id, self.group_index)
        return '%s#%d' % (self.block_id, self.group_index)


def channel_groups(graph):
    '''
    GROUP_WIDTH-channel groups of every non-ablated block's hidden layer,
    then of every stage-width channel space (see netgraph.channel_spaces).
    A width group holds each slice its channels occupy, including every
    copy inside a skip concatenation.
    '''
    groups = []
    for block in graph.blocks():
        if block.replacement is not None:
            continue
        coupling = HIDDEN_COUPLING[parse_block_id(block.block_id).block_type]
        for g in range(block.hidden_channels // GROUP_WIDTH):
            entries = tuple((block.block_id + '.' + local, axis, c)
                            for local, axis in coupling
                            for c in range(g * GROUP_WIDTH, (g + 1) * GROUP_WIDTH))
            groups.append(ChannelGroup(block.block_id, g, entries))
    spaces = channel_spaces(graph)
    for space, width in spaces.widths.items():
        for g in range(width // GROUP_WIDTH):
            entries = tuple((name, axis, start + c)
                            for name, axis, layout in spaces.slices
                            for start in spaces.offsets(layout, space)
                            for c in range(g * GROUP_WIDTH, (g + 1) * GROUP_WIDTH))
            groups.append(ChannelGroup(space, g, entries, kind=WIDTH))
    return groups


def _values(params, name):
    value = params[name]
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def score_magnitude_l2(group, params):
    total = 0.0
    for name, axis, index in group.entries:
        w = np.take(_values(params, name), index, axis=axis)
        total += float(np.sum(w * w))
    return float(np.sqrt(total))


def score_taylor(group, params, grads):
    total = 0.0
    for name, axis, index in group.entries:
        if name not in grads:
            raise MissingGradientError('no gradient for %s in group %s' % (name, group.label))
        w = np.take(_values(params, name), index, axis=axis)
        g = np.take(_values(grads, name), index, axis=axis)
        total += float(np.sum(w * g))
    return abs(total)


SCORERS = ('l2', 'taylor')


def calibration_grads(model, videos, precond, seed, size=64):
    '''Gradients of one denoising-loss pass over a fixed calibration batch.'''
    videos = np.asarray(videos, dtype=np.float64)
    rng = rng_for(seed, 'calibration')
    idx = np.sort(rng.choice(len(videos), size=min(size, len(videos)), replace=False))
    batch = videos[idx]
    cond = first_frame_condition(batch) if model.graph.conditioned else None
    trainable = model.trainable()
    with Tape() as tape:
        loss = denoising_loss(Denoiser(trainable, precond), batch, rng, precond.sigma_data, cond=cond)
    return named_grads(backward(tape, loss), trainable.params)


def channel_prune(graph, params, ratio, scorer='l2', grads=None, scope='global'):
    '''
    Remove the lowest-scoring floor(ratio * groups) channel groups (scope
    "global") or that fraction inside every block's hidden layer and every
    channel space (scope "local"). Surviving weights are copied.
    '''
    if not 0.0 <= ratio < 1.0:
        raise ConfigError('channel prune ratio must lie in [0, 1), got %r' % ratio)
    if scorer not in SCORERS:
        raise ConfigError('unknown channel scorer %r' % (scorer,))
    if scope not in ('global', 'local'):
        raise ConfigError('unknown channel prune scope %r' % (scope,))
    if scorer == 'taylor' and grads is None:
        raise MissingGradientError('Taylor scoring needs calibration gradients')

    groups = channel_groups(graph)
    for group in tqdm(groups, desc='Scoring channel groups', unit=' group', disable=len(groups) < 64):
        group.score = score_magnitude_l2(group, params) if scorer == 'l2' else score_taylor(group, params, grads)

    per_owner = OrderedDict()
    for g in groups:
        per_owner.setdefault((g.kind, g.block_id), []).append(g)
    order = {owner: i for i, owner in enumerate(per_owner)}

    def rank(g):
        return (g.score, order[(g.kind, g.block_id)], g.group_index)

    spaces = channel_spaces(graph)
    widths = OrderedDict(spaces.widths)

    def fits(g):
        # A width cut must leave its space non-empty and every widening block still widening
        if g.kind == HIDDEN:
            return True
        trial = OrderedDict(widths)
        trial[g.block_id] -= GROUP_WIDTH
        return trial[g.block_id] > 0 and all(sum(trial[s] for s in spaces.block_layouts[opener][0]) != trial[opener]
                                             for opener in trial if opener != 'conv_in')

    if scope == 'global':
        pools = [(sorted(groups, key=rank), int(np.floor(ratio * len(groups))))]
    else:
        pools = [(sorted(owner_groups, key=rank), int(np.floor(ratio * len(owner_groups))))
                 for owner_groups in per_owner.values()]
    doomed = []
    for pool, quota in pools:
        taken = []
        for g in pool:
            if len(taken) == quota:
                break
            if fits(g):
                taken.append(g)
                if g.kind == WIDTH:
                    widths[g.block_id] -= GROUP_WIDTH
        doomed += taken
    if not doomed:
        return graph, OrderedDict(params)

    removing = OrderedDict()
    for g in doomed:
        removing.setdefault((g.kind, g.block_id), set()).add(g.group_index)
    for (kind, owner), indices in removing.items():
        if kind == HIDDEN and len(indices) == len(per_owner[(kind, owner)]):
            raise ChannelPruneError('pruning ratio %.3g would empty the hidden layer of %s' % (ratio, owner))

    # (parameter, axis) -> channel indices to drop
    cuts = OrderedDict()
    for g in doomed:
        for name, axis, index in g.entries:
            cuts.setdefault((name, axis), set()).add(index)
    new_params = OrderedDict(params)
    for (name, axis), indices in cuts.items():
        kept = np.delete(_values(new_params, name), sorted(indices), axis=axis)
        requires_grad = params[name].requires_grad if isinstance(params[name], Tensor) else False
        new_params[name] = Tensor(kept, requires_grad=requires_grad)

    new_graph = graph
    for (kind, owner), indices in removing.items():
        if kind == WIDTH:
            logger.debug('Pruned %d of %d channels from the %s channel space', GROUP_WIDTH * len(indices),
                         spaces.widths[owner], owner)
            continue
        block = graph.block(owner)
        new_graph = new_graph.replace_block(replace(block, hidden_channels=block.hidden_channels
                                                    - GROUP_WIDTH * len(indices)))
        logger.debug('Pruned %d of %d hidden channels from %s', GROUP_WIDTH * len(indices),
                     block.hidden_channels, owner)
    new_graph = spaces.resized(new_graph, widths)
    check_graph(new_graph)
    return new_graph, new_params


def channel_prune_model(model, ratio, scorer='l2', grads=None, scope='global'):
    graph, params = channel_prune(model.graph, model.params, ratio, scorer, grads, scope)
    return Model(graph, params)


if __name__ == '__main__':
    source = sys.argv[1]
    width = int(sys.argv[2]) if len(sys.argv) > 2 else 16
    graph = origin_graph(width) if source == 'origin' else load_graph(source)
    plan = plan_vdmini(graph)
    for row in stage_table(plan.student_graph):
        print('%-8s %-16s %6d %3d' % (row['stage'], row['type'], row['dimension'], row['blocks']))
    ratio = count_params(plan.student_graph).total / count_params(graph).total
    print('Parameter ratio (student / teacher):', format_float(ratio))
    if len(sys.argv) > 3:
        plan.save(sys.argv[3])
        print('Written pruning plan to:', sys.argv[3])
