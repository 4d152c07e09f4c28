import json
import os
from collections import OrderedDict

import numpy as np
import pytest

from src.diffusion import KarrasSchedule, Preconditioner
from src.netgraph import (GROUP_WIDTH, HIDDEN_COUPLING, SHORTCUT_CONV, UnknownBlockError, channel_spaces, count_params,
                          param_shapes, stage_table, origin_graph, validate)
from src.pruner import (ChannelPruneError, MissingGradientError, PlanError, PruningPlan, ablated_model, apply_plan,
                        calibration_grads, channel_groups, channel_prune, channel_prune_model, plan_vdmini,
                        profile_importance)
from src.evalkit import FeatureExtractor, measure_latency
from src.synthdata import SceneTemplate, gen_dataset
from src.train_teacher import TeacherTrainer
from src.unet import Model, build, params_checksum
from utils.errors import ConfigError
from utils.file_utils import read_csv
from utils.tensor_core import Tensor, no_grad

GOLDEN = os.path.join(os.path.dirname(__file__), 'golden', 'vdmini_plan.json')


def mean_intensity(generated, reference):
    return float(np.mean(generated))


def test_plan_matches_the_golden_table_at_full_width():
    with open(GOLDEN, encoding='utf-8') as f:
        golden = json.load(f)
    plan = plan_vdmini(origin_graph(320))
    assert [r.to_dict() for r in plan.reductions] == golden['reductions']
    assert list(plan.removed) == golden['removed']
    assert stage_table(plan.student_graph) == golden['student_stage_table']


def test_plan_keeps_44_of_76_blocks(toy):
    plan = plan_vdmini(toy)
    assert len(plan.removed) == 32
    assert len(plan.student_graph.block_ids()) == 44
    assert list(plan.inheritance) == plan.student_graph.block_ids()
    assert validate(plan.student_graph) == []


def test_retained_blocks_are_renumbered_in_order(toy):
    plan = plan_vdmini(toy)
    assert plan.inheritance['U.2.R.1.RB-S'] == 'U.2.R.2.RB-S'
    assert plan.inheritance['D.0.A.0.AB-T'] == 'D.0.A.0.AB-T'
    assert 'D.3' not in {b.split('.', 2)[0] + '.' + b.split('.', 2)[1] for b in plan.inheritance}


def test_plan_cuts_about_forty_percent_of_parameters(toy):
    plan = plan_vdmini(toy)
    ratio = count_params(plan.student_graph).total / count_params(toy).total
    assert 0.55 <= ratio <= 0.65


def test_plan_rejects_a_non_conforming_graph(tiny):
    with pytest.raises(PlanError):
        plan_vdmini(tiny)


def test_plan_serialization_round_trip(toy, tmp_path):
    plan = plan_vdmini(toy)
    path = str(tmp_path / 'plan.json')
    plan.save(path, config_hash='abc')
    with open(path, encoding='utf-8') as f:
        data = json.load(f)
    assert data['config_hash'] == 'abc'
    loaded = PruningPlan.from_dict(data)
    assert loaded.student_graph == plan.student_graph
    assert loaded.source_graph == plan.source_graph
    assert loaded.removed == plan.removed
    assert list(loaded.inheritance.items()) == list(plan.inheritance.items())
    with pytest.raises(PlanError):
        PruningPlan.from_dict({'removed': []})


def test_apply_plan_copies_retained_weights_bitwise(small_toy_model, rng):
    plan = plan_vdmini(small_toy_model.graph)
    student = apply_plan(small_toy_model, plan)
    for name, tensor in student.params.items():
        prefix = '.'.join(name.split('.')[:5])
        source = plan.inheritance[prefix] + name[len(prefix):] if prefix in plan.inheritance else name
        assert tensor.data.tobytes() == small_toy_model.params[source].data.tobytes()
        assert tensor.requires_grad
    x = rng.standard_normal((1, 4, 1, 8, 8))
    with no_grad():
        assert student(Tensor(x), np.zeros(1)).shape == x.shape


def test_apply_plan_needs_the_matching_teacher(tiny_model, small_toy_model):
    plan = plan_vdmini(small_toy_model.graph)
    with pytest.raises(PlanError):
        apply_plan(tiny_model, plan)
    identity = PruningPlan.identity(tiny_model.graph)
    assert params_checksum(apply_plan(tiny_model, identity)) == params_checksum(tiny_model)


def test_shortcut_conv_starts_as_channel_average(tiny_model):
    # D.1 widens 4 -> 8 channels in its first ResBlock
    model, block_id = tiny_model, 'D.1.R.0.RB-S'
    ablated, edit = ablated_model(model, block_id)
    assert edit.replacement == SHORTCUT_CONV
    weight = ablated.params[block_id + '.shortcut.weight'].data
    np.testing.assert_array_equal(weight, np.full(weight.shape, 1.0 / edit.in_channels))
    shared = [k for k in model.params if not k.startswith(block_id + '.')]
    assert all(ablated.params[k] is model.params[k] for k in shared)


def zero_residual(model, block_id):
    params = OrderedDict(model.params)
    for name in ('conv2.weight', 'conv2.bias'):
        key = block_id + '.' + name
        params[key] = Tensor(np.zeros(params[key].shape))
    return model.with_params(params)


def profile(model, videos, blocks, workers=2, noise_subsets=0):
    return profile_importance(model, videos, blocks, mean_intensity, precond=Preconditioner(),
                              schedule=KarrasSchedule(), sample_steps=1, num_samples=4, seed=0,
                              workers=workers, noise_subsets=noise_subsets)


def test_ablating_a_null_block_scores_zero(tiny_model, small_videos):
    model = zero_residual(tiny_model, 'D.0.R.0.RB-T')
    report = profile(model, small_videos, ['D.0.R.0.RB-T', 'U.1.A.0.AB-S'])
    assert report.rows['D.0.R.0.RB-T'].delta_fvd == 0.0
    assert report.rows['D.0.R.0.RB-T'].replacement == 'Identity'
    assert report.reference.delta_fvd == 0.0
    assert report.reference.params == count_params(model.graph).total


def test_profile_rows_do_not_depend_on_block_order(tiny_model, small_videos):
    blocks = ['U.1.A.0.AB-T', 'D.0.R.0.RB-S', 'M.0.R.0.RB-T']
    a = profile(tiny_model, small_videos, blocks, workers=1)
    b = profile(tiny_model, small_videos, blocks[::-1], workers=3)
    assert list(a.rows) == ['D.0.R.0.RB-S', 'M.0.R.0.RB-T', 'U.1.A.0.AB-T']
    assert a.to_dict(include_timing=False) == b.to_dict(include_timing=False)


def test_profile_report_files_and_noise(tiny_model, small_videos, tmp_path):
    report = profile(tiny_model, small_videos, ['D.0.R.0.RB-S'], noise_subsets=2)
    assert report.metric_noise is not None and report.metric_noise >= 0.0
    json_path, csv_path = str(tmp_path / 'importance.json'), str(tmp_path / 'importance.csv')
    report.save(json_path, csv_path, 'abc')
    config_hash, header, rows = read_csv(csv_path)
    assert config_hash == 'abc'
    assert header[0] == 'block_id'
    assert [r[0] for r in rows] == ['reference', 'D.0.R.0.RB-S']
    assert 'latency_ms' not in header
    with open(json_path, encoding='utf-8') as f:
        saved = json.load(f)
    assert all('latency_ms' not in row for row in saved['rows'] + [saved['reference']])

    latency_path = str(tmp_path / 'latency.csv')
    report.save_latency(latency_path, 'abc')
    config_hash, header, rows = read_csv(latency_path)
    assert (config_hash, header) == ('abc', ['block_id', 'latency_ms', 'params'])
    assert [r[0] for r in rows] == ['reference', 'D.0.R.0.RB-S']
    with pytest.raises(UnknownBlockError):
        profile(tiny_model, small_videos, ['D.7.R.0.RB-S'])


def test_channel_groups_follow_hidden_width(tiny):
    groups = [g for g in channel_groups(tiny) if g.kind == 'hidden']
    assert sum(b.hidden_channels // GROUP_WIDTH for b in tiny.blocks()) == len(groups)
    assert all(len(g.entries) == len(HIDDEN_COUPLING[g.block_id.split('.')[2]]) * GROUP_WIDTH for g in groups)


def test_width_groups_cover_every_channel_space(tiny):
    spaces = channel_spaces(tiny)
    assert dict(spaces.widths) == {'conv_in': 4, 'D.1.R.0.RB-S': 8, 'U.0.R.0.RB-S': 8, 'U.1.R.0.RB-S': 4}
    # U.0 concatenates the Mid output with the D.1 skip, both in the same space
    assert spaces.block_layouts['U.0.R.0.RB-S'][0] == ('D.1.R.0.RB-S', 'D.1.R.0.RB-S')
    groups = [g for g in channel_groups(tiny) if g.kind == 'width']
    assert len(groups) == sum(w // GROUP_WIDTH for w in spaces.widths.values())
    assert spaces.resized(tiny, spaces.widths) == tiny


def shrink_group(params, group, factor=1e-6):
    params = OrderedDict(params)
    for name, axis, index in group.entries:
        data = np.array(params[name].data)
        picked = [slice(None)] * data.ndim
        picked[axis] = index
        data[tuple(picked)] *= factor
        params[name] = Tensor(data)
    return params


def test_removing_a_width_group_shrinks_every_coupled_layer(tiny_model):
    groups = channel_groups(tiny_model.graph)
    group = next(g for g in groups if g.kind == 'width' and g.block_id == 'U.0.R.0.RB-S' and g.group_index == 0)
    params = shrink_group(tiny_model.params, group)
    graph, pruned = channel_prune(tiny_model.graph, params, 1.5 / len(groups))
    assert validate(graph) == []
    assert graph.stage('U.0').channels == 4
    assert graph.block('U.0.R.0.RB-S').out_channels == 4
    assert graph.block('U.1.R.0.RB-S').in_channels == 8
    for name, shape in param_shapes(graph).items():
        assert pruned[name].shape == shape

    cut = OrderedDict()
    for name, axis, index in group.entries:
        cut.setdefault(name, OrderedDict()).setdefault(axis, []).append(index)
    assert {'U.0.R.0.RB-S.skip.weight', 'U.0.R.0.RB-T.conv1.weight', 'U.0.upsample.weight',
            'U.1.R.0.RB-S.norm1.weight', 'U.1.R.0.RB-S.skip.weight'} <= set(cut)
    for name, axes in cut.items():
        expected = params[name].data
        for axis, indices in axes.items():
            assert pruned[name].shape[axis] == params[name].shape[axis] - GROUP_WIDTH
            expected = np.delete(expected, indices, axis=axis)
        np.testing.assert_array_equal(pruned[name].data, expected)

    with no_grad():
        out = Model(graph, pruned)(Tensor(np.zeros((1, 4, 1, 8, 8))), np.zeros(1))
    assert out.shape == (1, 4, 1, 8, 8)


def test_width_cuts_keep_widening_blocks_widening(tiny_model):
    # D.1 opens at 8 channels from a 4-channel input; halving it would turn its skip conv into an identity
    groups = channel_groups(tiny_model.graph)
    params = tiny_model.params
    for g in groups:
        if g.kind == 'width' and g.block_id == 'D.1.R.0.RB-S':
            params = shrink_group(params, g)
        elif g.kind == 'width' and g.block_id == 'U.0.R.0.RB-S' and g.group_index == 0:
            params = shrink_group(params, g, 1e-3)
    graph, _ = channel_prune(tiny_model.graph, params, 1.5 / len(groups))
    assert graph.block('D.1.R.0.RB-S').out_channels == 8
    assert graph.stage('U.0').channels == 4
    assert count_params(graph).total < count_params(tiny_model.graph).total
    assert validate(graph) == []


def test_zero_ratio_leaves_the_graph_unchanged(tiny_model):
    graph, params = channel_prune(tiny_model.graph, tiny_model.params, 0.0)
    assert graph is tiny_model.graph
    assert list(params) == list(tiny_model.params)


def test_removing_one_group_shrinks_every_coupled_layer(tiny_model):
    block_id = 'D.1.R.0.RB-T'
    assert tiny_model.graph.block(block_id).hidden_channels == 2 * GROUP_WIDTH
    params = OrderedDict(tiny_model.params)
    originals = {}
    for local, axis in HIDDEN_COUPLING['R']:
        name = block_id + '.' + local
        data = np.array(params[name].data)
        originals[name] = (data, axis)
        index = [slice(None)] * data.ndim
        index[axis] = slice(0, GROUP_WIDTH)
        data[tuple(index)] *= 1e-6
        params[name] = Tensor(data)
    ratio = 1.5 / len(channel_groups(tiny_model.graph))
    graph, pruned = channel_prune(tiny_model.graph, params, ratio)
    assert graph.block(block_id).hidden_channels == GROUP_WIDTH
    for name, (data, axis) in originals.items():
        assert pruned[name].shape[axis] == GROUP_WIDTH
        np.testing.assert_array_equal(pruned[name].data, np.take(data, range(GROUP_WIDTH, 2 * GROUP_WIDTH), axis=axis))
    assert validate(graph) == []


@pytest.mark.parametrize('scorer', ['l2', 'taylor'])
def test_channel_pruning_reduces_parameters(tiny_model, small_videos, scorer):
    grads = None
    if scorer == 'taylor':
        grads = calibration_grads(tiny_model, small_videos, Preconditioner(), seed=0, size=4)
    pruned = channel_prune_model(tiny_model, 0.5, scorer, grads, scope='local')
    assert validate(pruned.graph) == []
    assert count_params(pruned.graph).total < count_params(tiny_model.graph).total
    assert pruned.num_params() == count_params(pruned.graph).total
    with no_grad():
        out = pruned(Tensor(np.zeros((1, 4, 1, 8, 8))), np.zeros(1))
    assert out.shape == (1, 4, 1, 8, 8)


def test_channel_pruning_errors(tiny_model):
    with pytest.raises(MissingGradientError):
        channel_prune(tiny_model.graph, tiny_model.params, 0.5, 'taylor')
    with pytest.raises(ChannelPruneError) as info:
        channel_prune(tiny_model.graph, tiny_model.params, 0.99)
    assert '.R.' in str(info.value) or '.A.' in str(info.value)
    for bad in (dict(ratio=1.0), dict(ratio=0.5, scorer='random'), dict(ratio=0.5, scope='block')):
        with pytest.raises(ConfigError):
            channel_prune(tiny_model.graph, tiny_model.params, **bad)


@pytest.mark.slow
def test_planned_student_is_faster_than_the_teacher():
    teacher = build(origin_graph(8), init_seed=0)
    student = apply_plan(teacher, plan_vdmini(teacher.graph), trainable=False)
    shape = (1, 8, 1, 16, 16)
    teacher_ms = measure_latency(teacher, shape, warmup=2, reps=30).total_ms
    student_ms = measure_latency(student, shape, warmup=2, reps=30).total_ms
    assert student_ms <= 0.8 * teacher_ms


@pytest.mark.slow
def test_ablating_a_trained_block_beats_the_metric_noise(tiny):
    template = SceneTemplate(height=8, width=8, frames=4, size_range=(2, 4))
    train = gen_dataset(template, 48, seed=11, split='train', workers=2).videos
    eval_videos = gen_dataset(template, 24, seed=11, split='eval', workers=2).videos
    trainer = TeacherTrainer(tiny, train, batch_size=8)
    trainer.train(200)
    teacher = zero_residual(trainer.model.frozen(), 'D.0.R.0.RB-T')
    # U.1 closes the network; without it the head sees a channel average
    report = profile_importance(teacher, eval_videos, ['D.0.R.0.RB-T', 'U.1.R.0.RB-S'], None,
                                extractor=FeatureExtractor(channels=1, width=4, dim=8), precond=Preconditioner(),
                                schedule=KarrasSchedule(), sample_steps=4, num_samples=24, seed=0, workers=2,
                                noise_subsets=3)
    noise = report.metric_noise
    assert abs(report.rows['D.0.R.0.RB-T'].delta_fvd) <= 2 * noise
    assert report.rows['U.1.R.0.RB-S'].delta_fvd > 2 * noise
