from dataclasses import replace

import pytest

from src.netgraph import (GROUP_WIDTH, IDENTITY, SHORTCUT_CONV, AblationEdit, AblationError, BlockIdError,
                          GraphError, GraphValidationError, UnknownBlockError, ablate, canonical_graph_json,
                          check_graph, conv_params, count_params, graph_from_dict, graph_to_dict, load_graph,
                          make_block_id, parse_block_id, replacement_params, save_graph, stage_table,
                          origin_graph, validate)


def test_block_id_round_trip():
    address = parse_block_id('D.1.R.0.RB-S')
    assert (address.stage_kind, address.stage_index, address.block_type, address.layer_index, address.variant) == \
        ('Down', 1, 'R', 0, 'RB-S')
    assert address.stage_id == 'D.1'
    assert make_block_id('Up', 3, 2, 'AB-T') == 'U.3.A.2.AB-T'


@pytest.mark.parametrize('bad', ['', 'D.1.R.0', 'X.1.R.0.RB-S', 'D.1.A.0.RB-S', 'D.one.R.0.RB-S'])
def test_malformed_block_ids_are_rejected(bad):
    with pytest.raises(BlockIdError):
        parse_block_id(bad)


def test_origin_layout(toy):
    assert len(toy.block_ids()) == 76
    counts = {s.name: s.layer_counts() for s in toy.stages}
    assert counts == {'Down-0': (2, 2), 'Down-1': (2, 2), 'Down-2': (2, 2), 'Down-3': (2, 0), 'Mid-0': (2, 1),
                      'Up-0': (3, 0), 'Up-1': (3, 3), 'Up-2': (3, 3), 'Up-3': (3, 3)}
    assert validate(toy) == []


def test_full_width_graph_is_valid_and_counted_without_building():
    graph = origin_graph(320)
    assert validate(graph) == []
    rows = stage_table(graph)
    assert [r['dimension'] for r in rows[::2]] == [320, 640, 1280, 1280, 1280, 1280, 1280, 640, 320]
    assert count_params(graph).total > 10 ** 8


def test_tiny_graph_is_valid(tiny):
    assert check_graph(tiny) is tiny
    assert all(s.channels % GROUP_WIDTH == 0 for s in tiny.stages)


def test_param_table_sums_components(toy):
    table = count_params(toy)
    assert table.total == sum(table.per_component.values())
    assert set(table.blocks_only()) == set(toy.block_ids())
    assert {'conv_in', 'time_embed', 'head', 'D.0.downsample', 'U.0.upsample'} <= set(table.per_component)


def test_conv_params_formula():
    assert conv_params(3, 8) == 3 * 8 * 9 + 8
    assert conv_params(8, 16, (1, 1)) == 8 * 16 + 16
    assert conv_params(4, 4, (3,), bias=False) == 48


def test_ablate_same_width_block_uses_identity(toy):
    graph, edit = ablate(toy, 'D.0.R.0.RB-T')
    assert edit.replacement == IDENTITY
    assert graph.block('D.0.R.0.RB-T').replacement == IDENTITY
    assert validate(graph) == []
    assert count_params(graph).per_component['D.0.R.0.RB-T'] == 0
    assert replacement_params(edit) == 0


def test_ablate_width_changing_block_uses_shortcut_conv(toy):
    block = toy.block('D.1.R.0.RB-S')
    assert block.in_channels != block.out_channels
    graph, edit = ablate(toy, 'D.1.R.0.RB-S')
    assert edit.replacement == SHORTCUT_CONV
    assert validate(graph) == []
    assert count_params(graph).per_component['D.1.R.0.RB-S'] == \
        replacement_params(edit) == conv_params(block.in_channels, block.out_channels, (1, 1))


def test_ablation_leaves_other_blocks_untouched(toy):
    graph, _ = ablate(toy, 'U.2.A.1.AB-S')
    before, after = count_params(toy).per_component, count_params(graph).per_component
    changed = [k for k in before if before[k] != after[k]]
    assert changed == ['U.2.A.1.AB-S']


def test_ablating_twice_or_unknown_block_fails(toy):
    graph, _ = ablate(toy, 'D.0.R.0.RB-T')
    with pytest.raises(AblationError):
        ablate(graph, 'D.0.R.0.RB-T')
    with pytest.raises(UnknownBlockError):
        ablate(toy, 'D.9.R.0.RB-T')


def test_identity_edit_requires_matching_channels():
    with pytest.raises(AblationError):
        AblationEdit('D.1.R.0.RB-S', IDENTITY, 16, 32)


def test_validation_reports_the_broken_edge(toy):
    block = toy.block('U.1.R.0.RB-S')
    broken = toy.replace_block(replace(block, in_channels=block.in_channels - GROUP_WIDTH))
    issues = validate(broken)
    assert any('U.1.R.0.RB-S' in i.edge for i in issues)
    with pytest.raises(GraphValidationError) as info:
        check_graph(broken)
    assert info.value.exit_code == 2


def test_validation_rejects_stage_order_and_widths(toy):
    reordered = replace(toy, stages=(toy.stages[-1],) + toy.stages[:-1])
    assert validate(reordered)
    odd = toy.replace_block(replace(toy.block('D.0.A.0.AB-S'), hidden_channels=6))
    assert any('hidden channels 6' in i.message for i in validate(odd))


def test_empty_up_stage_drops_its_skip(toy):
    emptied = toy.replace_stage(replace(toy.stage('U.0'), blocks=()))
    # U.0 feeds U.1 at the same width, so only the skip disappears
    assert validate(emptied) == []


def test_graph_serialization_is_canonical(toy, tmp_path):
    path = str(tmp_path / 'graph.json')
    save_graph(toy, path)
    loaded = load_graph(path)
    assert loaded == toy
    assert canonical_graph_json(loaded) == canonical_graph_json(toy)
    assert graph_from_dict(graph_to_dict(toy)) == toy


def test_malformed_graph_description():
    with pytest.raises(GraphError):
        graph_from_dict({'stages': [{'kind': 'Down'}]})
