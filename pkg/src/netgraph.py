'''
Block graph of a U-Net style video denoiser: the single description used
to build, ablate, prune and account a model.

A graph is Down stages, at most one Mid stage, then as many Up stages as
Down stages. Stage layers come in R-A pairs: layer i holds ResBlock R.i
(spatial + temporal) followed by TransformerBlock A.i (spatial +
temporal) when the stage has attention at that depth. Block ids read
"D.1.R.0.RB-S": stage kind, stage index, type, layer index, variant.

The output of Down-i (before its downsampler) is concatenated into the
first block of Up-(last-i); an Up stage without blocks drops its skip.

USAGE:
$ <script.py> <graph_json|origin> [base_width]

EXAMPLE:
$ python src/netgraph.py origin 320
'''

import math
import re
import sys
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

from utils.errors import ConfigError
from utils.file_utils import dumps_json, pretty_write_json, read_json

RES_SPATIAL = 'ResBlock-Spatial'
RES_TEMPORAL = 'ResBlock-Temporal'
ATTN_SPATIAL = 'TransformerBlock-Spatial'
ATTN_TEMPORAL = 'TransformerBlock-Temporal'

VARIANT_OF = {
    RES_SPATIAL: 'RB-S',
    RES_TEMPORAL: 'RB-T',
    ATTN_SPATIAL: 'AB-S',
    ATTN_TEMPORAL: 'AB-T',
}
KIND_OF = {v: k for k, v in VARIANT_OF.items()}
TYPE_OF_VARIANT = {'RB-S': 'R', 'RB-T': 'R', 'AB-S': 'A', 'AB-T': 'A'}

STAGE_PREFIX = {'Down': 'D', 'Mid': 'M', 'Up': 'U'}
STAGE_KIND = {v: k for k, v in STAGE_PREFIX.items()}
STAGE_ORDER = {'Down': 0, 'Mid': 1, 'Up': 2}

IDENTITY = 'Identity'
SHORTCUT_CONV = 'ShortcutConv'

# Channels per group-normalization group; channel pruning removes whole groups
GROUP_WIDTH = 4

BLOCK_ID_RE = re.compile(r'^([DMU])\.(\d+)\.([RA])\.(\d+)\.(RB-S|RB-T|AB-S|AB-T)$')


class GraphError(ConfigError):
    pass


class BlockIdError(GraphError):
    pass


class UnknownBlockError(GraphError):
    pass


class AblationError(GraphError):
    pass


class GraphValidationError(GraphError):
    def __init__(self, issues):
        self.issues = list(issues)
        lines = ['%s: %s' % (i.edge, i.message) for i in self.issues]
        super(GraphValidationError, self).__init__('invalid block graph: ' + '; '.join(lines))


@dataclass(frozen=True)
class BlockAddress:
    stage_kind: str
    stage_index: int
    block_type: str
    layer_index: int
    variant: str

    @property
    def stage_id(self):
        return '%s.%d' % (STAGE_PREFIX[self.stage_kind], self.stage_index)


def parse_block_id(block_id):
    match = BLOCK_ID_RE.match(block_id or '')
    if not match:
        raise BlockIdError('malformed block id: %r' % (block_id,))
    prefix, stage_index, block_type, layer_index, variant = match.groups()
    if TYPE_OF_VARIANT[variant] != block_type:
        raise BlockIdError('block id %r mixes type %s with variant %s' % (block_id, block_type, variant))
    return BlockAddress(STAGE_KIND[prefix], int(stage_index), block_type, int(layer_index), variant)


def make_block_id(stage_kind, stage_index, layer_index, variant):
    return '%s.%d.%s.%d.%s' % (STAGE_PREFIX[stage_kind], stage_index, TYPE_OF_VARIANT[variant],
                               layer_index, variant)


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    block_id: str
    hidden_channels: int
    replacement: Optional[str] = None

    @property
    def variant(self):
        return VARIANT_OF[self.kind]

    @property
    def address(self):
        return parse_block_id(self.block_id)


@dataclass(frozen=True)
class StageSpec:
    kind: str
    index: int
    divisor: int
    channels: int
    resample: bool
    blocks: Tuple[BlockSpec, ...] = ()

    @property
    def stage_id(self):
        return '%s.%d' % (STAGE_PREFIX[self.kind], self.index)

    @property
    def name(self):
        return '%s-%d' % (self.kind, self.index)

    def layer_counts(self):
        # (number of R layers, number of A layers)
        res = {parse_block_id(b.block_id).layer_index for b in self.blocks if b.variant.startswith('RB')}
        attn = {parse_block_id(b.block_id).layer_index for b in self.blocks if b.variant.startswith('AB')}
        return len(res), len(attn)


@dataclass(frozen=True)
class BlockGraph:
    stages: Tuple[StageSpec, ...]
    latent_channels: int = 1
    stem_channels: int = 16
    embed_dim: int = 64
    time_channels: int = 16
    conditioned: bool = True

    def stages_of(self, kind):
        return [s for s in self.stages if s.kind == kind]

    def blocks(self):
        for stage in self.stages:
            for block in stage.blocks:
                yield block

    def block_ids(self):
        return [b.block_id for b in self.blocks()]

    def block(self, block_id):
        for block in self.blocks():
            if block.block_id == block_id:
                return block
        raise UnknownBlockError('unknown block id: %r' % (block_id,))

    def stage(self, stage_id):
        for stage in self.stages:
            if stage.stage_id == stage_id:
                return stage
        raise UnknownBlockError('unknown stage: %r' % (stage_id,))

    def replace_block(self, new_block):
        stages = []
        for stage in self.stages:
            blocks = tuple(new_block if b.block_id == new_block.block_id else b for b in stage.blocks)
            stages.append(replace(stage, blocks=blocks))
        return replace(self, stages=tuple(stages))

    def replace_stage(self, new_stage):
        return replace(self, stages=tuple(new_stage if s.stage_id == new_stage.stage_id else s
                                          for s in self.stages))

    @property
    def input_channels(self):
        return self.latent_channels * (2 if self.conditioned else 1)


@dataclass(frozen=True)
class AblationEdit:
    target: str
    replacement: str
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if (self.replacement == IDENTITY) != (self.in_channels == self.out_channels):
            raise AblationError('%s: Identity replacement requires matching channels (%d -> %d)'
                                % (self.target, self.in_channels, self.out_channels))

    def to_dict(self):
        return {'target': self.target, 'replacement': self.replacement,
                'in_channels': self.in_channels, 'out_channels': self.out_channels}


@dataclass(frozen=True)
class ValidationIssue:
    edge: str
    message: str


def validate(graph):
    # Returns the list of structural issues; empty means the graph is sound
    issues = []

    def fail(edge, message):
        issues.append(ValidationIssue(edge, message))

    kinds = [s.kind for s in graph.stages]
    for kind in kinds:
        if kind not in STAGE_ORDER:
            fail('stages', 'unknown stage kind %r' % (kind,))
    if issues:
        return issues
    for a, b in zip(graph.stages, graph.stages[1:]):
        if STAGE_ORDER[a.kind] > STAGE_ORDER[b.kind]:
            fail('%s -> %s' % (a.stage_id, b.stage_id), 'Down stages must precede Mid, Mid must precede Up')
    downs, mids, ups = graph.stages_of('Down'), graph.stages_of('Mid'), graph.stages_of('Up')
    if len(mids) > 1:
        fail('M', 'at most one Mid stage, found %d' % len(mids))
    if not downs or len(downs) != len(ups):
        fail('skips', 'need matching Down/Up stage counts for skip pairing (%d Down, %d Up)'
             % (len(downs), len(ups)))
    for kind, stages in (('Down', downs), ('Mid', mids), ('Up', ups)):
        for i, stage in enumerate(stages):
            if stage.index != i:
                fail(stage.stage_id, '%s stages must be indexed 0..n-1 in order' % kind)
    if issues:
        return issues

    seen = set()
    for stage in graph.stages:
        if stage.channels <= 0 or stage.channels % GROUP_WIDTH:
            fail(stage.stage_id, 'stage width %d is not a positive multiple of %d' % (stage.channels, GROUP_WIDTH))
        for block in stage.blocks:
            _check_block(block, stage, seen, fail)

    if graph.stem_channels % GROUP_WIDTH:
        fail('conv_in', 'stem width %d is not a multiple of %d' % (graph.stem_channels, GROUP_WIDTH))

    current, divisor, previous = graph.stem_channels, 1, 'conv_in'
    skips = []
    for i, stage in enumerate(downs):
        if stage.divisor != divisor:
            fail(stage.stage_id, 'resolution divisor %d, expected %d' % (stage.divisor, divisor))
        current, previous = _check_flow(stage, current, 0, previous, fail)
        skips.append(stage)
        if stage.resample:
            if i == len(downs) - 1:
                fail(stage.stage_id, 'the last Down stage cannot downsample')
            divisor *= 2
    for stage in mids:
        if stage.divisor != divisor:
            fail(stage.stage_id, 'resolution divisor %d, expected %d' % (stage.divisor, divisor))
        current, previous = _check_flow(stage, current, 0, previous, fail)
    for j, stage in enumerate(ups):
        paired = skips[len(downs) - 1 - j]
        if stage.divisor != divisor:
            fail(stage.stage_id, 'resolution divisor %d, expected %d' % (stage.divisor, divisor))
        if stage.blocks and paired.divisor != stage.divisor:
            fail('%s -> %s' % (paired.stage_id, stage.stage_id),
                 'skip resolution mismatch (divisor %d vs %d)' % (paired.divisor, stage.divisor))
        extra = paired.channels if stage.blocks else 0
        current, previous = _check_flow(stage, current, extra, previous, fail)
        if stage.resample:
            if j == len(ups) - 1:
                fail(stage.stage_id, 'the last Up stage cannot upsample')
            divisor //= 2
    if divisor != 1:
        fail('head', 'output resolution divisor %d, expected 1' % divisor)
    return issues


def _check_block(block, stage, seen, fail):
    if block.block_id in seen:
        fail(block.block_id, 'duplicate block id')
    seen.add(block.block_id)
    try:
        address = parse_block_id(block.block_id)
    except BlockIdError as e:
        fail(block.block_id, str(e))
        return
    if address.stage_id != stage.stage_id:
        fail(block.block_id, 'block id does not belong to stage %s' % stage.stage_id)
    if block.kind not in VARIANT_OF or VARIANT_OF[block.kind] != address.variant:
        fail(block.block_id, 'kind %r does not match id variant %s' % (block.kind, address.variant))
    if block.kind != RES_SPATIAL and block.in_channels != block.out_channels:
        fail(block.block_id, '%s blocks keep their width (%d -> %d)'
             % (block.kind, block.in_channels, block.out_channels))
    for label, value in (('in', block.in_channels), ('out', block.out_channels),
                         ('hidden', block.hidden_channels)):
        if value <= 0 or value % GROUP_WIDTH:
            fail(block.block_id, '%s channels %d not a positive multiple of %d' % (label, value, GROUP_WIDTH))
    if block.replacement not in (None, IDENTITY, SHORTCUT_CONV):
        fail(block.block_id, 'unknown replacement %r' % (block.replacement,))
    elif block.replacement is not None and \
            (block.replacement == IDENTITY) != (block.in_channels == block.out_channels):
        fail(block.block_id, '%s replacement with %d -> %d channels'
             % (block.replacement, block.in_channels, block.out_channels))
    return


def _check_flow(stage, current, skip_channels, previous, fail):
    for i, block in enumerate(stage.blocks):
        incoming = current + (skip_channels if i == 0 else 0)
        if block.in_channels != incoming:
            fail('%s -> %s' % (previous, block.block_id),
                 'block expects %d channels, receives %d' % (block.in_channels, incoming))
        current, previous = block.out_channels, block.block_id
    if current != stage.channels:
        fail('%s.out' % stage.stage_id, 'stage ends at %d channels, declared width %d'
             % (current, stage.channels))
    return stage.channels, previous


def check_graph(graph):
    issues = validate(graph)
    if issues:
        raise GraphValidationError(issues)
    return graph


def ablate(graph, block_id):
    block = graph.block(block_id)
    if block.replacement is not None:
        raise AblationError('block %s is already ablated (%s)' % (block_id, block.replacement))
    kind = IDENTITY if block.in_channels == block.out_channels else SHORTCUT_CONV
    edit = AblationEdit(block_id, kind, block.in_channels, block.out_channels)
    return graph.replace_block(replace(block, replacement=kind)), edit


def conv_params(in_channels, out_channels, kernel_size=(3, 3), bias=True):
    return in_channels * out_channels * math.prod(kernel_size) + (out_channels if bias else 0)


def linear_params(in_features, out_features, bias=True):
    return in_features * out_features + (out_features if bias else 0)


def _norm(shapes, prefix, channels):
    shapes[prefix + '.weight'] = (channels,)
    shapes[prefix + '.bias'] = (channels,)


def block_param_shapes(block, embed_dim):
    # Local names (without the block id prefix) in canonical order
    shapes = OrderedDict()
    cin, cout, hidden = block.in_channels, block.out_channels, block.hidden_channels
    if block.replacement == IDENTITY:
        return shapes
    if block.replacement == SHORTCUT_CONV:
        shapes['shortcut.weight'] = (cout, cin, 1, 1)
        shapes['shortcut.bias'] = (cout,)
        return shapes
    if block.kind in (RES_SPATIAL, RES_TEMPORAL):
        kernel = (3, 3) if block.kind == RES_SPATIAL else (3,)
        _norm(shapes, 'norm1', cin)
        shapes['conv1.weight'] = (hidden, cin) + kernel
        shapes['conv1.bias'] = (hidden,)
        shapes['emb.weight'] = (hidden, embed_dim)
        shapes['emb.bias'] = (hidden,)
        _norm(shapes, 'norm2', hidden)
        shapes['conv2.weight'] = (cout, hidden) + kernel
        shapes['conv2.bias'] = (cout,)
        if cin != cout:
            shapes['skip.weight'] = (cout, cin, 1, 1)
            shapes['skip.bias'] = (cout,)
    else:
        _norm(shapes, 'norm1', cin)
        for proj in ('q', 'k', 'v', 'proj'):
            shapes[proj + '.weight'] = (cin, cin)
            shapes[proj + '.bias'] = (cin,)
        _norm(shapes, 'norm2', cin)
        shapes['ff1.weight'] = (hidden, cin)
        shapes['ff1.bias'] = (hidden,)
        shapes['ff2.weight'] = (cin, hidden)
        shapes['ff2.bias'] = (cin,)
    return shapes


# Parameters sharing a block's hidden channel axis: (local name, axis)
HIDDEN_COUPLING = {
    'R': (('conv1.weight', 0), ('conv1.bias', 0), ('emb.weight', 0), ('emb.bias', 0),
          ('norm2.weight', 0), ('norm2.bias', 0), ('conv2.weight', 1)),
    'A': (('ff1.weight', 0), ('ff1.bias', 0), ('ff2.weight', 1)),
}

# Parameters on a TransformerBlock's residual stream; its attention width follows the stream
STREAM_COUPLING = (('norm1.weight', 0), ('norm1.bias', 0),
                   ('q.weight', 0), ('q.weight', 1), ('q.bias', 0),
                   ('k.weight', 0), ('k.weight', 1), ('k.bias', 0),
                   ('v.weight', 0), ('v.weight', 1), ('v.bias', 0),
                   ('proj.weight', 0), ('proj.weight', 1), ('proj.bias', 0),
                   ('norm2.weight', 0), ('norm2.bias', 0),
                   ('ff1.weight', 1), ('ff2.weight', 0), ('ff2.bias', 0))


@dataclass
class ChannelSpaces:
    '''
    Stage widths as channel spaces. A space starts at conv_in, at a
    widening ResBlock (its skip conv) or at a shortcut conv, and is shared
    by everything its channels reach through residual adds, samplers and
    skip concatenations. A layout is the tuple of spaces concatenated
    along one channel axis.
    '''
    widths: 'OrderedDict[str, int]'
    # (parameter name, axis, layout)
    slices: list
    # block id -> (input layout, output layout)
    block_layouts: dict
    # stage id -> layout at the stage output
    stage_layouts: dict

    def offsets(self, layout, space):
        start = 0
        for name in layout:
            if name == space:
                yield start
            start += self.widths[name]

    def resized(self, graph, widths):
        '''The graph with every space set to the given width.'''
        def total(layout):
            return sum(widths[s] for s in layout)

        stages = []
        for stage in graph.stages:
            blocks = tuple(replace(b, in_channels=total(self.block_layouts[b.block_id][0]),
                                   out_channels=total(self.block_layouts[b.block_id][1])) for b in stage.blocks)
            stages.append(replace(stage, channels=total(self.stage_layouts[stage.stage_id]), blocks=blocks))
        return replace(graph, stages=tuple(stages), stem_channels=widths['conv_in'])


def channel_spaces(graph):
    spaces = ChannelSpaces(OrderedDict([('conv_in', graph.stem_channels)]), [], {}, {})

    def couple(component, layout, pairs):
        spaces.slices.extend((component + '.' + local, axis, layout) for local, axis in pairs)

    current = ('conv_in',)
    couple('conv_in', current, (('weight', 0), ('bias', 0)))
    skips = {}
    downs = graph.stages_of('Down')
    for stage in graph.stages:
        if stage.kind == 'Up' and stage.blocks:
            current = current + skips[len(downs) - 1 - stage.index]
        for block in stage.blocks:
            out = current
            if block.replacement == SHORTCUT_CONV or \
                    (block.replacement is None and block.in_channels != block.out_channels):
                spaces.widths[block.block_id] = block.out_channels
                out = (block.block_id,)
            if block.replacement == SHORTCUT_CONV:
                couple(block.block_id, current, (('shortcut.weight', 1),))
                couple(block.block_id, out, (('shortcut.weight', 0), ('shortcut.bias', 0)))
            elif block.replacement is None and block.kind in (RES_SPATIAL, RES_TEMPORAL):
                couple(block.block_id, current, (('norm1.weight', 0), ('norm1.bias', 0), ('conv1.weight', 1)))
                couple(block.block_id, out, (('conv2.weight', 0), ('conv2.bias', 0)))
                if out != current:
                    couple(block.block_id, current, (('skip.weight', 1),))
                    couple(block.block_id, out, (('skip.weight', 0), ('skip.bias', 0)))
            elif block.replacement is None:
                couple(block.block_id, current, STREAM_COUPLING)
            spaces.block_layouts[block.block_id] = (current, out)
            current = out
        if stage.kind == 'Down':
            skips[stage.index] = current
        spaces.stage_layouts[stage.stage_id] = current
        if stage.resample:
            # Samplers keep the width, so input and output share the space
            sampler = '%s.%s' % (stage.stage_id, 'downsample' if stage.kind == 'Down' else 'upsample')
            couple(sampler, current, (('weight', 0), ('weight', 1), ('bias', 0)))
    couple('head', current, (('norm.weight', 0), ('norm.bias', 0), ('conv.weight', 1)))
    return spaces


def component_param_shapes(graph):
    # Component name -> OrderedDict(full param name -> shape), in canonical build order
    components = OrderedDict()

    def add(component, local_shapes):
        components[component] = OrderedDict((component + '.' + k, v) for k, v in local_shapes.items())

    stem = OrderedDict([('weight', (graph.stem_channels, graph.input_channels, 3, 3)),
                        ('bias', (graph.stem_channels,))])
    add('conv_in', stem)
    add('time_embed', OrderedDict([('fc1.weight', (graph.embed_dim, graph.time_channels)),
                                   ('fc1.bias', (graph.embed_dim,)),
                                   ('fc2.weight', (graph.embed_dim, graph.embed_dim)),
                                   ('fc2.bias', (graph.embed_dim,))]))
    for stage in graph.stages:
        for block in stage.blocks:
            add(block.block_id, block_param_shapes(block, graph.embed_dim))
        if stage.resample:
            c = stage.channels
            sampler = 'downsample' if stage.kind == 'Down' else 'upsample'
            add('%s.%s' % (stage.stage_id, sampler),
                OrderedDict([('weight', (c, c, 3, 3)), ('bias', (c,))]))
    last = graph.stages_of('Up')[-1].channels if graph.stages_of('Up') else graph.stem_channels
    add('head', OrderedDict([('norm.weight', (last,)), ('norm.bias', (last,)),
                             ('conv.weight', (graph.latent_channels, last, 3, 3)),
                             ('conv.bias', (graph.latent_channels,))]))
    return components


def param_shapes(graph):
    shapes = OrderedDict()
    for component in component_param_shapes(graph).values():
        shapes.update(component)
    return shapes


@dataclass
class ParamTable:
    per_component: 'OrderedDict[str, int]' = field(default_factory=OrderedDict)

    @property
    def total(self):
        return sum(self.per_component.values())

    def blocks_only(self):
        return OrderedDict((k, v) for k, v in self.per_component.items() if BLOCK_ID_RE.match(k))

    def to_dict(self):
        return {'per_component': dict(self.per_component), 'total': self.total}


def count_params(graph):
    table = ParamTable()
    for name, shapes in component_param_shapes(graph).items():
        table.per_component[name] = sum(math.prod(s) for s in shapes.values())
    return table


def replacement_params(edit):
    if edit.replacement == IDENTITY:
        return 0
    return conv_params(edit.in_channels, edit.out_channels, (1, 1))


# Full "Origin" layout: (kind, index, width multiplier, R layers, A layers)
ORIGIN_LAYOUT = (
    ('Down', 0, 1, 2, 2),
    ('Down', 1, 2, 2, 2),
    ('Down', 2, 4, 2, 2),
    ('Down', 3, 4, 2, 0),
    ('Mid', 0, 4, 2, 1),
    ('Up', 0, 4, 3, 0),
    ('Up', 1, 4, 3, 3),
    ('Up', 2, 2, 3, 3),
    ('Up', 3, 1, 3, 3),
)

TINY_LAYOUT = (
    ('Down', 0, 1, 1, 1),
    ('Down', 1, 2, 1, 0),
    ('Mid', 0, 2, 1, 0),
    ('Up', 0, 2, 1, 0),
    ('Up', 1, 1, 1, 1),
)


def stage_blocks(kind, index, width, incoming, res_layers, attn_layers, ff_mult=4):
    blocks = []
    current = incoming
    for layer in range(max(res_layers, attn_layers)):
        if layer < res_layers:
            blocks.append(BlockSpec(RES_SPATIAL, current, width, make_block_id(kind, index, layer, 'RB-S'), width))
            blocks.append(BlockSpec(RES_TEMPORAL, width, width, make_block_id(kind, index, layer, 'RB-T'), width))
            current = width
        if layer < attn_layers:
            for variant in ('AB-S', 'AB-T'):
                blocks.append(BlockSpec(KIND_OF[variant], current, current,
                                        make_block_id(kind, index, layer, variant), ff_mult * current))
    return tuple(blocks)


def graph_from_layout(layout, base_width, latent_channels=1, conditioned=True):
    downs = [row for row in layout if row[0] == 'Down']
    stages = []
    previous_width, divisor = base_width, 1
    down_widths = {}
    for kind, index, mult, res_layers, attn_layers in layout:
        width = base_width * mult
        incoming = previous_width
        if kind == 'Up' and res_layers:
            incoming += down_widths[len(downs) - 1 - index]
        if kind == 'Down':
            resample = index < len(downs) - 1
            down_widths[index] = width
        elif kind == 'Up':
            resample = index < len(downs) - 1
        else:
            resample = False
        stages.append(StageSpec(kind, index, divisor, width, resample,
                                stage_blocks(kind, index, width, incoming, res_layers, attn_layers)))
        if resample:
            divisor = divisor * 2 if kind == 'Down' else divisor // 2
        previous_width = width
    return BlockGraph(tuple(stages), latent_channels=latent_channels, stem_channels=base_width,
                      embed_dim=4 * base_width, time_channels=base_width, conditioned=conditioned)


def origin_graph(base_width=16, latent_channels=1):
    # base_width 320 gives the full-size widths 320/640/1280
    return graph_from_layout(ORIGIN_LAYOUT, base_width, latent_channels)


def tiny_graph(base_width=4, latent_channels=1):
    return graph_from_layout(TINY_LAYOUT, base_width, latent_channels)


def stage_table(graph):
    rows = []
    for stage in graph.stages:
        res_layers, attn_layers = stage.layer_counts()
        rows.append({'stage': stage.name, 'type': 'ResBlock', 'dimension': stage.channels, 'blocks': res_layers})
        rows.append({'stage': stage.name, 'type': 'TransformerBlock', 'dimension': stage.channels,
                     'blocks': attn_layers})
    return rows


def graph_to_dict(graph):
    return {
        'latent_channels': graph.latent_channels,
        'stem_channels': graph.stem_channels,
        'embed_dim': graph.embed_dim,
        'time_channels': graph.time_channels,
        'conditioned': graph.conditioned,
        'stages': [{
            'kind': s.kind,
            'index': s.index,
            'divisor': s.divisor,
            'channels': s.channels,
            'resample': s.resample,
            'blocks': [{
                'block_id': b.block_id,
                'kind': b.kind,
                'in_channels': b.in_channels,
                'out_channels': b.out_channels,
                'hidden_channels': b.hidden_channels,
                'replacement': b.replacement,
            } for b in s.blocks],
        } for s in graph.stages],
    }


def graph_from_dict(data):
    try:
        stages = tuple(StageSpec(
            kind=s['kind'], index=int(s['index']), divisor=int(s['divisor']), channels=int(s['channels']),
            resample=bool(s['resample']),
            blocks=tuple(BlockSpec(kind=b['kind'], in_channels=int(b['in_channels']),
                                   out_channels=int(b['out_channels']), block_id=b['block_id'],
                                   hidden_channels=int(b['hidden_channels']),
                                   replacement=b.get('replacement'))
                         for b in s['blocks']))
            for s in data['stages'])
        return BlockGraph(stages, latent_channels=int(data['latent_channels']),
                          stem_channels=int(data['stem_channels']), embed_dim=int(data['embed_dim']),
                          time_channels=int(data['time_channels']), conditioned=bool(data['conditioned']))
    except (KeyError, TypeError, ValueError) as e:
        raise GraphError('malformed graph description: %s' % e)


def canonical_graph_json(graph):
    return dumps_json(graph_to_dict(graph))


def save_graph(graph, path):
    pretty_write_json(graph_to_dict(graph), path)
    return


def load_graph(path):
    return graph_from_dict(read_json(path))


if __name__ == '__main__':
    source = sys.argv[1]
    if source == 'origin':
        graph = origin_graph(int(sys.argv[2]) if len(sys.argv) > 2 else 16)
    else:
        graph = load_graph(source)
    issues = validate(graph)
    for issue in issues:
        print('INVALID %s: %s' % (issue.edge, issue.message))
    for row in stage_table(graph):
        print('%-8s %-16s %6d %3d' % (row['stage'], row['type'], row['dimension'], row['blocks']))
    print('Total parameters:', count_params(graph).total)
