'''
Executable video U-Net built from a BlockGraph.

Latents are (B, F, C, H, W). Spatial blocks run on (B*F, C, H, W),
temporal blocks on (B*H*W, C, F). The network is conditioned on the EDM
noise input c3 through a sinusoidal embedding, and (I2V style) on a
first-frame condition latent concatenated channel-wise to every frame.

USAGE:
$ <script.py> <checkpoint.vdmk>

EXAMPLE:
$ python src/unet.py runs/default/checkpoints/teacher.vdmk
'''

import contextlib
import hashlib
import logging
import sys
from collections import OrderedDict

import numpy as np

from src.netgraph import (GROUP_WIDTH, IDENTITY, SHORTCUT_CONV, RES_SPATIAL, RES_TEMPORAL, ATTN_SPATIAL,
                          check_graph, graph_from_dict, graph_to_dict, param_shapes, count_params,
                          GraphError)
from utils.errors import FileFormatError
from utils.seed_utils import rng_for
from utils.tensor_core import Tensor, ShapeMismatchError, load_checkpoint, save_checkpoint
from utils.tensor_core import ops

logger = logging.getLogger(__name__)

# c3 = ln(sigma)/4 spans roughly [-1, 1.1] over the schedule; spread it over the embedding periods
NOISE_EMBED_SCALE = 100.0
MAX_PERIOD = 10000.0


def noise_embedding(c_noise, dim):
    c_noise = np.asarray(c_noise, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.power(MAX_PERIOD, -np.arange(half) / half)
    args = np.outer(c_noise * NOISE_EMBED_SCALE, freqs)
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def init_param(name, shape, init_seed):
    # Each tensor draws from its own stream, so init does not depend on graph order
    if name.endswith('norm1.weight') or name.endswith('norm2.weight') or name.endswith('norm.weight'):
        return np.ones(shape)
    if name.endswith('.bias'):
        return np.zeros(shape)
    if name.endswith('shortcut.weight'):
        # Channel averaging: each output channel starts as the mean of the inputs
        return np.full(shape, 1.0 / shape[1])
    fan_in = int(np.prod(shape[1:]))
    return rng_for(init_seed, 'init', name).standard_normal(shape) / np.sqrt(fan_in)


class Model:
    '''
    A BlockGraph plus its named parameters (name -> Tensor).

    Models are treated as values: optimizers and editors return new
    parameter dicts which are installed with `with_params`.
    '''
    def __init__(self, graph, params):
        self.graph = graph
        self.params = OrderedDict(params)

    def with_params(self, params):
        merged = OrderedDict(self.params)
        merged.update(params)
        return Model(self.graph, merged)

    def frozen(self):
        return Model(self.graph, OrderedDict((k, Tensor.wrap(v.data)) for k, v in self.params.items()))

    def trainable(self):
        return Model(self.graph, OrderedDict((k, Tensor.wrap(v.data, requires_grad=True))
                                             for k, v in self.params.items()))

    def copy(self):
        return Model(self.graph, OrderedDict((k, Tensor.wrap(v.data.copy(), requires_grad=v.requires_grad))
                                             for k, v in self.params.items()))

    def num_params(self):
        return sum(t.size for t in self.params.values())

    def embed(self, c_noise):
        '''Sigma embedding (B, E), already passed through SiLU for the blocks.'''
        p = self.params
        e = Tensor.wrap(noise_embedding(c_noise, self.graph.time_channels))
        e = ops.linear(e, p['time_embed.fc1.weight'], p['time_embed.fc1.bias'])
        e = ops.linear(ops.silu(e), p['time_embed.fc2.weight'], p['time_embed.fc2.bias'])
        return ops.silu(e)

    def forward(self, x, c_noise, cond=None, return_features=False, timer=None):
        '''
        x: (B, F, C, H, W) Tensor; c_noise: (B,) array of c3 values;
        cond: (B, 1, C, H, W) first-frame latent, zeros when None.

        Returns the output Tensor, or (output, features) where features
        maps stage ids to stage-end activations in (B, F, C', H', W').
        '''
        graph, p = self.graph, self.params
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 5 or x.shape[2] != graph.latent_channels:
            raise ShapeMismatchError('unet.forward', x.shape, (None, None, graph.latent_channels, None, None))
        b, f, c, height, width = x.shape
        timer = timer or _no_timer
        features = OrderedDict()

        with timer('conv_in'):
            h = ops.reshape(x, (b * f, c, height, width))
            if graph.conditioned:
                h = ops.concat(h, self._cond_frames(cond, x.shape), axis=1)
            h = ops.conv2d(h, p['conv_in.weight'], p['conv_in.bias'], padding=1)
        with timer('time_embed'):
            emb = self.embed(c_noise)
        if emb.shape[0] != b:
            raise ShapeMismatchError('unet.forward', (b,), emb.shape[:1], 'one c_noise per sample')

        skips = {}
        downs = graph.stages_of('Down')
        for stage in graph.stages:
            if stage.kind == 'Up' and stage.blocks:
                paired = skips[len(downs) - 1 - stage.index]
                h = ops.concat(h, paired, axis=1)
            for block in stage.blocks:
                with timer(block.block_id):
                    h = self.run_block(block.block_id, h, emb, (b, f))
            if stage.kind == 'Down':
                skips[stage.index] = h
            if return_features and (stage.kind != 'Mid' or stage.blocks):
                features[stage.stage_id] = _to_video(h, b, f)
            if stage.resample:
                sampler = '%s.%s' % (stage.stage_id, 'downsample' if stage.kind == 'Down' else 'upsample')
                with timer(sampler):
                    if stage.kind == 'Down':
                        h = ops.conv2d(h, p[sampler + '.weight'], p[sampler + '.bias'], stride=2, padding=1)
                    else:
                        h = ops.conv2d(ops.upsample2x(h), p[sampler + '.weight'], p[sampler + '.bias'], padding=1)

        with timer('head'):
            h = ops.silu(ops.group_norm(h, p['head.norm.weight'], p['head.norm.bias'], GROUP_WIDTH))
            h = ops.conv2d(h, p['head.conv.weight'], p['head.conv.bias'], padding=1)
            out = _to_video(h, b, f)
        if return_features:
            return out, features
        return out

    __call__ = forward

    def _cond_frames(self, cond, shape):
        b, f, c, height, width = shape
        if cond is None:
            frames = np.zeros((b * f, c, height, width))
        else:
            data = cond.data if isinstance(cond, Tensor) else np.asarray(cond, dtype=np.float64)
            if data.shape != (b, 1, c, height, width):
                raise ShapeMismatchError('unet.cond', data.shape, (b, 1, c, height, width))
            frames = np.broadcast_to(data, (b, f, c, height, width)).reshape(b * f, c, height, width)
        return Tensor.wrap(np.ascontiguousarray(frames))

    def run_block(self, block_id, h, emb, video_shape):
        '''Apply one block to a spatial-layout activation (B*F, C, H, W).'''
        block = self.graph.block(block_id)
        if block.replacement == IDENTITY:
            return h
        p = _Scope(self.params, block_id)
        if block.replacement == SHORTCUT_CONV:
            return ops.conv2d(h, p['shortcut.weight'], p['shortcut.bias'])
        b, f = video_shape
        if block.kind == RES_SPATIAL:
            return _res_block(h, p, emb, f, spatial=True)
        if block.kind == RES_TEMPORAL:
            t, site_shape = _to_temporal(h, b, f)
            t = _res_block(t, p, emb, site_shape[0] * site_shape[1], spatial=False)
            return _from_temporal(t, b, f, site_shape)
        if block.kind == ATTN_SPATIAL:
            n, ch, height, width = h.shape
            tokens = _transformer(ops.reshape(h, (n, ch, height * width)), p)
            return ops.reshape(tokens, (n, ch, height, width))
        t, site_shape = _to_temporal(h, b, f)
        return _from_temporal(_transformer(t, p), b, f, site_shape)


class _Scope:
    def __init__(self, params, prefix):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name):
        return self.params[self.prefix + '.' + name]

    def __contains__(self, name):
        return (self.prefix + '.' + name) in self.params


@contextlib.contextmanager
def _no_timer_ctx():
    yield


def _no_timer(name):
    return _no_timer_ctx()


def _to_video(h, b, f):
    n, c, height, width = h.shape
    return ops.reshape(h, (b, f, c, height, width))


def _to_temporal(h, b, f):
    n, c, height, width = h.shape
    v = ops.transpose(ops.reshape(h, (b, f, c, height, width)), (0, 3, 4, 2, 1))
    return ops.reshape(v, (b * height * width, c, f)), (height, width)


def _from_temporal(t, b, f, site_shape):
    height, width = site_shape
    c = t.shape[1]
    v = ops.transpose(ops.reshape(t, (b, height, width, c, f)), (0, 4, 3, 1, 2))
    return ops.reshape(v, (b * f, c, height, width))


def _res_block(h, p, emb, repeats, spatial):
    conv = _conv3x3 if spatial else _conv3
    y = ops.silu(ops.group_norm(h, p['norm1.weight'], p['norm1.bias'], GROUP_WIDTH))
    y = conv(y, p['conv1.weight'], p['conv1.bias'])
    shift = ops.repeat_rows(ops.linear(emb, p['emb.weight'], p['emb.bias']), repeats)
    y = ops.channel_shift(y, shift)
    y = ops.silu(ops.group_norm(y, p['norm2.weight'], p['norm2.bias'], GROUP_WIDTH))
    y = conv(y, p['conv2.weight'], p['conv2.bias'])
    skip = ops.conv2d(h, p['skip.weight'], p['skip.bias']) if 'skip.weight' in p else h
    return ops.add(skip, y)


def _conv3x3(x, w, b):
    return ops.conv2d(x, w, b, padding=1)


def _conv3(x, w, b):
    return ops.conv1d(x, w, b, padding=1)


def _tokens_linear(t, w, b):
    # (N, L, Cin) -> (N, L, Cout)
    n, length, c = t.shape
    y = ops.linear(ops.reshape(t, (n * length, c)), w, b)
    return ops.reshape(y, (n, length, w.shape[0]))


def _transformer(h, p):
    # h: (N, C, L); pre-norm self-attention over L then a feed-forward, both residual
    y = ops.group_norm(h, p['norm1.weight'], p['norm1.bias'], GROUP_WIDTH)
    t = ops.transpose(y, (0, 2, 1))
    q = _tokens_linear(t, p['q.weight'], p['q.bias'])
    k = _tokens_linear(t, p['k.weight'], p['k.bias'])
    v = _tokens_linear(t, p['v.weight'], p['v.bias'])
    a = _tokens_linear(ops.attention(q, k, v), p['proj.weight'], p['proj.bias'])
    h = ops.add(h, ops.transpose(a, (0, 2, 1)))

    y = ops.transpose(ops.group_norm(h, p['norm2.weight'], p['norm2.bias'], GROUP_WIDTH), (0, 2, 1))
    y = _tokens_linear(ops.silu(_tokens_linear(y, p['ff1.weight'], p['ff1.bias'])), p['ff2.weight'], p['ff2.bias'])
    return ops.add(h, ops.transpose(y, (0, 2, 1)))


def build(graph, init_seed, trainable=True):
    check_graph(graph)
    params = OrderedDict()
    for name, shape in param_shapes(graph).items():
        params[name] = Tensor(init_param(name, shape, init_seed), requires_grad=trainable)
    logger.debug('Built model with %d tensors, %d parameters', len(params), sum(t.size for t in params.values()))
    return Model(graph, params)


def params_checksum(model):
    digest = hashlib.sha256()
    for name in sorted(model.params):
        digest.update(name.encode('utf-8'))
        digest.update(np.ascontiguousarray(model.params[name].data, dtype='<f8').tobytes())
    return digest.hexdigest()


def save_model(path, model, meta=None):
    meta = dict(meta or {})
    meta['graph'] = graph_to_dict(model.graph)
    save_checkpoint(path, OrderedDict((k, v.data) for k, v in model.params.items()), meta)
    return


def load_model(path, trainable=False):
    tensors, meta = load_checkpoint(path)
    if 'graph' not in meta:
        raise FileFormatError('%s: checkpoint carries no block graph' % path)
    try:
        graph = check_graph(graph_from_dict(meta['graph']))
    except GraphError as e:
        raise FileFormatError('%s: %s' % (path, e))
    expected = param_shapes(graph)
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))[:3]
        raise FileFormatError('%s: parameters do not match the graph (missing %s)' % (path, missing))
    params = OrderedDict()
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise FileFormatError('%s: %s has shape %s, graph expects %s'
                                  % (path, name, tensors[name].shape, shape))
        params[name] = Tensor.wrap(tensors[name], requires_grad=trainable)
    return Model(graph, params), meta


if __name__ == '__main__':
    model, meta = load_model(sys.argv[1])
    table = count_params(model.graph)
    for name, n in table.per_component.items():
        print('%-24s %10d' % (name, n))
    print('Total parameters:', table.total)
    print('Checksum:', params_checksum(model))
