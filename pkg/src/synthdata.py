'''
Procedural moving-shape videos: the desk-scale training/eval corpus.

Every video is described by a SceneConfig (its provenance); the dataset
is drawn from a SceneTemplate with per-video seeds derived from
(seed, split, index), so any subset regenerates identically.

USAGE:
$ <script.py> <split> <num_videos> <seed> <output_file>

EXAMPLE:
$ python src/synthdata.py train 512 0 runs/default/data/train.vdds
'''

import json
import logging
import math
import struct
import sys
import zlib
from dataclasses import dataclass, asdict, field
from typing import Tuple

import numpy as np

from utils.errors import ConfigError, ChecksumError, FileFormatError, TruncatedFileError, VersionError
from utils.file_utils import atomic_write_bytes
from utils.seed_utils import derive_seed
from utils.worker_utils import multi_run_batch

logger = logging.getLogger(__name__)

MAGIC = b'VDDS'
VERSION = 1
SPLITS = ('train', 'eval')


class SceneError(ConfigError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    size: int
    intensity: float
    # (row, col) of the top-left corner of the bounding box, and pixels/frame
    position: Tuple[float, float]
    velocity: Tuple[float, float]
    bounce: bool = True


@dataclass(frozen=True)
class SceneConfig:
    height: int
    width: int
    frames: int
    channels: int = 1
    shapes: Tuple[ShapeSpec, ...] = ()
    background: float = 0.0
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        shapes = tuple(ShapeSpec(kind=s['kind'], size=int(s['size']), intensity=float(s['intensity']),
                                 position=tuple(float(v) for v in s['position']),
                                 velocity=tuple(float(v) for v in s['velocity']),
                                 bounce=bool(s['bounce']))
                       for s in data['shapes'])
        return cls(height=int(data['height']), width=int(data['width']), frames=int(data['frames']),
                   channels=int(data['channels']), shapes=shapes, background=float(data['background']),
                   seed=int(data['seed']))


@dataclass(frozen=True)
class SceneTemplate:
    '''Distribution over SceneConfigs.'''
    height: int = 16
    width: int = 16
    frames: int = 8
    channels: int = 1
    shape_count: Tuple[int, int] = (1, 2)
    size_range: Tuple[int, int] = (3, 6)
    kinds: Tuple[str, ...] = ('rectangle', 'disc')
    speeds: Tuple[float, ...] = (1.0, 3.0)
    intensity_range: Tuple[float, float] = (0.5, 1.0)
    background: float = 0.0
    bounce: bool = True

    @classmethod
    def from_config(cls, data_config):
        return cls(height=data_config.height, width=data_config.width, frames=data_config.frames,
                   channels=data_config.channels, shape_count=tuple(data_config.shape_count),
                   size_range=tuple(data_config.size_range), kinds=tuple(data_config.kinds),
                   speeds=tuple(data_config.speeds), intensity_range=tuple(data_config.intensity_range),
                   background=data_config.background, bounce=data_config.bounce)

    def sample(self, seed):
        if self.size_range[1] > min(self.height, self.width):
            raise SceneError('shape size %d does not fit a %dx%d canvas'
                             % (self.size_range[1], self.height, self.width))
        rng = np.random.default_rng(seed)
        shapes = []
        for _ in range(int(rng.integers(self.shape_count[0], self.shape_count[1] + 1))):
            size = int(rng.integers(self.size_range[0], self.size_range[1] + 1))
            speed = float(self.speeds[int(rng.integers(len(self.speeds)))])
            angle = rng.uniform(0.0, 2.0 * math.pi)
            shapes.append(ShapeSpec(
                kind=str(self.kinds[int(rng.integers(len(self.kinds)))]),
                size=size,
                intensity=float(rng.uniform(*self.intensity_range)),
                position=(float(rng.integers(0, self.height - size + 1)),
                          float(rng.integers(0, self.width - size + 1))),
                velocity=(speed * math.sin(angle), speed * math.cos(angle)),
                bounce=self.bounce))
        return SceneConfig(self.height, self.width, self.frames, self.channels, tuple(shapes),
                           self.background, int(seed))


def _fold(x, span, bounce):
    # Keep a coordinate within [0, span]
    if span <= 0:
        return 0.0
    if bounce:
        m = x % (2 * span)
        return m if m <= span else 2 * span - m
    return x % (span + 1)


def shape_position(shape, frame, height, width):
    row = shape.position[0] + shape.velocity[0] * frame
    col = shape.position[1] + shape.velocity[1] * frame
    return (_fold(row, height - shape.size, shape.bounce), _fold(col, width - shape.size, shape.bounce))


def render_scene(scene):
    '''Render one SceneConfig to an (F, C, H, W) float32 video in [0, 1].'''
    for shape in scene.shapes:
        if shape.size > min(scene.height, scene.width) or shape.size < 1:
            raise SceneError('shape size %d does not fit a %dx%d canvas' % (shape.size, scene.height, scene.width))
    video = np.full((scene.frames, scene.channels, scene.height, scene.width), scene.background, dtype=np.float32)
    rows = np.arange(scene.height)[:, None] + 0.5
    cols = np.arange(scene.width)[None, :] + 0.5
    for f in range(scene.frames):
        for shape in scene.shapes:
            r, c = shape_position(shape, f, scene.height, scene.width)
            r0, c0 = int(round(r)), int(round(c))
            if shape.kind == 'rectangle':
                mask = np.zeros((scene.height, scene.width), dtype=bool)
                mask[r0:r0 + shape.size, c0:c0 + shape.size] = True
            elif shape.kind == 'disc':
                radius = shape.size / 2.0
                mask = (rows - r0 - radius) ** 2 + (cols - c0 - radius) ** 2 <= radius ** 2
            else:
                raise SceneError('unknown shape kind %r' % (shape.kind,))
            video[f][:, mask] = np.float32(shape.intensity)
    return video


@dataclass
class VideoDataset:
    videos: np.ndarray
    scenes: list = field(default_factory=list)
    split: str = 'train'
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.videos.shape[0])

    @property
    def video_shape(self):
        return tuple(self.videos.shape[1:])

    def subset(self, indices):
        indices = list(indices)
        return VideoDataset(self.videos[indices], [self.scenes[i] for i in indices], self.split, dict(self.meta))


def gen_dataset(template, n, seed, split='train', workers=4, meta=None):
    if n < 0:
        raise ConfigError('dataset size must be >= 0')
    if split not in SPLITS:
        raise ConfigError('split must be one of %s' % (SPLITS,))

    def make(index):
        scene = template.sample(derive_seed(seed, split, index))
        return scene, render_scene(scene)

    results = multi_run_batch(make, range(n), workers, desc='Generating %s videos' % split)
    for index, _, error in results:
        if error is not None:
            raise error
    scenes = [r[1][0] for r in results]
    if n:
        videos = np.stack([r[1][1] for r in results])
    else:
        videos = np.zeros((0, template.frames, template.channels, template.height, template.width), dtype=np.float32)
    logger.info('Generated %d %s videos of shape %s', n, split, videos.shape[1:])
    return VideoDataset(videos, scenes, split, dict(meta or {}))


def first_frame_condition(video):
    '''Frame 0 as the condition latent: (F, C, H, W) -> (1, C, H, W); batches (B, F, ...) -> (B, 1, ...).'''
    video = np.asarray(video)
    if video.ndim == 5:
        return video[:, :1].astype(np.float64)
    if video.ndim != 4 or video.shape[0] < 1:
        raise FileFormatError('expected an (F, C, H, W) video, got shape %s' % (video.shape,))
    return video[:1].astype(np.float64)


def _pack_text(text):
    raw = text.encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def encode_dataset(dataset):
    videos = np.ascontiguousarray(dataset.videos, dtype='<f4')
    if videos.ndim != 5:
        raise FileFormatError('dataset videos must be (n, F, C, H, W)')
    parts = [MAGIC, struct.pack('<I', VERSION), struct.pack('<5I', *videos.shape),
             _pack_text(dataset.split), _pack_text(json.dumps(dataset.meta, sort_keys=True, separators=(',', ':')))]
    for scene in dataset.scenes:
        parts.append(_pack_text(json.dumps(scene.to_dict(), sort_keys=True, separators=(',', ':'))))
    parts.append(videos.tobytes())
    body = b''.join(parts)
    return body + struct.pack('<I', zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise TruncatedFileError('dataset truncated at byte %d' % self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_dataset(blob):
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise FileFormatError('not a VDDS dataset')
    (version,) = reader.unpack('<I')
    if version != VERSION:
        raise VersionError('VDDS version %d, expected %d' % (version, VERSION))
    shape = reader.unpack('<5I')
    raw_texts = [reader.take(reader.unpack('<I')[0]) for _ in range(2 + shape[0])]
    payload = reader.take(4 * math.prod(shape))
    if len(blob) < reader.pos + 4:
        raise TruncatedFileError('dataset truncated before its checksum')
    if len(blob) > reader.pos + 4:
        raise FileFormatError('unexpected trailing bytes in dataset')
    (stored_crc,) = struct.unpack('<I', blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError('dataset checksum mismatch')
    try:
        texts = [t.decode('utf-8') for t in raw_texts]
        split, meta = texts[0], json.loads(texts[1])
        scenes = [SceneConfig.from_dict(json.loads(t)) for t in texts[2:]]
    except (UnicodeDecodeError, ValueError, KeyError) as e:
        raise FileFormatError('corrupt dataset: %s' % e)
    videos = np.frombuffer(payload, dtype='<f4').astype(np.float32).reshape(shape)
    return VideoDataset(videos, scenes, split, meta)


def save(dataset, path):
    atomic_write_bytes(encode_dataset(dataset), path)
    return


def load(path):
    with open(path, 'rb') as f:
        return decode_dataset(f.read())


if __name__ == '__main__':
    split, n, seed, outfile = sys.argv[1], int(sys.argv[2]), int(sys.argv[3]), sys.argv[4]
    dataset = gen_dataset(SceneTemplate(), n, seed, split)
    save(dataset, outfile)
    print('Written %d videos to: %s' % (len(dataset), outfile))
