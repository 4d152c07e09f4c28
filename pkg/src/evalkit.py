'''
Evaluation: Frechet distance over features of a fixed, seeded video
feature extractor (the FVD proxy), the motion proxy, PSNR and per-block
latency measurement.

USAGE:
$ <script.py> <generated.vdds> <reference.vdds>

EXAMPLE:
$ python src/evalkit.py runs/default/data/eval.vdds runs/default/data/train.vdds
'''

import logging
import os
import platform
import statistics
import sys
import time
from collections import OrderedDict, defaultdict
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from utils.errors import ConfigError, NumericError
from utils.file_utils import format_float, write_csv
from utils.seed_utils import rng_for
from utils.tensor_core import Tensor, ShapeMismatchError, no_grad
from utils.tensor_core import ops
from utils.worker_utils import multi_run_batch

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
EIGEN_FLOOR = 1e-12
SHRINKAGE = 0.05
SYMMETRY_TOL = 1e-9


class CovarianceError(NumericError):
    pass


class MotionProxyError(ConfigError):
    pass


class FeatureExtractor:
    '''
    Three stages of (3x3 spatial conv, SiLU, 3-tap temporal conv, SiLU,
    2x2 average pool), then a global average pool and a linear map to D.
    Parameters depend on the seed only.
    '''
    def __init__(self, channels=1, width=8, dim=64, seed=1234):
        self.channels, self.width, self.dim, self.seed = channels, width, dim, seed
        self.params = OrderedDict()
        c_in = channels
        for stage in range(3):
            c_out = width * 2 ** stage
            self._add('s%d.spatial.weight' % stage, (c_out, c_in, 3, 3))
            self._add('s%d.temporal.weight' % stage, (c_out, c_out, 3))
            self.params['s%d.spatial.bias' % stage] = Tensor(np.zeros(c_out))
            self.params['s%d.temporal.bias' % stage] = Tensor(np.zeros(c_out))
            c_in = c_out
        self._add('proj.weight', (dim, c_in))
        self.params['proj.bias'] = Tensor(np.zeros(dim))

    def _add(self, name, shape):
        fan_in = int(np.prod(shape[1:]))
        w = rng_for(self.seed, 'extractor', name).standard_normal(shape) * np.sqrt(2.0 / fan_in)
        self.params[name] = Tensor(w)

    def describe(self):
        return {'seed': self.seed, 'width': self.width, 'dim': self.dim, 'channels': self.channels}

    def __call__(self, video):
        '''One (F, C, H, W) video -> D-vector.'''
        video = np.asarray(video, dtype=np.float64)
        if video.ndim != 4 or video.shape[1] != self.channels:
            raise ShapeMismatchError('extract_features', video.shape, (None, self.channels, None, None))
        p = self.params
        frames = video.shape[0]
        with no_grad():
            h = Tensor(video)
            for stage in range(3):
                h = ops.silu(ops.conv2d(h, p['s%d.spatial.weight' % stage], p['s%d.spatial.bias' % stage], padding=1))
                n, c, height, width = h.shape
                t = ops.reshape(ops.transpose(h, (2, 3, 1, 0)), (height * width, c, frames))
                t = ops.silu(ops.conv1d(t, p['s%d.temporal.weight' % stage], p['s%d.temporal.bias' % stage], padding=1))
                h = ops.transpose(ops.reshape(t, (height, width, c, frames)), (3, 2, 0, 1))
                if height % 2 == 0 and width % 2 == 0:
                    h = ops.avgpool2x(h)
            pooled = h.data.mean(axis=(0, 2, 3))
            return ops.linear(Tensor.wrap(pooled[None, :]), p['proj.weight'], p['proj.bias']).data[0]


def extract_features(videos, extractor, workers=4):
    videos = np.asarray(videos)
    if videos.ndim != 5:
        raise ShapeMismatchError('extract_features', videos.shape, (None,) * 5, 'expected (n, F, C, H, W)')
    if len(videos) == 0:
        return np.zeros((0, extractor.dim))
    results = multi_run_batch(extractor, list(videos), workers * 4, desc='Extracting features')
    rows = []
    for _, row, error in results:
        if error is not None:
            raise error
        rows.append(row)
    return np.stack(rows)


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @classmethod
    def from_features(cls, features, shrinkage=SHRINKAGE):
        features = np.asarray(features, dtype=np.float64)
        n, dim = features.shape
        if n < 1:
            raise CovarianceError('no samples to estimate statistics from')
        mu = features.mean(axis=0)
        centered = features - mu
        sigma = centered.T @ centered / max(n - 1, 1)
        if n < 4 * dim:
            sigma = (1.0 - shrinkage) * sigma + shrinkage * np.trace(sigma) / dim * np.eye(dim)
        sigma = 0.5 * (sigma + sigma.T)
        if not np.all(np.isfinite(sigma)):
            raise CovarianceError('covariance estimate is not finite')
        return cls(mu, sigma, n)


def _check_symmetric(sigma, name):
    scale = max(1.0, float(np.abs(sigma).max())) if sigma.size else 1.0
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1] or np.abs(sigma - sigma.T).max() > SYMMETRY_TOL * scale:
        raise CovarianceError('%s covariance is not symmetric' % name)


def sqrtm_psd(m):
    '''Square root of a symmetric PSD matrix via eigh; eigenvalues below 1e-12 are taken as 0.'''
    m = np.asarray(m, dtype=np.float64)
    _check_symmetric(m, 'input')
    w, v = np.linalg.eigh(m)
    w = np.where(w < EIGEN_FLOOR, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a, b):
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ShapeMismatchError('frechet_distance', a.sigma.shape, b.sigma.shape)
    _check_symmetric(a.sigma, 'first')
    _check_symmetric(b.sigma, 'second')
    root_a = sqrtm_psd(a.sigma)
    inner = root_a @ b.sigma @ root_a
    covmean = np.trace(sqrtm_psd(0.5 * (inner + inner.T)))
    diff = a.mu - b.mu
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * covmean)
    if not np.isfinite(d):
        raise CovarianceError('Frechet distance is not finite')
    return max(d, 0.0)


def _canonical_rows(features):
    # Row order must not matter: sort lexicographically before any reduction
    if len(features) == 0:
        return features
    return features[np.lexsort(features.T[::-1])]


def fvd(generated, reference, extractor, workers=4):
    if len(generated) == 0 or len(reference) == 0:
        raise CovarianceError('fvd needs non-empty video sets')
    logger.debug('FVD proxy over %d generated and %d reference videos', len(generated), len(reference))
    a = GaussianStats.from_features(_canonical_rows(extract_features(generated, extractor, workers)))
    b = GaussianStats.from_features(_canonical_rows(extract_features(reference, extractor, workers)))
    return frechet_distance(a, b)


def motion_dynamics_proxy(video):
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4 or video.shape[0] < 2:
        raise MotionProxyError('motion proxy needs an (F, C, H, W) video with F >= 2, got %s' % (video.shape,))
    return float(np.abs(np.diff(video, axis=0)).mean())


def mean_motion(videos):
    return float(np.mean([motion_dynamics_proxy(v) for v in videos])) if len(videos) else 0.0


def psnr(a, b, peak=1.0):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError('psnr', a.shape, b.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


class BlockTimer:
    '''Accumulates wall-clock time per named section of one forward pass.'''
    def __init__(self):
        self.elapsed = defaultdict(float)

    def __call__(self, name):
        return _Section(self, name)


class _Section:
    def __init__(self, timer, name):
        self.timer = timer
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timer.elapsed[self.name] += time.perf_counter() - self.start
        return False


# BLAS threads allowed while timing
LATENCY_THREADS = 1


@dataclass
class LatencyReport:
    component_ms: 'OrderedDict[str, float]'
    total_ms: float
    reps: int
    host: dict
    threads: int = LATENCY_THREADS

    @property
    def component_sum_ms(self):
        return sum(self.component_ms.values())

    def to_dict(self):
        return {'component_ms': dict(self.component_ms), 'total_ms': self.total_ms,
                'component_sum_ms': self.component_sum_ms, 'reps': self.reps, 'host': self.host,
                'threads': self.threads}


def host_description():
    return {
        'platform': platform.platform(),
        'machine': platform.machine(),
        'processor': platform.processor(),
        'python': platform.python_version(),
        'numpy': np.__version__,
        'cpu_count': os.cpu_count(),
    }


def measure_latency(model, input_shape, warmup=3, reps=30, seed=0):
    '''
    Median wall-clock milliseconds per model component (conv_in, blocks,
    samplers, head) over `reps` timed passes, plus an independently timed
    total forward. Runs in the calling thread with BLAS pinned to
    LATENCY_THREADS threads.
    '''
    if reps < 3:
        raise ConfigError('latency needs at least 3 repetitions')
    rng = rng_for(seed, 'latency')
    x = Tensor(rng.standard_normal(input_shape))
    c_noise = np.zeros(input_shape[0])
    cond = np.zeros((input_shape[0], 1) + tuple(input_shape[2:])) if model.graph.conditioned else None
    with threadpool_limits(limits=LATENCY_THREADS), no_grad():
        threads = max([pool['num_threads'] for pool in threadpool_info()] or [LATENCY_THREADS])
        for _ in range(warmup):
            model(x, c_noise, cond)
        samples = defaultdict(list)
        for _ in range(reps):
            timer = BlockTimer()
            model(x, c_noise, cond, timer=timer)
            for name, seconds in timer.elapsed.items():
                samples[name].append(seconds * 1000.0)
        totals = []
        for _ in range(reps):
            start = time.perf_counter()
            model(x, c_noise, cond)
            totals.append((time.perf_counter() - start) * 1000.0)
    components = OrderedDict((name, statistics.median(values)) for name, values in samples.items())
    return LatencyReport(components, statistics.median(totals), reps, host_description(), threads)


def generate_videos(denoiser, schedule, steps, conditions, frames, rng, batch_size=8):
    '''Sample one video per condition latent (n, 1, C, H, W); outputs clipped to [0, 1].'''
    from src.diffusion import sample
    conditions = np.asarray(conditions, dtype=np.float64)
    outputs = []
    for start in range(0, len(conditions), batch_size):
        cond = conditions[start:start + batch_size]
        shape = (len(cond), frames) + cond.shape[2:]
        outputs.append(sample(denoiser, schedule, steps, cond, rng, shape))
    if not outputs:
        return np.zeros((0, frames) + conditions.shape[2:])
    return np.clip(np.concatenate(outputs), 0.0, 1.0)


def write_latency_csv(outfile, entries, config_hash):
    '''entries: (label, LatencyReport, ParamTable) per model, written in the given order.'''
    rows = []
    for label, report, params_table in entries:
        for name, ms in report.component_ms.items():
            rows.append([label, name, float(ms), params_table.per_component.get(name, 0)])
        rows.append([label, 'TOTAL', float(report.total_ms), params_table.total])
    write_csv(outfile, ['model', 'component', 'latency_ms', 'params'], rows, config_hash)
    return


if __name__ == '__main__':
    from src.synthdata import load
    generated, reference = load(sys.argv[1]), load(sys.argv[2])
    extractor = FeatureExtractor(channels=generated.video_shape[1])
    print('FVD proxy:', format_float(fvd(generated.videos, reference.videos, extractor)))
    print('Motion proxy (generated):', format_float(mean_motion(generated.videos)))
    print('Motion proxy (reference):', format_float(mean_motion(reference.videos)))
