'''
Run configuration: defaults in code, JSON file overrides, then
VDMINI_<SECTION>__<FIELD> environment overrides, then CLI flags.

The resolved config (minus the output directory) hashes to the config
hash embedded in every artifact.
'''

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, fields, asdict, replace, is_dataclass
from typing import Tuple

from utils.errors import ConfigError
from utils.file_utils import read_json

logger = logging.getLogger(__name__)

ENV_PREFIX = 'VDMINI_'


@dataclass(frozen=True)
class DataConfig:
    frames: int = 8
    channels: int = 1
    height: int = 16
    width: int = 16
    n_train: int = 512
    n_eval: int = 128
    speeds: Tuple[float, ...] = (1.0, 3.0)
    shape_count: Tuple[int, int] = (1, 2)
    size_range: Tuple[int, int] = (3, 6)
    kinds: Tuple[str, ...] = ('rectangle', 'disc')
    intensity_range: Tuple[float, float] = (0.5, 1.0)
    background: float = 0.0
    bounce: bool = True

    def validate(self):
        if self.frames < 1 or self.channels < 1:
            raise ConfigError('data.frames and data.channels must be >= 1')
        if not (4 <= self.height <= 64 and 4 <= self.width <= 64):
            raise ConfigError('data canvas must be between 4x4 and 64x64')
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError('data.n_train and data.n_eval must be >= 1')
        if self.shape_count[0] < 1 or self.shape_count[0] > self.shape_count[1]:
            raise ConfigError('data.shape_count must be an increasing range starting at >= 1')
        if self.size_range[0] < 1 or self.size_range[0] > self.size_range[1]:
            raise ConfigError('data.size_range must be an increasing range starting at >= 1')
        if not 0.0 <= self.background <= 1.0:
            raise ConfigError('data.background must lie in [0, 1]')
        lo, hi = self.intensity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError('data.intensity_range must lie in [0, 1]')
        for kind in self.kinds:
            if kind not in ('rectangle', 'disc'):
                raise ConfigError('unknown shape kind %r' % (kind,))


@dataclass(frozen=True)
class GraphConfig:
    # origin | tiny | file
    preset: str = 'origin'
    base_width: int = 16
    path: str = ''
    conditioned: bool = True

    def validate(self):
        if self.preset not in ('origin', 'tiny', 'file'):
            raise ConfigError('graph.preset must be origin, tiny or file')
        if self.preset == 'file' and not self.path:
            raise ConfigError('graph.path is required with preset "file"')
        if self.base_width < 4 or self.base_width % 4:
            raise ConfigError('graph.base_width must be a positive multiple of 4')


@dataclass(frozen=True)
class DiffusionConfig:
    sigma_data: float = 0.5
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    rho: float = 7.0
    num_steps: int = 40
    p_mean: float = -1.2
    p_std: float = 1.2
    boundary_sigma: float = 0.0

    def validate(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError('diffusion requires 0 < sigma_min < sigma_max')
        if self.sigma_data <= 0 or self.rho <= 0 or self.p_std <= 0:
            raise ConfigError('diffusion.sigma_data, rho and p_std must be positive')
        if self.num_steps < 2:
            raise ConfigError('diffusion.num_steps must be >= 2')
        if self.boundary_sigma < 0:
            raise ConfigError('diffusion.boundary_sigma must be >= 0')


@dataclass(frozen=True)
class TeacherConfig:
    # EDM | CM
    mode: str = 'EDM'
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    init_seed: int = 0
    base_checkpoint: str = ''
    cfg_weight: float = 1.0
    skip_interval: int = 1
    ema_decay: float = 0.95
    checkpoint_every: int = 500

    def validate(self):
        if self.mode not in ('EDM', 'CM'):
            raise ConfigError('teacher.mode must be EDM or CM')
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError('teacher.steps, batch_size and lr must be positive')
        if self.skip_interval < 1 or not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError('teacher.skip_interval must be >= 1 and ema_decay in [0, 1)')


@dataclass(frozen=True)
class ProfileConfig:
    blocks: Tuple[str, ...] = ()
    num_samples: int = 32
    sample_steps: int = 8
    workers: int = 4
    noise_subsets: int = 3

    def validate(self):
        if self.num_samples < 2 or self.sample_steps < 1 or self.workers < 1 or self.noise_subsets < 2:
            raise ConfigError('profile.num_samples >= 2, sample_steps >= 1, workers >= 1, noise_subsets >= 2')


@dataclass(frozen=True)
class DistillConfig:
    # denoising | consistency
    task: str = 'denoising'
    steps: int = 4000
    batch_size: int = 8
    lr: float = 1e-4
    disc_lr: float = 1e-5
    lambda_icd: float = 0.1
    lambda_mca: float = 1.0
    mca_warmup_steps: int = 3000
    noise_p_mean: float = 0.7
    noise_p_std: float = 1.6
    disc_width: int = 16
    checkpoint_every: int = 1000
    channel_ratio: float = 0.0
    channel_scorer: str = 'l2'
    channel_scope: str = 'global'
    calibration_size: int = 64

    def validate(self):
        if self.task not in ('denoising', 'consistency'):
            raise ConfigError('distill.task must be denoising or consistency')
        if self.lambda_icd < 0 or self.lambda_mca < 0:
            raise ConfigError('distill.lambda_icd and lambda_mca must be >= 0')
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.disc_lr <= 0:
            raise ConfigError('distill.steps >= 0, batch_size >= 1, lr and disc_lr > 0')
        if self.mca_warmup_steps < 0 or self.noise_p_std <= 0:
            raise ConfigError('distill.mca_warmup_steps >= 0 and noise_p_std > 0')
        if not 0.0 <= self.channel_ratio < 1.0:
            raise ConfigError('distill.channel_ratio must lie in [0, 1)')
        if self.channel_scorer not in ('l2', 'taylor') or self.channel_scope not in ('global', 'local'):
            raise ConfigError('distill.channel_scorer in {l2, taylor}, channel_scope in {global, local}')
        if self.disc_width < 4 or self.disc_width % 4:
            raise ConfigError('distill.disc_width must be a positive multiple of 4')


@dataclass(frozen=True)
class EvalConfig:
    num_samples: int = 64
    sample_steps: int = 8
    latency_reps: int = 30
    latency_warmup: int = 3
    peak: float = 1.0

    def validate(self):
        if self.num_samples < 2 or self.sample_steps < 1:
            raise ConfigError('eval.num_samples >= 2 and sample_steps >= 1')
        if self.latency_reps < 3 or self.latency_warmup < 0:
            raise ConfigError('eval.latency_reps must be >= 3 and latency_warmup >= 0')


@dataclass(frozen=True)
class ExtractorConfig:
    seed: int = 1234
    width: int = 8
    dim: int = 64

    def validate(self):
        if self.width < 4 or self.width % 4 or self.dim < 1:
            raise ConfigError('extractor.width must be a multiple of 4 and dim >= 1')


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = 'runs/default'
    data: DataConfig = field(default_factory=DataConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def validate(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError('seed must be an unsigned 64-bit integer')
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                value.validate()
        return self


SECTIONS = {f.name: f for f in fields(RunConfig) if f.name not in ('seed', 'out_dir')}


def _coerce(value, default, where):
    # Types follow the default value of the field
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ('true', 'false', '1', '0'):
            return value.lower() in ('true', '1')
        raise ConfigError('%s: expected a boolean, got %r' % (where, value))
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError('%s: expected an integer, got %r' % (where, value))
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError('%s: expected an integer, got %r' % (where, value))
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError('%s: expected a number, got %r' % (where, value))
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError('%s: expected a number, got %r' % (where, value))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError('%s: expected a string, got %r' % (where, value))
        return value
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(',') if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError('%s: expected a list, got %r' % (where, value))
        if not default:
            return tuple(str(v) for v in value)
        return tuple(_coerce(v, default[0], where) for v in value)
    raise ConfigError('%s: unsupported value %r' % (where, value))


def _apply_section(section, overrides, name):
    if not isinstance(overrides, dict):
        raise ConfigError('%s: expected an object' % name)
    known = {f.name: f for f in fields(section)}
    changes = {}
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError('unknown config key: %s.%s' % (name, key))
        changes[key] = _coerce(value, getattr(section, key), '%s.%s' % (name, key))
    return replace(section, **changes)


def apply_overrides(config, overrides):
    changes = {}
    for key, value in overrides.items():
        if key == 'seed':
            changes['seed'] = _coerce(value, 0, 'seed')
        elif key == 'out_dir':
            changes['out_dir'] = _coerce(value, '', 'out_dir')
        elif key in SECTIONS:
            changes[key] = _apply_section(changes.get(key, getattr(config, key)), value, key)
        else:
            raise ConfigError('unknown config section: %s' % key)
    return replace(config, **changes)


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    overrides = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        raw = environ[key]
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        name = key[len(ENV_PREFIX):].lower()
        if name in ('seed', 'out_dir'):
            overrides[name] = value
        elif '__' in name:
            section, field_name = name.split('__', 1)
            overrides.setdefault(section, {})[field_name] = value
        else:
            raise ConfigError('malformed override variable %s (expected %s<SECTION>__<FIELD>)' % (key, ENV_PREFIX))
    return overrides


def load_config(path=None, environ=None, seed=None, out_dir=None):
    config = RunConfig()
    if path:
        try:
            data = read_json(path)
        except FileNotFoundError:
            raise ConfigError('config file not found: %s' % path)
        except ValueError as e:
            raise ConfigError('unparseable config %s: %s' % (path, e))
        if not isinstance(data, dict):
            raise ConfigError('config %s must hold a JSON object' % path)
        config = apply_overrides(config, data)
    config = apply_overrides(config, env_overrides(environ))
    flags = {}
    if seed is not None:
        flags['seed'] = seed
    if out_dir is not None:
        flags['out_dir'] = out_dir
    config = apply_overrides(config, flags)
    logger.debug('Resolved config: %s', canonical_json(config))
    return config.validate()


def config_to_dict(config):
    data = asdict(config)
    data.pop('out_dir')
    return data


def canonical_json(config):
    return json.dumps(config_to_dict(config), sort_keys=True, separators=(',', ':'))


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode('utf-8')).hexdigest()[:16]
