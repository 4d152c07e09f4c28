'''
Fine-tuning a pruned student against its frozen teacher:

    L = L_task + lambda_icd * L_icd + lambda_mca * (L_gen + L_disc)

L_icd matches stage-boundary activations of student and teacher. The
adversarial pair scores instance-noised denoiser outputs with a
spatio-temporal discriminator: non-saturating generator loss on the
logit, hinge loss for the discriminator.

USAGE:
$ <script.py> <teacher.vdmk> <pruning_plan.json> <train.vdds> <steps> <output.vdmk>

EXAMPLE:
$ python src/icmd.py runs/default/checkpoints/teacher.vdmk runs/default/reports/pruning_plan.json runs/default/data/train.vdds 200 /tmp/student.vdmk
'''

import logging
import math
import sys
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np
from tqdm import tqdm

from src.diffusion import (ConsistencyConfig, Denoiser, KarrasSchedule, Preconditioner, SigmaDistribution,
                           add_noise, consistency_loss, edm_weight, ema_update, precondition_coeffs,
                           sample_training_sigmas, weighted_mse)
from src.pruner import PlanError, apply_plan
from src.synthdata import first_frame_condition
from src.unet import noise_embedding, save_model
from utils.errors import ConfigError, NonFiniteLossError
from utils.file_utils import write_csv
from utils.seed_utils import rng_for
from utils.tensor_core import Adam, Tape, Tensor, ShapeMismatchError, backward, named_grads, no_grad
from utils.tensor_core import ops

logger = logging.getLogger(__name__)

LOSS_TERMS = ('task', 'icd', 'mca_gen', 'mca_disc', 'total')


class FeatureAlignmentError(ConfigError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_icd: float = 0.1
    lambda_mca: float = 1.0
    mca_warmup_steps: int = 3000

    def __post_init__(self):
        if self.lambda_icd < 0 or self.lambda_mca < 0:
            raise ConfigError('loss weights must be >= 0')
        if self.mca_warmup_steps < 0:
            raise ConfigError('mca_warmup_steps must be >= 0')


@dataclass(frozen=True)
class InstanceNoiseParams:
    p_mean: float = 0.7
    p_std: float = 1.6
    num_bins: int = 999

    def bins(self):
        # Geometric grid spanning +-3 standard deviations of log sigma
        return np.geomspace(math.exp(self.p_mean - 3 * self.p_std), math.exp(self.p_mean + 3 * self.p_std),
                            self.num_bins)


def snap_instance_noise(z, params):
    '''Log-sigma z -> (t', sigma) on the discrete grid; t' is 1-based.'''
    z = np.asarray(z, dtype=np.float64)
    lo = params.p_mean - 3 * params.p_std
    step = 6 * params.p_std / (params.num_bins - 1)
    index = np.clip(np.rint((z - lo) / step), 0, params.num_bins - 1).astype(np.int64)
    return index + 1, params.bins()[index]


def sample_instance_noise(params, rng, n=None):
    z = rng.normal(params.p_mean, params.p_std, size=n)
    return snap_instance_noise(z, params)


# ---------------------------------------------------------------- discriminator


class Discriminator:
    '''
    Spatio head: per-frame 3x3 conv, SiLU, stride-2 3x3 conv, sigma shift,
    SiLU, 1x1 conv to one channel. Temporal head: the same pattern with
    3-tap convs over the frame axis at every spatial site. The logit is
    the sum of the two heads' mean outputs.
    '''
    def __init__(self, channels=1, width=16, seed=0, params=None):
        self.channels, self.width, self.seed = channels, width, seed
        if params is not None:
            self.params = OrderedDict(params)
            return
        self.params = OrderedDict()
        rng = rng_for(seed, 'discriminator')
        shapes = OrderedDict([
            ('disc.embed.weight', (width, width)),
            ('disc.spatial.conv1.weight', (width, channels, 3, 3)),
            ('disc.spatial.conv2.weight', (width, width, 3, 3)),
            ('disc.spatial.emb.weight', (width, width)),
            ('disc.spatial.out.weight', (1, width, 1, 1)),
            ('disc.temporal.conv1.weight', (width, channels, 3)),
            ('disc.temporal.conv2.weight', (width, width, 3)),
            ('disc.temporal.emb.weight', (width, width)),
            ('disc.temporal.out.weight', (1, width, 1)),
        ])
        for name, shape in shapes.items():
            if name.endswith('out.weight'):
                w = np.zeros(shape)
            else:
                w = rng.standard_normal(shape) / np.sqrt(np.prod(shape[1:]))
            self.params[name] = Tensor(w, requires_grad=True)
            self.params[name[:-len('weight')] + 'bias'] = Tensor(np.zeros(shape[0]), requires_grad=True)

    def with_params(self, params):
        merged = OrderedDict(self.params)
        merged.update(params)
        return Discriminator(self.channels, self.width, self.seed, merged)

    def frozen(self):
        return Discriminator(self.channels, self.width, self.seed,
                             OrderedDict((k, Tensor.wrap(v.data)) for k, v in self.params.items()))

    def __call__(self, latent, sigma, return_activations=False):
        return discriminator_forward(self, latent, sigma, return_activations)


def _row_mean(x):
    # (B, K) -> (B,)
    k = x.shape[1]
    return ops.reshape(ops.linear(x, Tensor.wrap(np.full((1, k), 1.0 / k))), (x.shape[0],))


def discriminator_forward(disc, latent, sigma, return_activations=False):
    if not isinstance(latent, Tensor):
        latent = Tensor(latent)
    if latent.ndim != 5 or latent.shape[2] != disc.channels:
        raise ShapeMismatchError('discriminator', latent.shape, (None, None, disc.channels, None, None))
    p = disc.params
    b, f, c, height, width = latent.shape
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1), (b,))
    c_noise = np.log(np.maximum(sigma, 1e-20)) / 4.0
    emb = Tensor.wrap(noise_embedding(c_noise, disc.width))
    emb = ops.silu(ops.linear(emb, p['disc.embed.weight'], p['disc.embed.bias']))

    h = ops.reshape(latent, (b * f, c, height, width))
    h = ops.silu(ops.conv2d(h, p['disc.spatial.conv1.weight'], p['disc.spatial.conv1.bias'], padding=1))
    h = ops.conv2d(h, p['disc.spatial.conv2.weight'], p['disc.spatial.conv2.bias'], stride=2, padding=1)
    shift = ops.repeat_rows(ops.linear(emb, p['disc.spatial.emb.weight'], p['disc.spatial.emb.bias']), f)
    spatial_act = ops.silu(ops.channel_shift(h, shift))
    s = ops.conv2d(spatial_act, p['disc.spatial.out.weight'], p['disc.spatial.out.bias'])
    spatial_logit = _row_mean(ops.reshape(s, (b, f * s.shape[2] * s.shape[3])))

    t = ops.reshape(ops.transpose(latent, (0, 3, 4, 2, 1)), (b * height * width, c, f))
    t = ops.silu(ops.conv1d(t, p['disc.temporal.conv1.weight'], p['disc.temporal.conv1.bias'], padding=1))
    t = ops.conv1d(t, p['disc.temporal.conv2.weight'], p['disc.temporal.conv2.bias'], padding=1)
    shift = ops.repeat_rows(ops.linear(emb, p['disc.temporal.emb.weight'], p['disc.temporal.emb.bias']),
                            height * width)
    temporal_act = ops.silu(ops.channel_shift(t, shift))
    o = ops.conv1d(temporal_act, p['disc.temporal.out.weight'], p['disc.temporal.out.bias'])
    temporal_logit = _row_mean(ops.reshape(o, (b, height * width * f)))

    logit = ops.add(spatial_logit, temporal_logit)
    if return_activations:
        spatial = spatial_act.data.reshape((b, f) + spatial_act.shape[1:])
        temporal = temporal_act.data.reshape((b, height, width) + temporal_act.shape[1:])
        return logit, {'spatial': spatial, 'temporal': temporal}
    return logit


def inject_instance_noise(x, sigma, noise):
    sigma = np.asarray(sigma, dtype=np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
    return ops.add(x, Tensor.wrap(sigma * noise))


def _noise_like(x, rng, noise):
    return rng.standard_normal(x.shape) if noise is None else np.asarray(noise, dtype=np.float64)


def mca_gen_loss(disc, student_out, sigma, rng=None, noise=None):
    '''mean softplus(-D(student_out + sigma * eps)); the discriminator stays frozen.'''
    noisy = inject_instance_noise(student_out, sigma, _noise_like(student_out, rng, noise))
    logit = discriminator_forward(disc.frozen(), noisy, sigma)
    return ops.mean(ops.softplus(ops.scale(logit, -1.0)))


def hinge_terms(fake_logit, real_logit):
    fake = ops.mean(ops.relu(ops.add_scalar(fake_logit, 1.0)))
    real = ops.mean(ops.relu(ops.add_scalar(ops.scale(real_logit, -1.0), 1.0)))
    return ops.add(fake, real)


def mca_disc_loss(disc, student_out, teacher_out, sigma, rng=None, noise=None):
    '''Hinge loss on the discriminator; both branches share the same instance noise.'''
    eps = _noise_like(student_out, rng, noise)
    fake = inject_instance_noise(student_out.detach(), sigma, eps)
    real = inject_instance_noise(teacher_out.detach(), sigma, eps)
    return hinge_terms(discriminator_forward(disc, fake, sigma), discriminator_forward(disc, real, sigma))


# ---------------------------------------------------------------- feature distillation


def icd_loss(student_feats, teacher_feats):
    '''Sum over boundaries of the MSE against (constant) teacher features.'''
    if len(student_feats) != len(teacher_feats):
        raise FeatureAlignmentError('feature count mismatch: %d student vs %d teacher'
                                    % (len(student_feats), len(teacher_feats)))
    total = Tensor.wrap(np.zeros(()))
    for l, (s, t) in enumerate(zip(student_feats, teacher_feats)):
        if s.shape != t.shape:
            raise FeatureAlignmentError('feature %d: student shape %s, teacher shape %s' % (l, s.shape, t.shape))
        total = ops.add(total, ops.mse(s, t.detach()))
    return total


def denoise_with_features(model, x_t, sigma, cond, precond):
    '''Preconditioned denoiser output plus the inner network's stage-end activations.'''
    if not isinstance(x_t, Tensor):
        x_t = Tensor(x_t)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1), (x_t.shape[0],))
    c0, c1, c2, c3 = np.array([precondition_coeffs(s, precond) for s in sigma]).T
    inner, features = model(ops.scale_per_sample(x_t, c2), c3, cond, return_features=True)
    out = ops.add(ops.scale_per_sample(x_t, c0), ops.scale_per_sample(inner, c1))
    return out, features


def shared_boundaries(student_features, teacher_features):
    return [k for k in student_features if k in teacher_features
            and student_features[k].shape == teacher_features[k].shape]


def align_features(student, teacher, plan, x_t, sigma, cond=None, precond=None):
    '''
    Stage-end activations (Down stages before downsampling, Up stages
    before upsampling, Mid when it has blocks) where student and teacher
    shapes coincide. Up-stage features are taken after the stage's blocks,
    not at the skip concatenation.
    '''
    if plan is not None and teacher.graph != plan.source_graph:
        raise PlanError('teacher graph does not match the pruning plan')
    precond = precond or Preconditioner()
    _, s_feats = denoise_with_features(student, x_t, sigma, cond, precond)
    with no_grad():
        _, t_feats = denoise_with_features(teacher, x_t, sigma, cond, precond)
    keys = shared_boundaries(s_feats, t_feats)
    if not keys:
        raise FeatureAlignmentError('student and teacher share no stage boundary')
    return [s_feats[k] for k in keys], [t_feats[k] for k in keys]


# ---------------------------------------------------------------- training


@dataclass
class DistillState:
    student: Any
    teacher: Any
    disc: Discriminator
    student_opt: Adam
    disc_opt: Adam
    weights: LossWeights
    step: int = 0
    rng: Any = None
    precond: Preconditioner = field(default_factory=Preconditioner)
    noise: InstanceNoiseParams = field(default_factory=InstanceNoiseParams)
    task: str = 'denoising'
    ema: Any = None
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    schedule: KarrasSchedule = field(default_factory=KarrasSchedule)
    sigma_dist: SigmaDistribution = field(default_factory=SigmaDistribution)
    plan: Optional[Any] = None


def init_distill_state(teacher, plan, weights, seed, lr=1e-4, disc_lr=1e-5, disc_width=16, task='denoising',
                       precond=None, noise=None, consistency=None, schedule=None, sigma_dist=None, student=None):
    if task not in ('denoising', 'consistency'):
        raise ConfigError('unknown task loss %r' % (task,))
    frozen_teacher = teacher.frozen()
    if student is None:
        student = apply_plan(frozen_teacher, plan, trainable=True)
    else:
        student = student.trainable()
    disc = Discriminator(teacher.graph.latent_channels, disc_width, seed)
    return DistillState(
        student=student, teacher=frozen_teacher, disc=disc,
        student_opt=Adam(lr), disc_opt=Adam(disc_lr), weights=weights, step=0,
        rng=rng_for(seed, 'distill', 'loop'), precond=precond or Preconditioner(),
        noise=noise or InstanceNoiseParams(), task=task,
        ema=student.frozen() if task == 'consistency' else None,
        consistency=consistency or ConsistencyConfig(), schedule=schedule or KarrasSchedule(),
        sigma_dist=sigma_dist or SigmaDistribution(), plan=plan)


def _check_finite(term, value):
    if not math.isfinite(value):
        raise NonFiniteLossError(term, value)
    return value


def distill_step(state, batch):
    '''One discriminator update then one student update. Returns (state', breakdown).'''
    rng, weights = state.rng, state.weights
    x0 = np.asarray(batch, dtype=np.float64)
    cond = first_frame_condition(x0) if state.student.graph.conditioned else None
    use_mca = state.step >= weights.mca_warmup_steps and weights.lambda_mca > 0

    sigma = sample_training_sigmas(rng, x0.shape[0], state.sigma_dist)
    x_t = add_noise(x0, sigma, rng)
    with no_grad():
        teacher_out, teacher_feats = denoise_with_features(state.teacher, x_t, sigma, cond, state.precond)

    breakdown = OrderedDict((k, 0.0) for k in LOSS_TERMS)
    disc = state.disc
    with Tape() as tape:
        student_out, student_feats = denoise_with_features(state.student, x_t, sigma, cond, state.precond)
        if state.task == 'denoising':
            task = weighted_mse(student_out, Tensor(x0), edm_weight(sigma, state.precond.sigma_data))
        else:
            task = consistency_loss(Denoiser(state.student, state.precond), Denoiser(state.ema, state.precond),
                                    Denoiser(state.teacher, state.precond),
                                    state.consistency, x0, rng, state.schedule, cond)
        breakdown['task'] = _check_finite('task', task.item())
        keys = shared_boundaries(student_feats, teacher_feats)
        if not keys:
            raise FeatureAlignmentError('student and teacher share no stage boundary')
        icd = icd_loss([student_feats[k] for k in keys], [teacher_feats[k] for k in keys])
        breakdown['icd'] = _check_finite('icd', icd.item())
        objective = task
        if weights.lambda_icd > 0:
            objective = ops.add(objective, ops.scale(icd, weights.lambda_icd))

        if use_mca:
            _, noise_sigma = sample_instance_noise(state.noise, rng, x0.shape[0])
            eps = rng.standard_normal(x0.shape)
            with Tape() as disc_tape:
                disc_loss = mca_disc_loss(disc, student_out, teacher_out, noise_sigma, noise=eps)
            breakdown['mca_disc'] = _check_finite('mca_disc', disc_loss.item())
            disc_grads = named_grads(backward(disc_tape, disc_loss), disc.params)
            disc = disc.with_params(state.disc_opt.step(disc.params, disc_grads))
            gen = mca_gen_loss(disc, student_out, noise_sigma, noise=eps)
            breakdown['mca_gen'] = _check_finite('mca_gen', gen.item())
            objective = ops.add(objective, ops.scale(gen, weights.lambda_mca))

    grads = named_grads(backward(tape, objective), state.student.params)
    student = state.student.with_params(state.student_opt.step(state.student.params, grads))
    ema = state.ema
    if ema is not None:
        ema = ema.with_params(ema_update(ema.params, student.params, state.consistency.ema_decay))
    breakdown['total'] = (breakdown['task'] + weights.lambda_icd * breakdown['icd']
                          + weights.lambda_mca * (breakdown['mca_gen'] + breakdown['mca_disc']))
    return replace(state, student=student, disc=disc, ema=ema, step=state.step + 1), breakdown


class Distiller():
    '''Runs distill_step over random training batches, logging losses and writing checkpoints.'''
    def __init__(self, state, train_videos, batch_size=8, checkpoint_every=0, checkpoint_path=None,
                 config_hash='', meta=None):
        self.state = state
        self.train_videos = np.asarray(train_videos)
        self.batch_size = min(batch_size, len(self.train_videos))
        self.checkpoint_every = checkpoint_every
        self.checkpoint_path = checkpoint_path
        self.config_hash = config_hash
        self.meta = dict(meta or {})
        self.history = []

    def run(self, steps):
        if len(self.train_videos) == 0:
            raise ConfigError('distillation needs training videos')
        for _ in tqdm(range(steps), desc='Distilling', unit=' step'):
            idx = np.sort(self.state.rng.choice(len(self.train_videos), self.batch_size, replace=False))
            self.state, breakdown = distill_step(self.state, self.train_videos[idx])
            self.history.append((self.state.step, breakdown))
            if self.checkpoint_every and self.checkpoint_path and self.state.step % self.checkpoint_every == 0:
                self.save_checkpoint(self.checkpoint_path)
        logger.info('Distilled %d steps; last total loss %.6g', steps,
                    self.history[-1][1]['total'] if self.history else float('nan'))
        return self.state

    def save_checkpoint(self, path):
        meta = dict(self.meta, step=self.state.step, config_hash=self.config_hash)
        save_model(path, self.state.student, meta)
        return

    def write_losses(self, outfile):
        rows = [[step] + [float(b[k]) for k in LOSS_TERMS] for step, b in self.history]
        write_csv(outfile, ['step'] + list(LOSS_TERMS), rows, self.config_hash)
        return


if __name__ == '__main__':
    from src.pruner import PruningPlan
    from src.synthdata import load
    from src.unet import load_model
    from utils.file_utils import read_json

    teacher, meta = load_model(sys.argv[1])
    plan = PruningPlan.from_dict(read_json(sys.argv[2]))
    train = load(sys.argv[3])
    state = init_distill_state(teacher, plan, LossWeights(mca_warmup_steps=0), seed=0)
    distiller = Distiller(state, train.videos)
    distiller.run(int(sys.argv[4]))
    distiller.save_checkpoint(sys.argv[5])
    print('Written student checkpoint to:', sys.argv[5])
