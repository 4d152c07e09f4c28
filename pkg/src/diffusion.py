'''
EDM / consistency-model machinery: preconditioning, noising, the Euler
probability-flow sampler, the weighted denoising loss and the
consistency-distillation loss.

Denoisers are callables (x_t: Tensor, sigma: (B,) array, cond) -> Tensor.
`Denoiser` wraps a U-Net with its preconditioner; tests and training can
pass any other callable with the same signature.

USAGE:
$ <script.py> <checkpoint.vdmk> <steps> [num_samples]

EXAMPLE:
$ python src/diffusion.py runs/default/checkpoints/teacher.vdmk 1 4
'''

import logging
import math
import sys
from dataclasses import dataclass

import numpy as np

from utils.errors import ConfigError, FileFormatError, NumericError
from utils.seed_utils import rng_for
from utils.tensor_core import Tensor, ShapeMismatchError, no_grad
from utils.tensor_core import ops

logger = logging.getLogger(__name__)

EDM = 'EDM'
CM = 'CM'
# c3 = ln(sigma)/4 needs a floor at sigma = 0
LOG_SIGMA_FLOOR = 1e-20


class NegativeSigmaError(NumericError):
    pass


class ScheduleRangeError(ConfigError):
    pass


@dataclass(frozen=True)
class Preconditioner:
    mode: str = EDM
    sigma_data: float = 0.5
    # CM mode only: the sigma at which the network reduces to the identity
    boundary_sigma: float = 0.0

    def __post_init__(self):
        if self.mode not in (EDM, CM):
            raise ConfigError('preconditioner mode must be EDM or CM, got %r' % (self.mode,))
        if self.sigma_data <= 0:
            raise ConfigError('sigma_data must be positive')


@dataclass(frozen=True)
class KarrasSchedule:
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    rho: float = 7.0
    num_steps: int = 40


@dataclass(frozen=True)
class SigmaDistribution:
    # EDM training lognormal
    p_mean: float = -1.2
    p_std: float = 1.2


@dataclass(frozen=True)
class ConsistencyConfig:
    solver: str = 'euler'
    cfg_weight: float = 1.0
    skip_interval: int = 1
    ema_decay: float = 0.95

    def __post_init__(self):
        if self.solver != 'euler':
            raise ConfigError('only the Euler solver is supported, got %r' % (self.solver,))
        if self.skip_interval < 1:
            raise ConfigError('skip_interval must be >= 1')
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError('ema_decay must be in [0, 1)')


def precondition_coeffs(sigma, p):
    sigma = float(sigma)
    if sigma < 0 or math.isnan(sigma):
        raise NegativeSigmaError('sigma must be >= 0, got %r' % sigma)
    sd = p.sigma_data
    norm = math.sqrt(sigma * sigma + sd * sd)
    c2 = 1.0 / norm
    c3 = math.log(max(sigma, LOG_SIGMA_FLOOR)) / 4.0
    if p.mode == EDM:
        c0 = sd * sd / (sigma * sigma + sd * sd)
        c1 = sigma * sd / norm
    else:
        offset = sigma - p.boundary_sigma
        c0 = sd * sd / (offset * offset + sd * sd)
        c1 = offset * sd / norm
    return c0, c1, c2, c3


def _per_sample(sigma, batch):
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sigma.size == 1 and batch != 1:
        sigma = np.full(batch, float(sigma[0]))
    if sigma.shape != (batch,):
        raise ShapeMismatchError('sigma', sigma.shape, (batch,), 'one sigma per sample')
    return sigma


def add_noise(x0, sigma, rng, noise=None):
    '''x0 + sigma * eps on numpy arrays; sigma scalar or per sample.'''
    x0 = np.asarray(x0, dtype=np.float64)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise NegativeSigmaError('sigma must be >= 0')
    s = sigma.reshape((-1,) + (1,) * (x0.ndim - 1)) if sigma.ndim else sigma
    return np.where(s == 0, x0, x0 + s * noise)


def denoise(model, x_t, sigma, cond, p):
    '''D(x_t; sigma) = c0 * x_t + c1 * f(c2 * x_t, c3), per sample.'''
    if not isinstance(x_t, Tensor):
        x_t = Tensor(x_t)
    sigmas = _per_sample(sigma, x_t.shape[0])
    coeffs = np.array([precondition_coeffs(s, p) for s in sigmas])
    c0, c1, c2, c3 = coeffs.T
    if not np.any(c1):
        # CM boundary: the network drops out and the input passes through untouched
        return ops.identity(x_t)
    inner = model(ops.scale_per_sample(x_t, c2), c3, cond)
    if inner.shape != x_t.shape:
        raise ShapeMismatchError('denoise', inner.shape, x_t.shape)
    return ops.add(ops.scale_per_sample(x_t, c0), ops.scale_per_sample(inner, c1))


class Denoiser:
    def __init__(self, model, precond=None):
        self.model = model
        self.precond = precond or Preconditioner()

    def __call__(self, x_t, sigma, cond=None):
        return denoise(self.model, x_t, sigma, cond, self.precond)


def karras_sigmas(schedule, n=None):
    '''n descending Karras sigmas from sigma_max to sigma_min, then a final 0.'''
    n = schedule.num_steps if n is None else int(n)
    if n < 1:
        raise ScheduleRangeError('need at least one sampling step')
    if n == 1:
        return np.array([schedule.sigma_max, 0.0])
    inv_rho = 1.0 / schedule.rho
    ramp = np.arange(n) / (n - 1)
    hi, lo = schedule.sigma_max ** inv_rho, schedule.sigma_min ** inv_rho
    sigmas = (hi + ramp * (lo - hi)) ** schedule.rho
    return np.append(sigmas, 0.0)


def sample(denoiser, schedule, steps, cond, rng, shape):
    '''
    Euler integration of the probability-flow ODE from sigma_max * eps.
    The last step lands on sigma = 0, where it returns the denoised estimate.
    '''
    if steps < 1:
        raise ScheduleRangeError('steps must be >= 1')
    sigmas = karras_sigmas(schedule, steps)
    logger.debug('Sampling %d Euler steps from sigma %.4g', steps, sigmas[0])
    x = sigmas[0] * rng.standard_normal(shape)
    with no_grad():
        for i in range(steps):
            sigma, sigma_next = sigmas[i], sigmas[i + 1]
            d = denoiser(Tensor.wrap(x), sigma, cond).data
            if sigma_next == 0:
                x = np.array(d)
            else:
                x = x + (sigma_next - sigma) * (x - d) / sigma
    return x


def sample_training_sigmas(rng, n, dist=None):
    dist = dist or SigmaDistribution()
    return np.exp(dist.p_mean + dist.p_std * rng.standard_normal(n))


def edm_weight(sigma, sigma_data):
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def weighted_mse(pred, target, weights):
    # mean_b w_b * mean_elements (pred_b - target_b)^2
    diff = ops.sub(pred, target)
    scaled = ops.scale_per_sample(diff, np.sqrt(weights))
    return ops.mse(scaled, Tensor.wrap(np.zeros(scaled.shape)))


def denoising_loss(denoiser, batch, rng, sigma_data=0.5, dist=None, cond=None, sigmas=None, noise=None):
    '''EDM-weighted denoising loss over a batch of clean latents (B, F, C, H, W).'''
    x0 = np.asarray(batch, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ShapeMismatchError('denoising_loss', x0.shape, (1,), 'empty batch')
    if sigmas is None:
        sigmas = sample_training_sigmas(rng, x0.shape[0], dist)
    sigmas = _per_sample(sigmas, x0.shape[0])
    x_t = add_noise(x0, sigmas, rng, noise)
    d = denoiser(Tensor.wrap(x_t), sigmas, cond)
    return weighted_mse(d, Tensor(x0), edm_weight(sigmas, sigma_data))


def cfg_combine(d_uncond, d_cond, weight):
    return d_uncond + weight * (d_cond - d_uncond)


def guided_denoise(denoiser, x_t, sigma, cond, weight):
    '''Classifier-free guidance; the unconditional branch sees a zero condition.'''
    d_cond = denoiser(Tensor.wrap(x_t), sigma, cond).data
    if cond is None or weight == 1.0:
        return np.array(d_cond)
    d_uncond = denoiser(Tensor.wrap(x_t), sigma, np.zeros_like(np.asarray(cond, dtype=np.float64))).data
    return cfg_combine(d_uncond, d_cond, weight)


def euler_step(x, sigma, sigma_next, d):
    s = np.asarray(sigma, dtype=np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
    s_next = np.asarray(sigma_next, dtype=np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
    return x + (s_next - s) * (x - d) / s


def consistency_loss(student, ema_target, teacher, cfg, batch, rng, schedule=None, cond=None):
    '''
    Squared-L2 consistency distillation: the student at t_{n+k} must match
    the EMA target at t_n, where x_{t_n} comes from one guided Euler step
    of the frozen teacher. Only the student sees the tape.
    '''
    schedule = schedule or KarrasSchedule()
    x0 = np.asarray(batch, dtype=np.float64)
    ascending = karras_sigmas(schedule)[:-1][::-1]
    n_disc, k = len(ascending), cfg.skip_interval
    if k < 1 or k > n_disc - 1:
        raise ScheduleRangeError('skip interval %d outside the %d-step schedule' % (k, n_disc))
    n = rng.integers(0, n_disc - k, size=x0.shape[0])
    sigma_hi, sigma_lo = ascending[n + k], ascending[n]
    x_hi = add_noise(x0, sigma_hi, rng)

    with no_grad():
        d = guided_denoise(teacher, x_hi, sigma_hi, cond, cfg.cfg_weight)
        x_lo = euler_step(x_hi, sigma_hi, sigma_lo, d)
        target = ema_target(Tensor.wrap(x_lo), sigma_lo, cond).data
    pred = student(Tensor.wrap(x_hi), sigma_hi, cond)
    return ops.mse(pred, Tensor.wrap(target))


def ema_update(target_params, online_params, decay):
    '''theta- <- decay * theta- + (1 - decay) * theta, returned as fresh constants.'''
    updated = {}
    for name, t in target_params.items():
        online = online_params[name].data
        updated[name] = Tensor.wrap(decay * t.data + (1.0 - decay) * online)
    return updated


def sample_checkpoint(path, steps, num=4, seed=0):
    '''Draws `num` videos from a saved denoiser; the latent shape comes from its training metadata.'''
    from src.unet import load_model

    model, meta = load_model(path)
    if 'frames' not in meta or 'size' not in meta:
        raise FileFormatError('%s: checkpoint carries no video shape' % path)
    c, h, w = (int(v) for v in meta['size'])
    shape = (num, int(meta['frames']), c, h, w)
    precond = Preconditioner(**meta.get('preconditioner', {}))
    cond = np.zeros((num, 1, c, h, w)) if model.graph.conditioned else None
    return sample(Denoiser(model, precond), KarrasSchedule(), steps, cond, rng_for(seed, 'sample'), shape)


if __name__ == '__main__':
    num = int(sys.argv[3]) if len(sys.argv) > 3 else 4
    out = sample_checkpoint(sys.argv[1], int(sys.argv[2]), num)
    print('Sampled', out.shape, 'mean %.6g std %.6g' % (out.mean(), out.std()))
