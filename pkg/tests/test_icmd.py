import math
from collections import OrderedDict

import numpy as np
import pytest

from src.diffusion import KarrasSchedule, Preconditioner
from src.icmd import (LOSS_TERMS, Discriminator, Distiller, FeatureAlignmentError, InstanceNoiseParams, LossWeights,
                      align_features, distill_step, icd_loss, init_distill_state, mca_disc_loss, mca_gen_loss,
                      sample_instance_noise, snap_instance_noise)
from src.pruner import PlanError, plan_vdmini
from src.unet import load_model, params_checksum
from utils.errors import ConfigError, NonFiniteLossError
from utils.file_utils import read_csv
from utils.tensor_core import ShapeMismatchError, Tape, Tensor, backward, finite_difference_check
from utils.tensor_core import ops

LATENT = (2, 4, 1, 4, 4)
# 100 seeded points per loss; all but the first three run with the slow suite
SEEDS = [s if s < 3 else pytest.param(s, marks=pytest.mark.slow) for s in range(100)]


def live_disc(scale=1.0, seed=0):
    # Fresh discriminators have zero output layers; give them random ones
    disc = Discriminator(channels=1, width=4, seed=seed)
    rng = np.random.default_rng(seed + 100)
    outs = OrderedDict((name, Tensor(scale * rng.standard_normal(disc.params[name].shape), requires_grad=True))
                       for name in ('disc.spatial.out.weight', 'disc.temporal.out.weight'))
    return disc.with_params(outs)


def test_loss_weights_are_validated():
    assert LossWeights() == LossWeights(0.1, 1.0, 3000)
    with pytest.raises(ConfigError):
        LossWeights(lambda_icd=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(mca_warmup_steps=-1)


def test_instance_noise_snaps_to_the_grid():
    params = InstanceNoiseParams()
    index, sigma = snap_instance_noise(params.p_mean, params)
    assert index == 500
    assert sigma == pytest.approx(math.exp(params.p_mean))
    low, _ = snap_instance_noise(-100.0, params)
    high, _ = snap_instance_noise(100.0, params)
    assert (low, high) == (1, 999)


def test_sampled_instance_noise_lies_on_the_grid(rng):
    params = InstanceNoiseParams()
    index, sigma = sample_instance_noise(params, rng, 50)
    assert np.all((index >= 1) & (index <= 999))
    np.testing.assert_array_equal(sigma, params.bins()[index - 1])


def test_fresh_discriminator_gives_reference_losses(rng):
    disc = Discriminator(channels=1, width=4)
    x, y = Tensor(rng.standard_normal(LATENT)), Tensor(rng.standard_normal(LATENT))
    sigma = np.array([0.5, 2.0])
    assert mca_disc_loss(disc, x, y, sigma, rng).item() == pytest.approx(2.0)
    assert mca_gen_loss(disc, x, sigma, rng).item() == pytest.approx(math.log(2.0))


def test_discriminator_output_shapes(rng):
    logit, acts = live_disc()(Tensor(rng.standard_normal(LATENT)), np.array([1.0, 1.0]), return_activations=True)
    assert logit.shape == (2,)
    assert acts['spatial'].shape[:2] == (2, 4)
    assert acts['temporal'].shape[:3] == (2, 4, 4)
    with pytest.raises(ShapeMismatchError):
        live_disc()(Tensor(np.zeros((2, 4, 2, 4, 4))), np.ones(2))


@pytest.mark.parametrize('seed', SEEDS)
def test_generator_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    disc, sigma, eps = live_disc(seed=seed), np.exp(rng.standard_normal(2)), rng.standard_normal(LATENT)
    report = finite_difference_check(lambda x: mca_gen_loss(disc, x, sigma, noise=eps), rng.standard_normal(LATENT))
    assert report.max_rel_error <= 1e-4


@pytest.mark.parametrize('seed', SEEDS)
def test_discriminator_loss_gradient(seed):
    # Small output weights keep every logit inside the linear part of the hinge
    rng = np.random.default_rng(seed)
    disc, sigma, eps = live_disc(scale=0.01, seed=seed), np.exp(rng.standard_normal(2)), rng.standard_normal(LATENT)
    fake, real = Tensor(rng.standard_normal(LATENT)), Tensor(rng.standard_normal(LATENT))
    name = 'disc.spatial.conv1.weight'

    def f(w):
        return mca_disc_loss(disc.with_params({name: w}), fake, real, sigma, noise=eps)

    report = finite_difference_check(f, disc.params[name].data)
    assert report.max_rel_error <= 1e-4


def test_adversarial_losses_only_train_their_own_side(rng):
    disc, sigma, eps = live_disc(), np.ones(2), rng.standard_normal(LATENT)
    student_out = Tensor(rng.standard_normal(LATENT), requires_grad=True)
    with Tape() as tape:
        loss = mca_gen_loss(disc, student_out, sigma, noise=eps)
    grads = backward(tape, loss)
    assert student_out in grads
    assert not any(t in grads for t in disc.params.values())
    with Tape() as tape:
        loss = mca_disc_loss(disc, student_out, Tensor(rng.standard_normal(LATENT)), sigma, noise=eps)
    grads = backward(tape, loss)
    assert student_out not in grads
    assert disc.params['disc.spatial.out.weight'] in grads


def test_icd_loss():
    rng = np.random.default_rng(0)
    feats = [Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 4, 2)))]
    assert icd_loss(feats, feats).item() == 0.0
    shifted = [ops.add_scalar(f, 1.0) for f in feats]
    assert icd_loss(shifted, feats).item() == pytest.approx(2.0)
    with pytest.raises(FeatureAlignmentError):
        icd_loss(feats, feats[:1])
    with pytest.raises(FeatureAlignmentError):
        icd_loss(feats, feats[::-1])


@pytest.mark.parametrize('seed', SEEDS)
def test_icd_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    target = Tensor(rng.standard_normal((2, 3, 4)))
    report = finite_difference_check(lambda x: icd_loss([x], [target]), rng.standard_normal((2, 3, 4)))
    assert report.max_rel_error <= 1e-4


def test_feature_alignment_between_teacher_and_student(small_toy_model, rng):
    plan = plan_vdmini(small_toy_model.graph)
    state = init_distill_state(small_toy_model, plan, LossWeights(), seed=0, disc_width=4)
    x_t = rng.standard_normal((1, 4, 1, 8, 8))
    s_feats, t_feats = align_features(state.student, state.teacher, plan, x_t, np.array([1.0]))
    assert len(s_feats) == len(t_feats) > 0
    assert all(s.shape == t.shape for s, t in zip(s_feats, t_feats))
    with pytest.raises(PlanError):
        align_features(state.student, state.student, plan, x_t, np.array([1.0]))


@pytest.fixture
def distill_state(small_toy_model):
    plan = plan_vdmini(small_toy_model.graph)
    return init_distill_state(small_toy_model, plan, LossWeights(mca_warmup_steps=0), seed=0, disc_width=4)


def test_distill_step_reports_a_consistent_total(distill_state, small_videos):
    teacher_sum = params_checksum(distill_state.teacher)
    state, breakdown = distill_step(distill_state, small_videos[:2])
    assert list(breakdown) == list(LOSS_TERMS)
    assert all(math.isfinite(v) for v in breakdown.values())
    expected = breakdown['task'] + 0.1 * breakdown['icd'] + 1.0 * (breakdown['mca_gen'] + breakdown['mca_disc'])
    assert breakdown['total'] == pytest.approx(expected, rel=1e-12)
    assert breakdown['mca_disc'] == pytest.approx(2.0)
    assert breakdown['mca_gen'] > 0
    assert state.step == 1
    assert params_checksum(state.teacher) == teacher_sum
    assert params_checksum(state.student) != params_checksum(distill_state.student)
    assert not np.array_equal(state.disc.params['disc.spatial.out.weight'].data,
                              distill_state.disc.params['disc.spatial.out.weight'].data)


def test_adversarial_terms_wait_for_warmup(small_toy_model, small_videos):
    plan = plan_vdmini(small_toy_model.graph)
    state = init_distill_state(small_toy_model, plan, LossWeights(mca_warmup_steps=5), seed=0, disc_width=4)
    new_state, breakdown = distill_step(state, small_videos[:2])
    assert breakdown['mca_gen'] == breakdown['mca_disc'] == 0.0
    assert new_state.disc is state.disc


def test_distill_step_rejects_non_finite_losses(distill_state, small_videos):
    batch = np.array(small_videos[:2], dtype=np.float64)
    batch[0, 1, 0, 2, 2] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        distill_step(distill_state, batch)
    assert info.value.exit_code == 4


def test_consistency_task_updates_the_ema_target(small_toy_model, small_videos):
    plan = plan_vdmini(small_toy_model.graph)
    state = init_distill_state(small_toy_model, plan, LossWeights(mca_warmup_steps=0), seed=0, disc_width=4,
                               task='consistency', schedule=KarrasSchedule(num_steps=4))
    new_state, breakdown = distill_step(state, small_videos[:2])
    assert math.isfinite(breakdown['task'])
    assert params_checksum(new_state.ema) != params_checksum(state.ema)
    assert params_checksum(new_state.ema) != params_checksum(new_state.student)
    with pytest.raises(ConfigError):
        init_distill_state(small_toy_model, plan, LossWeights(), seed=0, task='flow')


def test_distiller_writes_losses_and_checkpoints(distill_state, small_videos, tmp_path):
    checkpoint = str(tmp_path / 'student.vdmk')
    distiller = Distiller(distill_state, small_videos, batch_size=2, checkpoint_every=1, checkpoint_path=checkpoint,
                          config_hash='abc', meta={'preconditioner': {'mode': 'EDM'}})
    state = distiller.run(2)
    assert state.step == 2
    losses = str(tmp_path / 'losses.csv')
    distiller.write_losses(losses)
    config_hash, header, rows = read_csv(losses)
    assert config_hash == 'abc'
    assert header == ['step'] + list(LOSS_TERMS)
    assert [r[0] for r in rows] == ['1', '2']
    student, meta = load_model(checkpoint)
    assert meta['step'] == 2 and meta['config_hash'] == 'abc'
    assert student.graph == state.student.graph
    assert isinstance(Preconditioner(**meta['preconditioner']), Preconditioner)
