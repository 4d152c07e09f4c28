import os
import subprocess
import sys

import numpy as np
import pytest

from src.diffusion import CM, sample_checkpoint
from src.train_teacher import TeacherTrainer
from src.unet import load_model, params_checksum, save_model
from utils.errors import ConfigError, FileFormatError, PrerequisiteError
from utils.file_utils import read_csv

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def checkpoint(tiny, small_videos, tmp_path):
    trainer = TeacherTrainer(tiny, small_videos, batch_size=2, config_hash='abc')
    trainer.train(2)
    path = str(tmp_path / 'teacher.vdmk')
    trainer.save(path)
    return path


def test_training_is_deterministic(tiny, small_videos):
    a = TeacherTrainer(tiny, small_videos, seed=3, batch_size=2)
    b = TeacherTrainer(tiny, small_videos, seed=3, batch_size=2)
    a.train(2)
    b.train(2)
    assert params_checksum(a.model) == params_checksum(b.model)
    assert [v for _, v in a.history] == [v for _, v in b.history]


def test_checkpoint_records_the_video_shape(checkpoint, tiny):
    model, meta = load_model(checkpoint)
    assert model.graph == tiny
    assert meta['frames'] == 4
    assert meta['size'] == [1, 8, 8]
    assert meta['step'] == 2 and meta['config_hash'] == 'abc'


def test_losses_csv(tiny, small_videos, tmp_path):
    trainer = TeacherTrainer(tiny, small_videos, batch_size=2, config_hash='abc')
    trainer.train(3)
    path = str(tmp_path / 'losses.csv')
    trainer.write_losses(path)
    config_hash, header, rows = read_csv(path)
    assert config_hash == 'abc'
    assert header == ['step', 'loss']
    assert [r[0] for r in rows] == ['1', '2', '3']


def test_trainer_rejects_bad_setups(tiny, small_videos):
    with pytest.raises(ConfigError):
        TeacherTrainer(tiny, small_videos, mode='DDPM')
    with pytest.raises(ConfigError):
        TeacherTrainer(tiny, small_videos[:0])
    with pytest.raises(PrerequisiteError):
        TeacherTrainer(tiny, small_videos, mode=CM)


def test_sampling_a_saved_teacher(checkpoint):
    videos = sample_checkpoint(checkpoint, steps=1, num=2)
    assert videos.shape == (2, 4, 1, 8, 8)
    assert np.all(np.isfinite(videos))


def test_sampling_needs_the_video_shape(tiny_model, tmp_path):
    path = str(tmp_path / 'bare.vdmk')
    save_model(path, tiny_model, {})
    with pytest.raises(FileFormatError):
        sample_checkpoint(path, steps=1, num=1)


def test_sampling_script_runs_on_a_teacher_checkpoint(checkpoint):
    env = dict(os.environ, PYTHONPATH=ROOT)
    result = subprocess.run([sys.executable, os.path.join(ROOT, 'src', 'diffusion.py'), checkpoint, '1', '2'],
                            cwd=ROOT, env=env, capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
    assert 'Sampled (2, 4, 1, 8, 8)' in result.stdout
