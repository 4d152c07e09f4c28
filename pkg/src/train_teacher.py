'''
Trains the desk-scale teacher denoiser.

EDM mode fits the preconditioned U-Net with the weighted denoising loss.
CM mode starts from an EDM checkpoint and runs consistency distillation:
the frozen EDM model takes one guided Euler step, an EMA copy of the
student supplies the target.

USAGE:
$ <script.py> <train.vdds> <steps> <output.vdmk> [<EDM|CM>] [<edm_base.vdmk>]

EXAMPLE:
$ python src/train_teacher.py runs/default/data/train.vdds 500 /tmp/teacher.vdmk
$ python src/train_teacher.py runs/default/data/train.vdds 200 /tmp/teacher_cm.vdmk CM /tmp/teacher.vdmk
'''

import logging
import math
import sys
from dataclasses import asdict

import numpy as np
from tqdm import tqdm

from src.diffusion import (CM, EDM, ConsistencyConfig, Denoiser, KarrasSchedule, Preconditioner, SigmaDistribution,
                           consistency_loss, denoising_loss, ema_update)
from src.synthdata import first_frame_condition
from src.unet import build, load_model, save_model
from utils.errors import ConfigError, NonFiniteLossError, PrerequisiteError
from utils.file_utils import write_csv
from utils.seed_utils import rng_for
from utils.tensor_core import Adam, Tape, backward, named_grads

logger = logging.getLogger(__name__)


class TeacherTrainer():
    def __init__(self, graph, train_videos, mode=EDM, seed=0, init_seed=0, lr=1e-3, batch_size=8,
                 precond=None, schedule=None, sigma_dist=None, consistency=None, base_model=None,
                 checkpoint_every=0, checkpoint_path=None, config_hash=''):
        if mode not in (EDM, CM):
            raise ConfigError('teacher mode must be EDM or CM, got %r' % (mode,))
        self.train_videos = np.asarray(train_videos, dtype=np.float64)
        if len(self.train_videos) == 0:
            raise ConfigError('teacher training needs training videos')
        self.mode = mode
        self.seed = seed
        self.batch_size = min(batch_size, len(self.train_videos))
        self.schedule = schedule or KarrasSchedule()
        self.sigma_dist = sigma_dist or SigmaDistribution()
        self.consistency = consistency or ConsistencyConfig()
        self.checkpoint_every = checkpoint_every
        self.checkpoint_path = checkpoint_path
        self.config_hash = config_hash
        self.rng = rng_for(seed, 'train-teacher', mode)
        self.optimizer = Adam(lr)
        self.history = []

        if mode == EDM:
            self.precond = precond or Preconditioner()
            self.model = build(graph, init_seed, trainable=True)
            self.base = None
            self.ema = None
        else:
            if base_model is None:
                raise PrerequisiteError('missing prerequisite: EDM base checkpoint')
            base_precond = Preconditioner(EDM, (precond or Preconditioner()).sigma_data)
            self.precond = precond if precond is not None and precond.mode == CM else \
                Preconditioner(CM, base_precond.sigma_data)
            self.base = Denoiser(base_model.frozen(), base_precond)
            self.model = base_model.trainable()
            self.ema = base_model.frozen()

    def _batch(self):
        idx = np.sort(self.rng.choice(len(self.train_videos), self.batch_size, replace=False))
        return self.train_videos[idx]

    def step(self):
        x0 = self._batch()
        cond = first_frame_condition(x0) if self.model.graph.conditioned else None
        with Tape() as tape:
            if self.mode == EDM:
                loss = denoising_loss(Denoiser(self.model, self.precond), x0, self.rng,
                                      self.precond.sigma_data, self.sigma_dist, cond)
            else:
                loss = consistency_loss(Denoiser(self.model, self.precond), Denoiser(self.ema, self.precond),
                                        self.base, self.consistency, x0, self.rng, self.schedule, cond)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError('task', value)
        grads = named_grads(backward(tape, loss), self.model.params)
        self.model = self.model.with_params(self.optimizer.step(self.model.params, grads))
        if self.ema is not None:
            self.ema = self.ema.with_params(ema_update(self.ema.params, self.model.params,
                                                       self.consistency.ema_decay))
        return value

    def train(self, steps):
        for i in tqdm(range(steps), desc='Training %s teacher' % self.mode, unit=' step'):
            self.history.append((i + 1, self.step()))
            if self.checkpoint_every and self.checkpoint_path and (i + 1) % self.checkpoint_every == 0:
                self.save(self.checkpoint_path)
        if self.history:
            logger.info('Trained %s teacher for %d steps; final loss %.6g', self.mode, steps, self.history[-1][1])
        return self.model

    def meta(self):
        f, c, h, w = self.train_videos.shape[1:]
        return {'config_hash': self.config_hash, 'mode': self.mode, 'preconditioner': asdict(self.precond),
                'frames': int(f), 'size': [int(c), int(h), int(w)], 'step': len(self.history)}

    def save(self, path):
        # CM checkpoints are evaluated through the EMA-free online student
        save_model(path, self.model, self.meta())
        return

    def write_losses(self, outfile):
        write_csv(outfile, ['step', 'loss'], [[s, float(v)] for s, v in self.history], self.config_hash)
        return


if __name__ == '__main__':
    from src.netgraph import tiny_graph
    from src.synthdata import load

    train = load(sys.argv[1])
    steps, outfile = int(sys.argv[2]), sys.argv[3]
    mode = sys.argv[4] if len(sys.argv) > 4 else EDM
    base = load_model(sys.argv[5])[0] if len(sys.argv) > 5 else None
    graph = base.graph if base is not None else tiny_graph()
    trainer = TeacherTrainer(graph, train.videos, mode=mode, base_model=base)
    trainer.train(steps)
    trainer.save(outfile)
    print('Written %s teacher checkpoint to: %s' % (mode, outfile))
