'''
Block pruning against channel pruning at a matched parameter count.

The VDMini plan fixes the parameter budget. Channel pruning (global or
per-block scope, L2 or first-order Taylor scores) is run at the ratio
whose parameter count comes closest to that budget. Each student is
optionally fine-tuned with the ICMD loss for the same number of steps,
then scored by the FVD proxy and median forward latency.

USAGE:
$ <script.py> <teacher.vdmk> <train.vdds> <eval.vdds> <finetune_steps> <output_file>

EXAMPLE:
$ python misc/compare_pruners.py runs/desk/checkpoints/teacher.vdmk runs/desk/data/train.vdds runs/desk/data/eval.vdds 300 runs/desk/reports/pruner_comparison.json
'''

import sys
import logging

import numpy as np
from tqdm import tqdm

from src.cli import precond_from_meta
from src.diffusion import Denoiser, KarrasSchedule
from src.evalkit import FeatureExtractor, fvd, generate_videos, measure_latency, mean_motion
from src.icmd import Distiller, LossWeights, init_distill_state
from src.netgraph import count_params
from src.pruner import (ChannelPruneError, PruningPlan, apply_plan, calibration_grads, channel_prune,
                        channel_prune_model, plan_vdmini)
from src.synthdata import first_frame_condition, load
from src.unet import load_model
from utils.file_utils import pretty_write_json
from utils.log_utils import setup_logging
from utils.seed_utils import rng_for

logger = logging.getLogger(__name__)

RATIO_GRID = np.round(np.arange(0.0, 0.96, 0.05), 2)
CHANNEL_METHODS = (('global', 'l2'), ('global', 'taylor'), ('local', 'l2'), ('local', 'taylor'))


def matched_ratio(model, budget, scorer, scope, grads):
    '''Ratio on the grid whose pruned parameter count is closest to the budget.'''
    best = None
    for ratio in RATIO_GRID:
        try:
            graph, _ = channel_prune(model.graph, model.params, float(ratio), scorer, grads, scope)
        except ChannelPruneError:
            break
        gap = abs(count_params(graph).total - budget)
        if best is None or gap < best[1]:
            best = (float(ratio), gap)
    return best[0]


class PrunerComparison:
    def __init__(self, teacher_path, train_path, eval_path, steps, num_samples=32, sample_steps=8, seed=0):
        self.teacher, meta = load_model(teacher_path)
        self.precond = precond_from_meta(meta)
        self.train = load(train_path)
        self.reference = load(eval_path).videos[:num_samples]
        self.steps = steps
        self.sample_steps = sample_steps
        self.seed = seed
        self.extractor = FeatureExtractor(channels=self.teacher.graph.latent_channels)

    def finetune(self, student, plan):
        if not self.steps:
            return student
        weights = LossWeights(mca_warmup_steps=self.steps // 3)
        state = init_distill_state(self.teacher, plan, weights, self.seed, precond=self.precond, student=student)
        return Distiller(state, self.train.videos).run(self.steps).student

    def score(self, model):
        rng = rng_for(self.seed, 'compare-pruners', 'samples')
        videos = generate_videos(Denoiser(model, self.precond), KarrasSchedule(), self.sample_steps,
                                 first_frame_condition(self.reference), self.reference.shape[1], rng)
        latency = measure_latency(model, (1,) + self.reference.shape[1:], seed=self.seed)
        return {'fvd': fvd(videos, self.reference, self.extractor), 'motion': mean_motion(videos),
                'params': count_params(model.graph).total, 'latency_ms': latency.total_ms}

    def run(self):
        plan = plan_vdmini(self.teacher.graph)
        budget = count_params(plan.student_graph).total
        identity = PruningPlan.identity(self.teacher.graph)
        grads = calibration_grads(self.teacher, self.train.videos, self.precond, self.seed)
        rows = [dict(method='teacher', ratio=0.0, **self.score(self.teacher))]
        student = self.finetune(apply_plan(self.teacher, plan), plan)
        rows.append(dict(method='block', ratio=None, **self.score(student)))
        for scope, scorer in tqdm(CHANNEL_METHODS, desc='Channel pruning', unit=' method'):
            method_grads = grads if scorer == 'taylor' else None
            ratio = matched_ratio(self.teacher, budget, scorer, scope, method_grads)
            logger.info('%s/%s channel ratio %.4f matches %d params', scope, scorer, ratio, budget)
            pruned = channel_prune_model(self.teacher.trainable(), ratio, scorer, method_grads, scope)
            rows.append(dict(method='channel-%s-%s' % (scope, scorer), ratio=ratio,
                             **self.score(self.finetune(pruned, identity))))
        return {'budget_params': budget, 'finetune_steps': self.steps, 'rows': rows}


if __name__ == '__main__':
    setup_logging()
    comparison = PrunerComparison(sys.argv[1], sys.argv[2], sys.argv[3], int(sys.argv[4]))
    result = comparison.run()
    for row in result['rows']:
        print('%-24s params %9d  FVD %10.4f  latency %8.3f ms' % (row['method'], row['params'], row['fvd'],
                                                                  row['latency_ms']))
    pretty_write_json(result, sys.argv[5])
    print('Written pruner comparison to:', sys.argv[5])
