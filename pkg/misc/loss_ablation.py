'''
Loss-component ladder and lambda-sensitivity grid for the ICMD fine-tune.

Ladder: pruned student without fine-tuning, task + ICD, task + MCA, and
task + ICD + MCA. Grid: (lambda_icd, lambda_mca) in (1, 1), (0.01, 1),
(0.1, 0.5), (0.1, 1). Every variant is run for each seed and scored by
the FVD proxy and the motion proxy; medians over seeds go to the table.

USAGE:
$ <script.py> <teacher.vdmk> <pruning_plan.json> <train.vdds> <eval.vdds> <steps> <output_folder> [<seeds>]

EXAMPLE:
$ python misc/loss_ablation.py runs/desk/checkpoints/teacher.vdmk runs/desk/reports/pruning_plan.json runs/desk/data/train.vdds runs/desk/data/eval.vdds 600 runs/desk/ablation/ 0,1,2
'''

import os, sys
import logging
import statistics
from collections import OrderedDict

from tqdm import tqdm

from src.cli import precond_from_meta
from src.diffusion import Denoiser, KarrasSchedule
from src.evalkit import FeatureExtractor, fvd, generate_videos, mean_motion
from src.icmd import Distiller, LossWeights, init_distill_state
from src.pruner import PruningPlan, apply_plan
from src.synthdata import first_frame_condition, load
from src.unet import load_model
from utils.file_utils import pretty_write_json, read_json, write_csv
from utils.log_utils import setup_logging
from utils.seed_utils import derive_seed, rng_for

logger = logging.getLogger(__name__)

LADDER = OrderedDict([
    ('no_finetune', None),
    ('icd_only', LossWeights(lambda_icd=0.1, lambda_mca=0.0)),
    ('mca_only', LossWeights(lambda_icd=0.0, lambda_mca=1.0)),
    ('icd_mca', LossWeights(lambda_icd=0.1, lambda_mca=1.0)),
])
LAMBDA_GRID = ((1.0, 1.0), (0.01, 1.0), (0.1, 0.5), (0.1, 1.0))


class LossAblation:
    def __init__(self, teacher_path, plan_path, train_path, eval_path, steps, num_samples=32, sample_steps=8):
        self.teacher, meta = load_model(teacher_path)
        self.precond = precond_from_meta(meta)
        self.plan = PruningPlan.from_dict(read_json(plan_path))
        self.train = load(train_path)
        self.reference = load(eval_path).videos[:num_samples]
        self.conditions = first_frame_condition(self.reference)
        self.steps = steps
        self.sample_steps = sample_steps
        self.extractor = FeatureExtractor(channels=self.teacher.graph.latent_channels)
        self.schedule = KarrasSchedule()
        self.results = []

    def variants(self):
        for name, weights in LADDER.items():
            yield 'ladder', name, weights
        for lambda_icd, lambda_mca in LAMBDA_GRID:
            # Warm-up scaled to the run length so MCA is active for the last two thirds
            yield 'grid', 'icd=%g,mca=%g' % (lambda_icd, lambda_mca), \
                LossWeights(lambda_icd, lambda_mca, mca_warmup_steps=self.steps // 3)

    def score(self, student, seed):
        rng = rng_for(seed, 'loss-ablation', 'samples')
        videos = generate_videos(Denoiser(student, self.precond), self.schedule, self.sample_steps,
                                 self.conditions, self.reference.shape[1], rng)
        return fvd(videos, self.reference, self.extractor), mean_motion(videos)

    def run_variant(self, weights, seed):
        if weights is None:
            return apply_plan(self.teacher, self.plan, trainable=False)
        if weights.mca_warmup_steps > self.steps:
            weights = LossWeights(weights.lambda_icd, weights.lambda_mca, self.steps // 3)
        state = init_distill_state(self.teacher, self.plan, weights, derive_seed(seed, 'distill'),
                                   precond=self.precond)
        return Distiller(state, self.train.videos).run(self.steps).student

    def run(self, seeds, groups=('ladder', 'grid')):
        jobs = [(group, name, weights, seed) for group, name, weights in self.variants() if group in groups
                for seed in seeds]
        for group, name, weights, seed in tqdm(jobs, desc='Loss ablation', unit=' run'):
            score, motion = self.score(self.run_variant(weights, seed), seed)
            logger.debug('%s seed %d: FVD %.6g, motion %.6g', name, seed, score, motion)
            self.results.append({'group': group, 'variant': name, 'seed': seed, 'fvd': score, 'motion': motion})
        return self.summary()

    def summary(self):
        table = OrderedDict()
        for r in self.results:
            table.setdefault((r['group'], r['variant']), []).append(r)
        rows = []
        for (group, name), runs in table.items():
            rows.append({'group': group, 'variant': name, 'seeds': len(runs),
                         'fvd_median': statistics.median(r['fvd'] for r in runs),
                         'motion_median': statistics.median(r['motion'] for r in runs)})
        return rows

    def save(self, output_folder):
        rows = self.summary()
        pretty_write_json({'runs': self.results, 'summary': rows}, os.path.join(output_folder, 'loss_ablation.json'))
        write_csv(os.path.join(output_folder, 'loss_ablation.csv'),
                  ['group', 'variant', 'seeds', 'fvd_median', 'motion_median'],
                  [[r['group'], r['variant'], r['seeds'], float(r['fvd_median']), float(r['motion_median'])]
                   for r in rows], '')
        return


if __name__ == '__main__':
    setup_logging()
    seeds = [int(s) for s in sys.argv[7].split(',')] if len(sys.argv) > 7 else [0, 1, 2]
    ablation = LossAblation(sys.argv[1], sys.argv[2], sys.argv[3], sys.argv[4], int(sys.argv[5]))
    for row in ablation.run(seeds):
        print('%-6s %-22s FVD %10.4f  motion %.4f' % (row['group'], row['variant'], row['fvd_median'],
                                                    row['motion_median']))
    ablation.save(sys.argv[6])
    print('Written loss ablation to:', sys.argv[6])
