import numpy as np
import pytest

from src.netgraph import origin_graph, tiny_graph
from src.synthdata import SceneTemplate, gen_dataset
from src.unet import build

# 4 frames of 8x8, small enough for per-op gradient checks on full models
SMALL_TEMPLATE = SceneTemplate(height=8, width=8, frames=4, size_range=(2, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny():
    return tiny_graph()


@pytest.fixture
def toy():
    return origin_graph(16)


@pytest.fixture
def tiny_model(tiny):
    return build(tiny, init_seed=0)


@pytest.fixture
def small_toy_model():
    # Origin layout at base width 4: every stage present, cheap to run
    return build(origin_graph(4), init_seed=0)


@pytest.fixture(scope='session')
def small_videos():
    return gen_dataset(SMALL_TEMPLATE, 12, seed=3, split='train', workers=2).videos


@pytest.fixture
def run_config(tmp_path):
    return {
        'seed': 7,
        'data': {'frames': 4, 'height': 8, 'width': 8, 'n_train': 8, 'n_eval': 6, 'size_range': [2, 4]},
        'graph': {'preset': 'origin', 'base_width': 4},
        'teacher': {'steps': 2, 'batch_size': 2, 'checkpoint_every': 0},
        'profile': {'blocks': ['D.0.R.1.RB-S', 'U.3.A.1.AB-T'], 'num_samples': 4, 'sample_steps': 1,
                    'workers': 2, 'noise_subsets': 2},
        'distill': {'steps': 2, 'batch_size': 2, 'mca_warmup_steps': 1, 'disc_width': 4, 'checkpoint_every': 0},
        'eval': {'num_samples': 4, 'sample_steps': 1, 'latency_reps': 3, 'latency_warmup': 0},
        'extractor': {'width': 4, 'dim': 8},
    }
