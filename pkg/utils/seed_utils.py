'''
Seed derivation.

A single master seed fans out to per-stage and per-item seeds:
derive_seed(master, *tags) = first 8 bytes (big-endian) of
SHA-256("master:tag1:tag2:..."). Stages can then be re-run on their own
and still draw the same numbers.
'''

import hashlib

import numpy as np

# Fixed tags for the pipeline stages
STAGE_TAGS = {
    'gen-data': 'gen-data',
    'train-teacher': 'train-teacher',
    'profile': 'profile',
    'distill': 'distill',
    'eval': 'eval',
}


def derive_seed(master, *tags):
    key = ':'.join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big')


def rng_for(master, *tags):
    return np.random.default_rng(derive_seed(master, *tags))
