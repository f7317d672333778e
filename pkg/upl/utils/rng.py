"""
Named random streams derived from one root seed.

Each stream name is hashed into the spawn key of a ``numpy.random.SeedSequence``
so that toggling one component (for example spatial transforms) leaves the
draws of every other stream unchanged.
"""
import zlib

import numpy as np

STREAMS = ('data', 'dropout', 'transforms', 'init', 'cases', 'noise')


def stream(root_seed, name, *extra):
    key = (zlib.crc32(name.encode('utf-8')),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=key))


class SeedStreams:
    def __init__(self, root_seed):
        self.root_seed = int(root_seed)

    def __getitem__(self, name):
        return stream(self.root_seed, name)

    def child(self, name, *extra):
        return stream(self.root_seed, name, *extra)

    def describe(self):
        return {'root_seed': self.root_seed, 'streams': list(STREAMS)}
