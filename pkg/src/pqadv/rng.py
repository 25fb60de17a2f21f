"""Named, order-independent random streams derived from one integer seed."""

import zlib

import numpy as np


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream(seed, name, *keys):
    """Return a Generator for ``(seed, name, *keys)``.

    Streams with different names or keys are statistically independent, and the
    same arguments always yield the same sequence regardless of how many other
    streams were drawn first.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_key(name), *map(int, keys)))
    return np.random.Generator(np.random.PCG64(ss))
