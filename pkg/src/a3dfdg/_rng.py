import zlib

import numpy as np


def _as_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(*key) -> np.random.Generator:
    """Counter-based generator (Philox) addressed by a tuple of ints/strings.

    Every random stream in the package is derived this way, so a stream for
    e.g. ``(seed, "crop", round, client)`` is reproducible without replaying
    the streams that precede it.
    """
    seq = np.random.SeedSequence([_as_int(p) for p in key])
    return np.random.Generator(np.random.Philox(seq))
