"""Counter-based random substreams.

Every (seed, replicate, purpose) triple gets its own Philox key, and each
subject owns a fixed block of counters within that key. A subject's draws
therefore do not depend on chunking, thread count or which other subjects
are simulated, and two covariate patterns simulated under the same
(seed, replicate) see identical draws.
"""

from __future__ import annotations

import numpy as np

# purpose tags
TRAJECTORY = 0
PARAMETERS = 1
TRAJECTORY_UNPAIRED = 2
PARAMETERS_UNPAIRED = 3


def stream_key(seed: int, replicate: int, tag: int) -> np.ndarray:
    if seed < 0 or replicate < 0:
        raise ValueError("seed and replicate must be non-negative")
    return np.random.SeedSequence([int(seed), int(replicate), int(tag)]).generate_state(2, np.uint64)


def subject_uniforms(seed: int, replicate: int, start: int, stop: int, width: int, tag: int = TRAJECTORY) -> np.ndarray:
    """Uniforms on [0, 1) for subjects ``start .. stop-1``, one row each."""
    w4 = -(-width // 4) * 4  # Philox yields 4 words per counter step
    counter = np.array([start * (w4 // 4), 0, 0, 0], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=stream_key(seed, replicate, tag), counter=counter))
    return gen.random((stop - start, w4))[:, :width]


def unit_exponentials(seed: int, replicate: int, start: int, stop: int, width: int, tag: int = TRAJECTORY) -> np.ndarray:
    return -np.log1p(-subject_uniforms(seed, replicate, start, stop, width, tag))


def generator(seed: int, replicate: int, tag: int) -> np.random.Generator:
    """A plain stream, e.g. for bootstrap parameter draws."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, replicate, tag)))
