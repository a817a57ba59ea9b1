import os
import logging
import traceback
from dataclasses import dataclass, field
from functools import wraps
from multiprocessing import get_context

import numpy as np
from tqdm import tqdm

logger = logging.getLogger(__name__)

WORKERS_ENV = "HOMOGENIZATION_WORKERS"


def raise_immediately(func):
    """Log a worker's traceback before the exception crosses the pool boundary."""
    @wraps(func)
    def ret_func(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception:
            logger.error(traceback.format_exc())
            raise
    return ret_func


def derive_seed_sequence(seed, *keys):
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


@dataclass(frozen=True)
class RngStream:
    """One reproducible random stream, addressed by (seed, stream id path).

    Identical (seed, stream_id) pairs give identical draws; distinct stream ids
    are independent through numpy's SeedSequence spawning.
    """
    seed: int
    stream_id: tuple = field(default=())

    def __post_init__(self):
        sid = self.stream_id
        if isinstance(sid, (int, np.integer)):
            sid = (int(sid),)
        object.__setattr__(self, "stream_id", tuple(int(k) for k in sid))
        if any(k < 0 for k in self.stream_id):
            raise ValueError("stream ids must be non-negative integers")

    def spawn(self, *keys):
        return RngStream(self.seed, self.stream_id + tuple(int(k) for k in keys))

    def generator(self):
        return np.random.Generator(np.random.PCG64(derive_seed_sequence(self.seed, *self.stream_id)))

    def buffer(self, block=4096):
        return DrawBuffer(self.generator(), block)


class DrawBuffer:
    """Block-wise uniform and exponential draws from a single Generator.

    Refills are done in fixed-size blocks so the sequence of values handed out
    depends only on the generator state, never on how draws interleave.
    """

    def __init__(self, generator, block=4096):
        self.generator = generator
        self.block = int(block)
        self._uniform = []
        self._exponential = []

    def uniform(self):
        if not self._uniform:
            self._uniform = self.generator.random(self.block).tolist()
            self._uniform.reverse()
        return self._uniform.pop()

    def exponential(self):
        if not self._exponential:
            self._exponential = self.generator.standard_exponential(self.block).tolist()
            self._exponential.reverse()
        return self._exponential.pop()


def resolve_workers(configured):
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            workers = int(env)
        except ValueError:
            raise ValueError("{} must be an integer, got {!r}".format(WORKERS_ENV, env))
        logger.info("Worker count overridden by %s = %d", WORKERS_ENV, workers)
        return max(1, workers)
    return max(1, int(configured or 1))


def run_replicas(func, tasks, workers=1, desc="replicas"):
    """Apply ``func`` to every task, in a spawn pool when ``workers > 1``.

    Results come back in task order regardless of completion order.
    """
    tasks = list(tasks)
    workers = resolve_workers(workers)
    if workers <= 1 or len(tasks) <= 1:
        return [func(task) for task in tqdm(tasks, desc=desc)]
    pool = get_context("spawn").Pool(min(workers, len(tasks)))
    try:
        handles = [pool.apply_async(func, args=(task,)) for task in tasks]
        results = [handle.get() for handle in tqdm(handles, desc=desc)]
    finally:
        pool.close()
        pool.join()
    return results


def largest_remainder(weights, total):
    """Integer vector summing to ``total`` closest to ``total * weights``."""
    weights = np.asarray(weights, dtype=float)
    if total < 0:
        raise ValueError("total must be non-negative")
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base
