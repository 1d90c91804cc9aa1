"""Deterministic worker pools for organism training and batch runs.

Workers receive the dataset through fork-inherited module state, so only
the (small) organisms travel through pickling.  Every task carries its own
seed material derived from (master seed, generation, offspring index),
which makes results identical whatever the worker count or scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

__all__ = ["train_population", "run_tasks", "limit_blas_threads"]

_FORK_STATE: dict = {}


def limit_blas_threads(n: int = 1) -> None:
    """Clamp BLAS thread pools; worker parallelism replaces them."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass


def _train_and_score(organism, seeds, splits, settings):
    rng = np.random.default_rng(seeds)
    report = organism.train(splits["train"], settings.train, rng)
    decisions = organism.decide_instances(splits["val"])
    return organism, report, decisions


def _population_worker(task):
    index, organism, seeds = task
    splits = _FORK_STATE["splits"]
    settings = _FORK_STATE["settings"]
    return index, _train_and_score(organism, seeds, splits, settings)


def _pool_init():
    limit_blas_threads(1)


def train_population(tasks, splits, settings):
    """Train offspring; returns (organism, report, decisions) in task order.

    ``tasks`` is a list of (organism, seed_list).  With ``workers`` at
    zero or a single task, everything runs in-process.
    """
    if settings.workers <= 0 or len(tasks) <= 1:
        return [_train_and_score(o, s, splits, settings) for o, s in tasks]
    _FORK_STATE["splits"] = splits
    _FORK_STATE["settings"] = settings
    try:
        import multiprocessing

        context = multiprocessing.get_context("fork")
        indexed = [(i, o, s) for i, (o, s) in enumerate(tasks)]
        results: list = [None] * len(tasks)
        with ProcessPoolExecutor(
            max_workers=settings.workers, mp_context=context, initializer=_pool_init
        ) as pool:
            for index, payload in pool.map(_population_worker, indexed):
                results[index] = payload
        return results
    finally:
        _FORK_STATE.clear()


def _task_worker(packed):
    index, func, args = packed
    return index, func(*args)


def run_tasks(func, argument_lists, workers: int):
    """Order-preserving parallel map of ``func`` over argument tuples."""
    if workers <= 0 or len(argument_lists) <= 1:
        return [func(*args) for args in argument_lists]
    import multiprocessing

    context = multiprocessing.get_context("fork")
    packed = [(i, func, args) for i, args in enumerate(argument_lists)]
    results: list = [None] * len(packed)
    with ProcessPoolExecutor(
        max_workers=workers, mp_context=context, initializer=_pool_init
    ) as pool:
        for index, value in pool.map(_task_worker, packed):
            results[index] = value
    return results
