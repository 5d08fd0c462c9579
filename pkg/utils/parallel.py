"""
Parallel map for independent replicates, capped by MOLMAP_THREADS.
"""
from typing import Callable, Iterable, List, Optional, TypeVar

from joblib import Parallel, delayed

from utils.config import settings
from utils.logger import logger

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Iterable[T],
                 n_jobs: Optional[int] = None) -> List[R]:
    """
    Apply func to every item, in input order.

    Results never depend on the worker count: every task must derive its
    randomness from its own arguments.

    Args:
        func: Picklable function of one argument
        items: Task arguments
        n_jobs: Worker count; defaults to MOLMAP_THREADS

    Returns:
        List of results in the order of items
    """
    items = list(items)
    jobs = min(n_jobs or settings.THREADS, max(len(items), 1))
    if jobs == 1:
        return [func(item) for item in items]
    logger.debug(f"Running {len(items)} tasks on {jobs} workers")
    return Parallel(n_jobs=jobs)(delayed(func)(item) for item in items)
