"""
Worker pool for per-client computation within a round
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

from .config import RuntimeConfig
from .exceptions import ContractViolationError

logger = logging.getLogger(__name__)

R = TypeVar("R")


class WorkerPool:
    """
    Runs one function per client and returns results in ascending client order.

    With a single thread the work runs inline in the caller. Clients never share
    mutable state, so results do not depend on the thread count.
    """

    def __init__(self, threads: Optional[int] = None):
        self.threads = threads if threads is not None else RuntimeConfig().threads
        if self.threads < 1:
            raise ContractViolationError("a worker pool needs at least one thread")
        self._executor: Optional[ThreadPoolExecutor] = None
        if self.threads > 1:
            self._executor = ThreadPoolExecutor(max_workers=self.threads, thread_name_prefix="tcs-client")
            logger.debug(f"Started worker pool with {self.threads} threads")
        self._is_closed = False

    def map_clients(self, fn: Callable[[int], R], client_ids: Sequence[int]) -> List[R]:
        """Apply ``fn`` to every client id; the first worker exception is re-raised"""
        if self._is_closed:
            raise ContractViolationError("worker pool is closed")
        ordered = sorted(client_ids)
        if self._executor is None or len(ordered) < 2:
            return [fn(c) for c in ordered]
        return list(self._executor.map(fn, ordered))

    def close(self) -> None:
        if self._is_closed:
            return
        self._is_closed = True
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            logger.debug("Worker pool closed")

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def __del__(self):
        if not getattr(self, "_is_closed", True) and self._executor is not None:
            logger.warning("Worker pool was not properly closed")
            self._executor.shutdown(wait=False)
