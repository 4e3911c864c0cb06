from __future__ import annotations

import asyncio
import logging
import time
from typing import Iterable, Optional

from .pathscheme import PathBatch, Simulator
from .randstream import RandomStream, chunked

logger = logging.getLogger(__name__)


class Worker:
    """Pulls batch numbers off a shared queue and simulates them off the event loop."""

    def __init__(
        self,
        name: str,
        simulator: Simulator,
        batches: list[RandomStream],
        results: list[Optional[PathBatch]],
        record_steps: Optional[list[int]] = None,
        track_log_integral: bool = False,
        track_factors: bool = False,
    ):
        self.name = name
        self.simulator = simulator
        self.batches = batches
        self.results = results
        self.record_steps = record_steps
        self.track_log_integral = track_log_integral
        self.track_factors = track_factors
        self.done = 0

    def _simulate(self, index: int) -> PathBatch:
        stream = self.batches[index]
        uniforms = stream.next_block(stream.remaining)
        return self.simulator.run(
            uniforms,
            record_steps=self.record_steps,
            track_log_integral=self.track_log_integral,
            track_factors=self.track_factors,
        )

    async def process_one(self, queue: asyncio.Queue) -> bool:
        try:
            index = queue.get_nowait()
        except asyncio.QueueEmpty:
            return False
        try:
            # results are slotted by batch number, so completion order does not matter
            self.results[index] = await asyncio.to_thread(self._simulate, index)
            self.done += 1
        finally:
            queue.task_done()
        return True

    async def run(self, queue: asyncio.Queue) -> None:
        while await self.process_one(queue):
            pass
        logger.debug("%s finished %d batches", self.name, self.done)


async def simulate_stream(
    simulator: Simulator,
    stream: RandomStream,
    batch_size: int = 2048,
    threads: int = 1,
    record_steps: Optional[Iterable[int]] = None,
    track_log_integral: bool = False,
    track_factors: bool = False,
) -> PathBatch:
    """Simulate every remaining point of `stream`, one path per point.

    The stream is cut into fixed-size batches independent of `threads` and
    the pieces are reassembled in index order, so the result does not depend
    on the number of workers.
    """
    batches = chunked(stream, batch_size)
    results: list[Optional[PathBatch]] = [None] * len(batches)
    queue: asyncio.Queue[int] = asyncio.Queue()
    for i in range(len(batches)):
        queue.put_nowait(i)

    rec = None if record_steps is None else list(record_steps)
    workers = [
        Worker(
            f"worker-{i}",
            simulator,
            batches,
            results,
            record_steps=rec,
            track_log_integral=track_log_integral,
            track_factors=track_factors,
        )
        for i in range(max(1, min(threads, len(batches))))
    ]
    start = time.perf_counter()
    await asyncio.gather(*(w.run(queue) for w in workers))
    logger.info(
        "Simulated %d paths (%s, M=%d) in %d batches on %d workers, %.2fs",
        len(stream),
        simulator.scheme,
        simulator.steps,
        len(batches),
        len(workers),
        time.perf_counter() - start,
    )
    stream.cursor = stream.stop
    return PathBatch.concat([r for r in results if r is not None])


def run_paths(
    simulator: Simulator,
    stream: RandomStream,
    batch_size: int = 2048,
    threads: int = 1,
    **kwargs,
) -> PathBatch:
    """Blocking wrapper around simulate_stream."""
    return asyncio.run(simulate_stream(simulator, stream, batch_size, threads, **kwargs))
