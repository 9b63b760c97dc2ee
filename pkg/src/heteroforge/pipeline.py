"""Asynchronous staged mini-batch generation.

One control thread owns all bookkeeping and reacts to completion events; a
priority worker pool runs CPU jobs (later stages first); a single device
thread runs the device-staging stage.  Batches are delivered to the training
thread strictly in seq_no order.

Capacity groups bound how many mini-batches are inside each group at once.  A
batch keeps its slot until it is admitted to the next group (the device slot
until the trainer takes the batch), so buffers in flight stay bounded.
Admission into the CPU and device groups follows seq_no order.
"""
from __future__ import annotations

import csv
import heapq
import itertools
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ConfigurationError, PipelineError, StateError
from .sampler import (
    CompactMiniBatch,
    SampledBlock,
    SampledEdges,
    TargetBatch,
    compact,
    compute_frontier_bundled,
    hop_fanout,
    reorder_features,
    stitch,
)

log = logging.getLogger(__name__)


class Stage(IntEnum):
    SCHEDULE = 0
    NEIGHBOR_SAMPLE = 1
    CPU_FEATURE_COPY = 2
    DEVICE_FEATURE_COPY = 3
    COMPACT = 4
    TRAIN = 5
    UPDATE = 6


@dataclass(frozen=True)
class CapacityConfig:
    sample: int = 25  # schedule + neighbor sampling
    cpu: int = 5
    device: int = 1

    def __post_init__(self):
        if min(self.sample, self.cpu, self.device) < 1:
            raise ConfigurationError(f"stage capacities must be >= 1, got {self.as_tuple()}")

    def as_tuple(self):
        return (self.sample, self.cpu, self.device)

    @classmethod
    def parse(cls, text: str) -> "CapacityConfig":
        try:
            vals = [int(x) for x in str(text).split(",")]
        except ValueError:
            raise ConfigurationError(f"capacities must look like 25,5,1; got {text!r}") from None
        if len(vals) != 3:
            raise ConfigurationError(f"capacities need 3 values, got {text!r}")
        return cls(*vals)


SERIAL = CapacityConfig(1, 1, 1)


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1) - 2)


class PriorityWorkerPool:
    """Worker threads serving the highest stage first, FIFO by seq_no within a stage."""

    def __init__(self, workers: int | None = None, trace: bool = False):
        self.workers = workers or default_workers()
        self._heap: list = []
        self._cv = threading.Condition()
        self._count = itertools.count()
        self._closed = False
        self.trace: list | None = [] if trace else None
        self._threads = [threading.Thread(target=self._loop, name=f"pool-{i}", daemon=True) for i in range(self.workers)]
        for t in self._threads:
            t.start()

    def submit(self, stage: int, seq_no: int, fn, *args) -> None:
        with self._cv:
            if self._closed:
                raise StateError("worker pool is shut down")
            heapq.heappush(self._heap, (-int(stage), seq_no, next(self._count), fn, args))
            self._cv.notify()

    def pending(self) -> int:
        with self._cv:
            return len(self._heap)

    def _loop(self):
        while True:
            with self._cv:
                while not self._heap and not self._closed:
                    self._cv.wait()
                if self._closed:
                    return
                neg_stage, seq, _, fn, args = heapq.heappop(self._heap)
                if self.trace is not None:
                    waiting = max((-h[0] for h in self._heap), default=None)
                    self.trace.append((-neg_stage, seq, waiting))
            try:
                fn(*args)
            except Exception:  # jobs report their own failures; this guards the worker
                log.exception("worker job crashed")

    def shutdown(self, wait: bool = True):
        with self._cv:
            self._closed = True
            self._heap.clear()
            self._cv.notify_all()
        if wait:
            for t in self._threads:
                t.join(timeout=5)


# -- stage logic shared with the serial reference executor ------------------------------


def stage_device(blocks, target: TargetBatch, staging: np.ndarray, edge_type_offsets, label_fn=None,
                 latency: float = 0.0) -> CompactMiniBatch:
    """Device copy plus compaction; `latency` emulates the transfer."""
    if latency > 0:
        time.sleep(latency)
    device_rows = staging.copy()
    mb = compact(blocks, target.seeds, edge_type_offsets, target.seq_no)
    mb.features = reorder_features(mb, device_rows)
    _attach_targets(mb, target, label_fn)
    return mb


def _attach_targets(mb: CompactMiniBatch, target: TargetBatch, label_fn):
    mb.epoch, mb.step = target.epoch, target.step
    if target.kind == "vertex":
        if label_fn is not None:
            mb.labels = np.asarray(label_fn(target.seeds), dtype=np.int64)
    else:
        order = np.argsort(mb.local2global[: len(target.seeds)])
        sorted_seeds = mb.local2global[: len(target.seeds)][order]

        def loc(pairs):
            return order[np.searchsorted(sorted_seeds, pairs)]

        mb.pos_pairs = loc(target.pos_pairs)
        mb.neg_pairs = loc(target.neg_pairs)


class SerialExecutor:
    """Reference: every stage run to completion in the calling thread, one batch at a time."""

    def __init__(self, targets, sampler, kvstore, edge_type_offsets, transform=None, label_fn=None,
                 device_latency: float = 0.0):
        self.targets = iter(targets)
        self.sampler = sampler
        self.kvstore = kvstore
        self.eto = edge_type_offsets
        self.transform = transform
        self.label_fn = label_fn
        self.device_latency = device_latency

    def produce(self, target: TargetBatch) -> CompactMiniBatch:
        if self.transform is not None:
            target = self.transform(target)
        blocks = self.sampler.sample_blocks(target.seeds, target.key)
        input_nodes = np.unique(np.concatenate([blocks[-1].edges.src, blocks[-1].dst_nodes]))
        staging = self.kvstore.pull_vertices(input_nodes)
        return stage_device(blocks, target, staging, self.eto, self.label_fn, self.device_latency)

    def next_minibatch(self, timeout=None):
        try:
            target = next(self.targets)
        except StopIteration:
            return None
        try:
            return self.produce(target)
        except Exception as exc:
            raise PipelineError(target.seq_no, exc) from exc


# -- asynchronous pipeline ------------------------------------------------------------------


@dataclass(eq=False)
class _Flight:
    seq: int
    target: TargetBatch
    hop: int = 0
    cur: np.ndarray | None = None
    blocks: list = field(default_factory=list)
    subsets: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    waiting: int = 0
    input_nodes: np.ndarray | None = None
    staging: np.ndarray | None = None
    group: int = 0  # 0 sample, 1 cpu, 2 device, -1 none
    failed: bool = False


@dataclass
class PipelineConfig:
    capacities: CapacityConfig = field(default_factory=CapacityConfig)
    workers: int | None = None
    device_latency: float = 0.0
    bundle_frontiers: bool = True
    check_capacity: bool = True
    metrics_path: str | None = None


class Pipeline:
    """Produces compacted, feature-filled mini-batches ahead of the training thread."""

    def __init__(self, targets, sampler, kvstore, edge_type_offsets, config: PipelineConfig | None = None,
                 transform=None, label_fn=None, trace: bool = False):
        self.config = config or PipelineConfig()
        self.caps = self.config.capacities
        self._targets = iter(targets)
        self.sampler = sampler
        self.kvstore = kvstore
        self.eto = np.asarray(edge_type_offsets)
        self.transform = transform
        self.label_fn = label_fn
        self.num_hops = len(sampler.fanouts)
        self.trace = trace

        self._events: queue.SimpleQueue = queue.SimpleQueue()
        self._started = False
        self._stopping = False
        self._exhausted = False
        self._control = None
        self._pool = None
        self._device = None
        self._device_q: queue.SimpleQueue = queue.SimpleQueue()

        self._inflight = [0, 0, 0]
        self._sampled: dict[int, _Flight] = {}
        self._cpu_done: dict[int, _Flight] = {}
        self._await_frontier: list[_Flight] = []
        self._failed: set[int] = set()
        self._next_cpu = None
        self._next_device = None
        self._highest_seq = None

        self._out_cv = threading.Condition()
        self._ready: dict[int, object] = {}
        self._next_deliver = None
        self._last_seq = None  # set once the target stream is exhausted

        self.metrics: dict = {}
        self.occupancy: list = []
        self.max_occupancy = [0, 0, 0]
        self.epoch_of: dict[int, int] = {}
        self.delivered = 0

    # -- public API ------------------------------------------------------------------

    def start(self) -> "Pipeline":
        if self._started:
            raise StateError("pipeline already started")
        self._started = True
        self._pool = PriorityWorkerPool(self.config.workers, trace=self.trace)
        self._device = threading.Thread(target=self._device_loop, name="device-stage", daemon=True)
        self._device.start()
        self._control = threading.Thread(target=self._control_loop, name="sampling-control", daemon=True)
        self._control.start()
        return self

    def next_minibatch(self, timeout: float | None = None) -> CompactMiniBatch | None:
        """Next batch in seq_no order; None once the target stream is exhausted."""
        if not self._started:
            raise StateError("pipeline not started")
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._out_cv:
            while True:
                if self._next_deliver is not None and self._next_deliver in self._ready:
                    seq = self._next_deliver
                    item = self._ready.pop(seq)
                    self._next_deliver += 1
                    break
                if self._last_seq is not None and (self._next_deliver is None or self._next_deliver > self._last_seq):
                    return None
                if self._stopping:
                    raise StateError("pipeline stopped")
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TimeoutError("no mini-batch within timeout")
                self._out_cv.wait(left)
        if isinstance(item, PipelineError):
            raise item
        self._post(self._release_device, seq)
        self.delivered += 1
        return item

    def __iter__(self):
        while True:
            mb = self.next_minibatch()
            if mb is None:
                return
            yield mb

    def stop(self) -> None:
        if not self._started or self._stopping:
            self._stopping = True
            return
        self._stopping = True
        self._events.put(None)
        self._device_q.put(None)
        self._control.join(timeout=10)
        self._device.join(timeout=10)
        self._pool.shutdown()
        with self._out_cv:
            self._out_cv.notify_all()
        if self.config.metrics_path:
            self.write_metrics(self.config.metrics_path)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    @property
    def pool_trace(self):
        return self._pool.trace if self._pool else None

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seq_no", "stage", "enqueue", "start", "end", "bytes"])
            for (seq, stage), m in sorted(self.metrics.items()):
                w.writerow([seq, Stage(stage).name, *(f"{x:.6f}" if x is not None else "" for x in m[:3]), m[3]])

    # -- control thread ------------------------------------------------------------------

    def _post(self, fn, *args):
        self._events.put((fn, args))

    def _control_loop(self):
        try:
            while not self._stopping:
                self._pump()
                ev = self._events.get()
                while ev is not None:
                    fn, args = ev
                    fn(*args)
                    try:
                        ev = self._events.get_nowait()
                    except queue.Empty:
                        break
                if ev is None and self._stopping:
                    break
        except Exception as exc:  # a bookkeeping bug; fail everything outstanding loudly
            log.exception("pipeline control thread crashed")
            with self._out_cv:
                self._stopping = True
                self._crash = exc
                self._out_cv.notify_all()

    def _mark(self, seq, stage, which, nbytes=None):
        m = self.metrics.setdefault((seq, int(stage)), [None, None, None, 0])
        m[which] = time.perf_counter()
        if nbytes is not None:
            m[3] += int(nbytes)

    def _occupy(self, group, delta):
        self._inflight[group] += delta
        cap = self.caps.as_tuple()[group]
        if self.config.check_capacity and self._inflight[group] > cap:
            raise AssertionError(f"capacity exceeded in group {group}: {self._inflight[group]} > {cap}")
        self.max_occupancy[group] = max(self.max_occupancy[group], self._inflight[group])
        if self.trace:
            self.occupancy.append((time.perf_counter(), *self._inflight))

    def _pump(self):
        # schedule admissions
        while not self._exhausted and not self._stopping and self._inflight[0] < self.caps.sample:
            try:
                target = next(self._targets)
            except StopIteration:
                self._exhausted = True
                with self._out_cv:
                    if self._highest_seq is None:
                        self._next_deliver, self._last_seq = 0, -1
                    else:
                        self._last_seq = self._highest_seq
                    self._out_cv.notify_all()
                break
            self._admit_target(target)
        if self._await_frontier:
            self._submit_frontiers()
        # CPU feature copy admissions, in seq order
        while self._inflight[1] < self.caps.cpu and self._next_cpu is not None:
            self._skip_failed("_next_cpu")
            f = self._sampled.pop(self._next_cpu, None)
            if f is None:
                break
            self._next_cpu += 1
            self._occupy(0, -1)
            self._occupy(1, +1)
            f.group = 1
            self._mark(f.seq, Stage.CPU_FEATURE_COPY, 0)
            self._pool.submit(Stage.CPU_FEATURE_COPY, f.seq, self._job_cpu, f)
        # device admissions, in seq order
        while self._inflight[2] < self.caps.device and self._next_device is not None:
            self._skip_failed("_next_device")
            f = self._cpu_done.pop(self._next_device, None)
            if f is None:
                break
            self._next_device += 1
            self._occupy(1, -1)
            self._occupy(2, +1)
            f.group = 2
            self._mark(f.seq, Stage.DEVICE_FEATURE_COPY, 0)
            self._device_q.put(f)

    def _skip_failed(self, attr):
        while getattr(self, attr) in self._failed:
            setattr(self, attr, getattr(self, attr) + 1)

    def _admit_target(self, target: TargetBatch):
        seq = target.seq_no
        if self._next_cpu is None:
            self._next_cpu = self._next_device = seq
            with self._out_cv:
                self._next_deliver = seq
        elif seq != self._highest_seq + 1:
            raise ConfigurationError(f"target seq_no {seq} does not follow {self._highest_seq}")
        self._highest_seq = seq
        self.epoch_of[seq] = target.epoch
        f = _Flight(seq, target)
        self._occupy(0, +1)
        self._mark(seq, Stage.SCHEDULE, 0)
        self._pool.submit(Stage.SCHEDULE, seq, self._job_schedule, f)

    def _fail(self, f: _Flight, exc):
        if f.failed:
            return
        f.failed = True
        log.warning("mini-batch %d failed: %r", f.seq, exc)
        if f.group >= 0:
            self._occupy(f.group, -1)
            f.group = -1
        self._failed.add(f.seq)
        self._sampled.pop(f.seq, None)
        self._cpu_done.pop(f.seq, None)
        if f in self._await_frontier:
            self._await_frontier.remove(f)
        self._deliver(f.seq, PipelineError(f.seq, exc))

    def _deliver(self, seq, item):
        with self._out_cv:
            self._ready[seq] = item
            self._out_cv.notify_all()

    def _release_device(self, seq):
        self._occupy(2, -1)

    # -- stage jobs (worker threads) and their completion events (control thread) -----

    def _job_schedule(self, f: _Flight):
        self._mark(f.seq, Stage.SCHEDULE, 1)
        try:
            target = self.transform(f.target) if self.transform is not None else f.target
        except Exception as exc:  # noqa: BLE001
            self._post(self._fail, f, exc)
            return
        self._mark(f.seq, Stage.SCHEDULE, 2)
        self._post(self._scheduled, f, target)

    def _scheduled(self, f: _Flight, target):
        if f.failed:
            return
        f.target = target
        f.cur = np.asarray(target.seeds, dtype=np.int64)
        self._mark(f.seq, Stage.NEIGHBOR_SAMPLE, 0)
        self._mark(f.seq, Stage.NEIGHBOR_SAMPLE, 1)
        self._start_hop(f)

    def _start_hop(self, f: _Flight):
        sampler = self.sampler
        try:
            f.subsets = sampler.split(f.cur)
            f.results = {}
            futs = sampler.issue_remote(f.subsets, f.hop, f.target.key)
        except Exception as exc:  # noqa: BLE001
            self._fail(f, exc)
            return
        local = f.subsets.get(sampler.machine)
        f.waiting = len(futs) + (1 if local is not None and len(local) else 0)
        hop = f.hop
        for p, fut in futs.items():
            fut.add_done_callback(lambda fu, p=p: self._post(self._hop_part, f, hop, p, fu, None))
        if f.waiting == 0:
            self._await_frontier.append(f)
        elif local is not None and len(local):
            self._pool.submit(Stage.NEIGHBOR_SAMPLE, f.seq, self._job_local_sample, f, hop, local)

    def _job_local_sample(self, f: _Flight, hop, seeds):
        try:
            edges = self.sampler.sample_local(seeds, hop, hop_fanout(self.sampler.fanouts, hop), f.target.key)
        except Exception as exc:  # noqa: BLE001
            self._post(self._fail, f, exc)
            return
        self._post(self._hop_part, f, hop, self.sampler.machine, None, edges)

    def _hop_part(self, f: _Flight, hop, part, fut, edges):
        if f.failed or hop != f.hop:
            return
        if fut is not None:
            try:
                edges = SampledEdges.from_response(fut.result())
            except Exception as exc:  # noqa: BLE001
                self._fail(f, exc)
                return
        f.results[part] = edges
        f.waiting -= 1
        if f.waiting == 0:
            self._await_frontier.append(f)

    def _submit_frontiers(self):
        flights, self._await_frontier = self._await_frontier, []
        if self.config.bundle_frontiers:
            self._pool.submit(Stage.NEIGHBOR_SAMPLE, flights[0].seq, self._job_frontiers, flights)
        else:
            for f in flights:
                self._pool.submit(Stage.NEIGHBOR_SAMPLE, f.seq, self._job_frontiers, [f])

    def _job_frontiers(self, flights):
        ok, stitched = [], []
        for f in flights:
            try:
                stitched.append(stitch(f.cur, f.subsets, f.results))
                ok.append(f)
            except Exception as exc:  # noqa: BLE001
                self._post(self._fail, f, exc)
        fronts = compute_frontier_bundled([(e.src, f.cur) for f, e in zip(ok, stitched)])
        self._post(self._frontiers_done, ok, stitched, fronts)

    def _frontiers_done(self, flights, stitched, fronts):
        for f, edges, front in zip(flights, stitched, fronts):
            if f.failed:
                continue
            f.blocks.append(SampledBlock(f.hop, f.cur, edges))
            f.cur = front
            f.hop += 1
            if f.hop < self.num_hops:
                self._start_hop(f)
            else:
                f.input_nodes = front
                self._mark(f.seq, Stage.NEIGHBOR_SAMPLE, 2)
                self._sampled[f.seq] = f

    def _job_cpu(self, f: _Flight):
        self._mark(f.seq, Stage.CPU_FEATURE_COPY, 1)
        try:
            pending = self.kvstore.pull_vertices_start(f.input_nodes)
        except Exception as exc:  # noqa: BLE001
            self._post(self._fail, f, exc)
            return
        pending.add_done_callback(lambda fu: self._post(self._cpu_finished, f, fu))
        pending.seal()

    def _cpu_finished(self, f: _Flight, fut):
        if f.failed:
            return
        try:
            f.staging = fut.result()
        except Exception as exc:  # noqa: BLE001
            self._fail(f, exc)
            return
        self._mark(f.seq, Stage.CPU_FEATURE_COPY, 2, f.staging.nbytes)
        self._cpu_done[f.seq] = f

    def _device_loop(self):
        while True:
            f = self._device_q.get()
            if f is None:
                return
            self._mark(f.seq, Stage.DEVICE_FEATURE_COPY, 1)
            try:
                if self.config.device_latency > 0:
                    time.sleep(self.config.device_latency)
                device_rows = f.staging.copy()
                self._mark(f.seq, Stage.DEVICE_FEATURE_COPY, 2, device_rows.nbytes)
                self._mark(f.seq, Stage.COMPACT, 0)
                self._mark(f.seq, Stage.COMPACT, 1)
                mb = compact(f.blocks, f.target.seeds, self.eto, f.seq)
                mb.features = reorder_features(mb, device_rows)
                _attach_targets(mb, f.target, self.label_fn)
                self._mark(f.seq, Stage.COMPACT, 2)
            except Exception as exc:  # noqa: BLE001
                self._post(self._fail, f, exc)
                continue
            f.staging = None
            self._deliver(f.seq, mb)
