"""Two-stage fork-join execution of the encrypted pipeline.

Stage 1 spawns F filter tasks x C convolution tasks over horizontal bands of
the output rows; activation+pooling waits behind a barrier because pooling
windows span band boundaries.  Stage 2 spawns H class tasks x J channel
tasks over the dense layer; each (class, chunk) worker produces a raw
partial product and partials are combined in fixed ascending index order, so
decrypted outputs are bit-identical across every valid plan.

Workers share immutable ciphertexts and keys; each writes only its own
output slot; the operation counters are updated atomically by the backend.
"""

from __future__ import annotations

import math
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from hecnn.backends.base import CipherVec, CounterSnapshot, HEBackend
from hecnn.errors import HecnnError
from hecnn import layers as nn
from hecnn.model import ActPoolLayer, Conv2dLayer, DenseLayer, EncryptedModel, FlattenLayer
from hecnn.packing import CipherMatrix


@dataclass(frozen=True)
class ThreadPlan:
    """Nested parallelism degrees: filters x conv bands, classes x channel chunks."""

    f: int = 1
    c: int = 1
    h: int = 1
    j: int = 1
    max_workers: int | None = None

    def __post_init__(self) -> None:
        for name in ("f", "c", "h", "j"):
            if getattr(self, name) < 1:
                raise ValueError(f"plan degree {name} must be >= 1")
        if self.max_workers is not None and self.max_workers < 1:
            raise ValueError("max_workers must be >= 1")

    @property
    def workers(self) -> int:
        cap = max(self.f * self.c, self.h * self.j)
        return cap if self.max_workers is None else min(self.max_workers, cap)

    @classmethod
    def parse(cls, text: str, max_workers: int | None = None) -> "ThreadPlan":
        parts = [int(x) for x in text.split(",")]
        if len(parts) != 4:
            raise ValueError("plan must be 'F,C,H,J'")
        return cls(f=parts[0], c=parts[1], h=parts[2], j=parts[3], max_workers=max_workers)

    def __str__(self) -> str:
        return f"{self.f},{self.c},{self.h},{self.j}"


def default_plan(filters: int, classes: int, workers: int) -> ThreadPlan:
    """F equals the filter count with conv bands filling the remaining workers."""
    f = max(1, min(filters, workers))
    c = max(1, math.ceil(workers / f))
    h = max(1, min(classes, workers))
    j = max(1, math.ceil(workers / h))
    return ThreadPlan(f=f, c=c, h=h, j=j, max_workers=workers)


@dataclass(frozen=True)
class Partition:
    """One convolution worker's band: disjoint output rows, overlapping input."""

    out_start: int
    out_stop: int  # exclusive
    in_start: int
    in_stop: int  # exclusive

    @property
    def out_rows(self) -> range:
        return range(self.out_start, self.out_stop)


def plan_partitions(m: int, p: int, c: int) -> list[Partition]:
    """Split M-row input into C horizontal bands of conv output rows.

    Bands are contiguous, disjoint, and cover all output rows with sizes
    differing by at most one; input ranges include the P-1 rows of overlap a
    valid convolution needs at band boundaries.  C larger than the output
    row count is clamped with a warning.
    """
    out_rows = m - p + 1
    if out_rows < 1:
        raise ValueError(f"kernel height {p} larger than input height {m}")
    if c > out_rows:
        warnings.warn(
            f"{c} conv partitions exceed {out_rows} output rows; clamping", stacklevel=2
        )
        c = out_rows
    big = out_rows % c
    size = out_rows // c
    parts = []
    start = 0
    for i in range(c):
        stop = start + size + (1 if i < big else 0)
        parts.append(
            Partition(out_start=start, out_stop=stop, in_start=start, in_stop=stop + p - 1)
        )
        start = stop
    return parts


class _Gauge:
    """High-water mark of concurrently running tasks."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._active = 0
        self.high_water = 0

    def wrap(self, fn, events: list | None, label: str):
        def runner(*args):
            with self._lock:
                self._active += 1
                self.high_water = max(self.high_water, self._active)
            start = time.monotonic()
            try:
                return fn(*args)
            finally:
                end = time.monotonic()
                with self._lock:
                    self._active -= 1
                    if events is not None:
                        events.append((label, start, end))

        return runner


@dataclass
class InferenceResult:
    logits: list[CipherVec]
    batch: int
    plan: ThreadPlan
    layer_deltas: list[tuple[str, CounterSnapshot]]
    stage_seconds: dict[str, float]
    workers_high_water: int
    task_events: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return sum(self.stage_seconds.values())

    @property
    def amortized_seconds(self) -> float:
        """Wall clock divided by the images actually in the batch (not slots)."""
        return self.total_seconds / max(1, self.batch)


def run_inference(
    backend: HEBackend,
    enc_model: EncryptedModel,
    enc_input: CipherMatrix,
    plan: ThreadPlan | None = None,
    instrument: bool = False,
) -> InferenceResult:
    """Run the encrypted pipeline under a thread plan.

    The server-side entry point: requires only public material (the backend
    needs the evaluation key bound; no secret key is ever accepted).  Any
    worker failure aborts the run with the original exception.
    """
    model = enc_model.model
    plan = plan or ThreadPlan()
    gauge = _Gauge()
    events: list | None = [] if instrument else None
    deltas: list[tuple[str, CounterSnapshot]] = []
    stage_seconds: dict[str, float] = {}

    conv = model.conv()
    dense = model.dense()
    x = enc_input

    eff_f = plan.f if conv is None else min(plan.f, conv.filters)
    eff_h = plan.h if dense is None else min(plan.h, dense.out_dim)
    if eff_f != plan.f or eff_h != plan.h:
        warnings.warn(
            f"plan degrees clamped to the model: F={eff_f}, H={eff_h}", stacklevel=2
        )
    pool_size = max(1, max(eff_f * plan.c, eff_h * plan.j))
    if plan.max_workers is not None:
        pool_size = min(pool_size, plan.max_workers)

    with ThreadPoolExecutor(max_workers=pool_size) as pool:

        def run_phase(name: str, tasks: list) -> list:
            """Submit callables and collect results in task order."""
            futures = [pool.submit(gauge.wrap(fn, events, name), *args) for fn, *args in tasks]
            results = []
            for fut in futures:
                results.append(fut.result())  # re-raises worker exceptions
            return results

        maps: list[CipherMatrix] | None = None
        flat: list[CipherVec] | None = None
        logits: list[CipherVec] | None = None

        for layer in model.layers:
            mark = backend.counters.snapshot()
            t0 = time.monotonic()
            if isinstance(layer, Conv2dLayer):
                m, _ = x.dims
                bands = plan_partitions(m, layer.kernel[0], plan.c)
                tasks = [
                    (nn.conv2d_enc, backend, x, enc_model.conv_kernels[f], band.out_rows)
                    for f in range(layer.filters)
                    for band in bands
                ]
                rows = run_phase("conv", tasks)
                maps = []
                nb = len(bands)
                for f in range(layer.filters):
                    grid: list[list[CipherVec]] = []
                    for b in range(nb):
                        grid.extend(rows[f * nb + b])
                    maps.append(CipherMatrix(grid=grid, batch=x.batch))
                stage_seconds["conv"] = time.monotonic() - t0
                deltas.append(("conv2d", backend.counters.snapshot() - mark))
            elif isinstance(layer, ActPoolLayer):
                # barrier: all conv bands completed before any pooling window forms
                assert maps is not None
                tasks = [(nn.act_pool, backend, fm, layer.act) for fm in maps]
                maps = run_phase("actpool", tasks)
                stage_seconds["actpool"] = time.monotonic() - t0
                deltas.append(("actpool", backend.counters.snapshot() - mark))
            elif isinstance(layer, FlattenLayer):
                assert maps is not None
                flat = nn.flatten(maps)
                deltas.append(("flatten", backend.counters.snapshot() - mark))
            elif isinstance(layer, DenseLayer):
                # barrier: all filter maps complete before the dense stage begins
                assert flat is not None
                w_cols = [
                    [enc_model.dense_weights[i][r] for i in range(layer.in_dim)]
                    for r in range(layer.out_dim)
                ]
                chunks = _split_range(layer.in_dim, plan.j)
                tasks = [
                    (nn.dense_column_partial, backend, flat, w_cols[r], lo, hi)
                    for r in range(layer.out_dim)
                    for lo, hi in chunks
                ]
                partials = run_phase("dense_partial", tasks)
                nc = len(chunks)
                combine_tasks = [
                    (
                        nn.dense_combine,
                        backend,
                        partials[r * nc : (r + 1) * nc],
                        enc_model.dense_bias[r] if enc_model.dense_bias else None,
                    )
                    for r in range(layer.out_dim)
                ]
                logits = run_phase("dense_combine", combine_tasks)
                stage_seconds["dense"] = time.monotonic() - t0
                deltas.append(("dense", backend.counters.snapshot() - mark))

    if logits is None:
        raise HecnnError("model has no dense layer; inference yields no logits")
    return InferenceResult(
        logits=logits,
        batch=x.batch,
        plan=plan,
        layer_deltas=deltas,
        stage_seconds=stage_seconds,
        workers_high_water=gauge.high_water,
        task_events=events or [],
    )


def _split_range(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n))
    big = n % parts
    size = n // parts
    out = []
    start = 0
    for i in range(parts):
        stop = start + size + (1 if i < big else 0)
        out.append((start, stop))
        start = stop
    return out
