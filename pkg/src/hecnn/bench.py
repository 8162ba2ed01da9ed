"""Parameter and thread-plan sweeps emitted as CSV records.

The parameter sweep times ciphertext-ciphertext addition and multiplication
on constant-filled fresh ciphertexts over many trials at each modulus
budget, and records serialized ciphertext size plus the table security
estimate.  The thread sweep runs full inferences under each plan and
records per-stage wall clock, the worker high-water mark, and the
throughput-honest amortized time (wall clock divided by the batch actually
present, not the slot count).
"""

from __future__ import annotations

import csv
import gc
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hecnn import serialization as ser
from hecnn.backends import get_backend
from hecnn.backends.base import HEBackend
from hecnn.executor import InferenceResult, ThreadPlan, run_inference
from hecnn.model import EncryptedModel
from hecnn.packing import CipherMatrix
from hecnn.params import derive_params, security_estimate

MIN_TIMING_TRIALS = 30

PARAM_CSV_COLUMNS = ["m", "L", "r", "op", "mean_us", "std_us", "ct_bytes", "lambda"]
THREAD_CSV_COLUMNS = [
    "F",
    "C",
    "H",
    "J",
    "max_workers",
    "workers_high_water",
    "conv_s",
    "actpool_s",
    "dense_s",
    "total_s",
    "batch",
    "amortized_ms_per_image",
]


@dataclass(frozen=True)
class BenchRecord:
    m: int
    l_bits: int
    r: int
    op: str
    mean_us: float
    std_us: float
    ct_bytes: int
    lam: float | None

    def row(self) -> dict:
        return {
            "m": self.m,
            "L": self.l_bits,
            "r": self.r,
            "op": self.op,
            "mean_us": f"{self.mean_us:.3f}",
            "std_us": f"{self.std_us:.3f}",
            "ct_bytes": self.ct_bytes,
            "lambda": "" if self.lam is None else f"{self.lam:.1f}",
        }


def _time_op(fn, trials: int) -> tuple[float, float]:
    """Mean/stddev in microseconds over `trials` samples.

    Sub-millisecond operations are timed in batches sized to ~10 ms per
    sample so one sample is far larger than timer and scheduler granularity,
    and the garbage collector is paused during sampling; the reported
    figures are always per single operation.
    """
    t0 = time.perf_counter()
    fn()
    probe = time.perf_counter() - t0
    batch = max(1, int(math.ceil(10e-3 / max(probe, 1e-7))))
    for _ in range(3):  # warm caches and any lazy compilation
        fn()
    samples = []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(trials):
            t0 = time.perf_counter()
            for _ in range(batch):
                fn()
            samples.append((time.perf_counter() - t0) / batch * 1e6)
    finally:
        if gc_was_enabled:
            gc.enable()
    return statistics.fmean(samples), statistics.pstdev(samples)


def bench_params(
    m: int,
    r: int,
    l_values: list[int],
    trials: int = 1000,
    seed: int = 0,
    backend_name: str = "ckks",
) -> list[BenchRecord]:
    """Time CT-CT add/mult and measure ciphertext size across modulus budgets."""
    if trials < MIN_TIMING_TRIALS:
        raise ValueError(f"timing records need at least {MIN_TIMING_TRIALS} trials")
    records: list[BenchRecord] = []
    for l_bits in l_values:
        params = derive_params(m, l_bits, r, seed=seed)
        backend = get_backend(backend_name, params)
        keys = backend.keygen()
        backend.set_eval_key(keys)
        a = backend.encrypt(np.full(backend.slots, 0.5), keys)
        b = backend.encrypt(np.full(backend.slots, 0.25), keys)
        ct_bytes = len(ser.cipher_record(backend, a))
        lam = security_estimate(params).lam
        mean, std = _time_op(lambda: backend.add_ct_ct(a, b), trials)
        records.append(BenchRecord(m, l_bits, r, "ctct_add", mean, std, ct_bytes, lam))
        mean, std = _time_op(lambda: backend.mul_ct_ct(a, b), trials)
        records.append(BenchRecord(m, l_bits, r, "ctct_mult", mean, std, ct_bytes, lam))
    return records


def write_param_csv(records: list[BenchRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PARAM_CSV_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())


def bench_threads(
    backend: HEBackend,
    enc_model: EncryptedModel,
    enc_input: CipherMatrix,
    plans: list[ThreadPlan],
) -> list[tuple[ThreadPlan, InferenceResult]]:
    """Run one inference per plan and collect stage timings."""
    results = []
    for plan in plans:
        backend.counters.reset()
        results.append((plan, run_inference(backend, enc_model, enc_input, plan)))
    return results


def write_thread_csv(results: list[tuple[ThreadPlan, InferenceResult]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=THREAD_CSV_COLUMNS)
        writer.writeheader()
        for plan, res in results:
            writer.writerow(
                {
                    "F": plan.f,
                    "C": plan.c,
                    "H": plan.h,
                    "J": plan.j,
                    "max_workers": plan.max_workers or "",
                    "workers_high_water": res.workers_high_water,
                    "conv_s": f"{res.stage_seconds.get('conv', 0.0):.3f}",
                    "actpool_s": f"{res.stage_seconds.get('actpool', 0.0):.3f}",
                    "dense_s": f"{res.stage_seconds.get('dense', 0.0):.3f}",
                    "total_s": f"{res.total_seconds:.3f}",
                    "batch": res.batch,
                    "amortized_ms_per_image": f"{res.amortized_seconds * 1e3:.3f}",
                }
            )


def linear_fit_r2(xs: list[float], ys: list[float]) -> tuple[float, float]:
    """Least-squares slope and R^2 of y against x."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), r2
