"""Static depth/cost analysis of a model before any encryption happens.

Predicts, exactly, the operation counts the runtime will tally; estimates
ciphertext memory pressure; and reports two views of the modulus budget:

* the calibrated heuristic — 100 bits per level plus 100, anchored at 200
  bits for a single multiplication — applied to the deepest-path level count
  (multiplications on the deepest path, plus one guard level per fused
  activation for its folded constant path);
* the realized chain capacity for the given parameters, which is what the
  backends actually enforce.

The two views disagree by construction (the heuristic is deliberately
conservative); both are reported so users can pick.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from hecnn.backends.base import CounterSnapshot
from hecnn.backends.chain import BASE_EXTRA_BITS, chain_capacity
from hecnn.model import ActPoolLayer, Conv2dLayer, DenseLayer, FlattenLayer, ModelDesc
from hecnn.params import HEParams, SecurityEstimate, security_estimate

HEURISTIC_BITS_PER_LEVEL = 100


@dataclass(frozen=True)
class LayerCost:
    name: str
    counts: CounterSnapshot
    levels: int  # levels consumed by the layer at runtime
    depth_weight: int  # contribution to the heuristic deepest path


@dataclass(frozen=True)
class CostReport:
    params: HEParams
    per_layer: tuple[LayerCost, ...]
    totals: CounterSnapshot
    deepest_path_levels: int
    recommended_l: int
    backend_levels: int
    consumed_levels: int
    peak_ciphertexts_per_filter: int
    peak_ciphertexts_total: int
    security: SecurityEstimate
    feasibility: str

    def table(self) -> str:
        out = io.StringIO()
        head = f"{'layer':<10}{'ct-ct mult':>12}{'ct-pt mult':>12}{'ct-ct add':>12}{'ct-pt add':>12}{'levels':>8}"
        out.write(head + "\n")
        out.write("-" * len(head) + "\n")
        for lc in self.per_layer:
            c = lc.counts
            out.write(
                f"{lc.name:<10}{c.ctct_mult:>12}{c.ctpt_mult:>12}{c.ctct_add:>12}{c.ctpt_add:>12}{lc.levels:>8}\n"
            )
        t = self.totals
        out.write(
            f"{'total':<10}{t.ctct_mult:>12}{t.ctpt_mult:>12}{t.ctct_add:>12}{t.ctpt_add:>12}{self.consumed_levels:>8}\n"
        )
        out.write(f"deepest path levels (heuristic view): {self.deepest_path_levels}\n")
        out.write(f"recommended L (heuristic): {self.recommended_l} bits\n")
        out.write(
            f"chain capacity at L={self.params.modulus_bits}: {self.backend_levels} levels "
            f"(runtime needs {self.consumed_levels})\n"
        )
        out.write(
            f"peak ciphertexts: {self.peak_ciphertexts_per_filter} per filter, "
            f"{self.peak_ciphertexts_total} total\n"
        )
        lam = self.security.lam
        out.write(
            f"security at ring degree {self.params.ring_degree}: "
            f"{'unknown' if lam is None else f'~{lam:.0f} bits'} ({self.security.verdict})\n"
        )
        out.write(f"feasibility: {self.feasibility}\n")
        return out.getvalue()

    def csv_rows(self) -> list[dict]:
        rows = []
        for lc in self.per_layer:
            rows.append(
                {
                    "layer": lc.name,
                    "ctct_mult": lc.counts.ctct_mult,
                    "ctpt_mult": lc.counts.ctpt_mult,
                    "ctct_add": lc.counts.ctct_add,
                    "ctpt_add": lc.counts.ctpt_add,
                    "levels": lc.levels,
                }
            )
        rows.append(
            {
                "layer": "total",
                "ctct_mult": self.totals.ctct_mult,
                "ctpt_mult": self.totals.ctpt_mult,
                "ctct_add": self.totals.ctct_add,
                "ctpt_add": self.totals.ctpt_add,
                "levels": self.consumed_levels,
            }
        )
        return rows


def recommended_modulus_bits(deepest_path_levels: int) -> int:
    """Heuristic budget: 100 bits per deepest-path level plus the 200-bit floor."""
    return HEURISTIC_BITS_PER_LEVEL * (deepest_path_levels + 1)


def analyze(model: ModelDesc, params: HEParams) -> CostReport:
    """Predict per-layer operation counts, levels, memory, and parameter fit."""
    trace = model.dimension_trace()
    dims = {name: shape for name, shape in trace}
    per_layer: list[LayerCost] = []
    deepest = 0
    consumed = 0
    conv_out: tuple[int, int, int] | None = None
    classes: int | None = None
    filters = 1

    for layer in model.layers:
        if isinstance(layer, Conv2dLayer):
            om, on, filters = dims["conv2d"]
            cells = om * on
            terms = layer.kernel[0] * layer.kernel[1]
            counts = CounterSnapshot(
                ctct_mult=filters * cells * terms,
                ctct_add=filters * cells * (terms - 1)
                + (filters * cells if layer.bias is not None else 0),
            )
            per_layer.append(LayerCost("conv2d", counts, levels=1, depth_weight=1))
            deepest += 1
            consumed += 1
            conv_out = (om, on, filters)
        elif isinstance(layer, ActPoolLayer):
            im, jn, filters = dims["actpool"]
            pre_cells = filters * (2 * im) * (2 * jn)
            counts = CounterSnapshot(
                ctct_mult=pre_cells,
                ctpt_mult=2 * pre_cells,
                ctct_add=pre_cells + filters * im * jn * 3,
                ctpt_add=pre_cells,
            )
            # two levels for the quadratic path, one guard for the folded
            # constant path (this decomposition reproduces the published
            # anchors: one multiplication -> 200 bits, this CNN -> 600 bits)
            per_layer.append(LayerCost("actpool", counts, levels=2, depth_weight=3))
            deepest += 3
            consumed += 2
        elif isinstance(layer, FlattenLayer):
            per_layer.append(LayerCost("flatten", CounterSnapshot(), levels=0, depth_weight=0))
        elif isinstance(layer, DenseLayer):
            classes = layer.out_dim
            counts = CounterSnapshot(
                ctct_mult=layer.in_dim * layer.out_dim,
                ctct_add=(layer.in_dim - 1) * layer.out_dim
                + (layer.out_dim if layer.bias is not None else 0),
            )
            per_layer.append(LayerCost("dense", counts, levels=1, depth_weight=1))
            deepest += 1
            consumed += 1

    totals = CounterSnapshot()
    for lc in per_layer:
        totals = totals + lc.counts

    # FC-stage memory: per filter, the pooled map plus one running sum per
    # class stays resident: (M-P+1)(N-Q+1)(R+1)/4 ciphertexts.
    if conv_out is not None and classes is not None:
        om, on, filters = conv_out
        peak_per_filter = om * on * (classes + 1) // 4
    elif conv_out is not None:
        om, on, filters = conv_out
        peak_per_filter = om * on
    else:
        peak_per_filter = 0
    peak_total = peak_per_filter * filters

    backend_levels = chain_capacity(params)
    sec = security_estimate(params)
    r = params.precision_bits
    needed_l = (r + BASE_EXTRA_BITS) + consumed * r
    if consumed <= backend_levels:
        feasibility = "ok"
    elif sec.max_secure_bits is not None and needed_l > sec.max_secure_bits:
        feasibility = (
            f"infeasible without bootstrapping: needs L>={needed_l} bits, above the "
            f"128-bit cap ({sec.max_secure_bits}) for ring degree {params.ring_degree}"
        )
    else:
        feasibility = f"insufficient depth: increase L to at least {needed_l} bits"

    return CostReport(
        params=params,
        per_layer=tuple(per_layer),
        totals=totals,
        deepest_path_levels=deepest,
        recommended_l=recommended_modulus_bits(deepest),
        backend_levels=backend_levels,
        consumed_levels=consumed,
        peak_ciphertexts_per_filter=peak_per_filter,
        peak_ciphertexts_total=peak_total,
        security=sec,
        feasibility=feasibility,
    )


@dataclass(frozen=True)
class VerifyVerdict:
    ok: bool
    diffs: tuple[str, ...] = field(default_factory=tuple)

    def __str__(self) -> str:
        if self.ok:
            return "predicted counts match runtime counters exactly"
        return "count mismatches:\n" + "\n".join("  " + d for d in self.diffs)


def verify_against_runtime(
    report: CostReport, layer_deltas: list[tuple[str, CounterSnapshot]]
) -> VerifyVerdict:
    """Exact per-layer, per-category comparison of prediction vs runtime tallies."""
    diffs: list[str] = []
    predicted = [(lc.name, lc.counts) for lc in report.per_layer if lc.counts.total() > 0]
    counted = [(name, c) for name, c in layer_deltas if c.total() > 0]
    if len(predicted) != len(counted):
        diffs.append(
            f"layer count mismatch: predicted {len(predicted)} active layers, ran {len(counted)}"
        )
    for (p_name, p), (c_name, c) in zip(predicted, counted):
        if p_name != c_name:
            diffs.append(f"layer order mismatch: predicted {p_name!r}, ran {c_name!r}")
            continue
        for cat in ("ctct_mult", "ctpt_mult", "ctct_add", "ctpt_add"):
            pv, cv = getattr(p, cat), getattr(c, cat)
            if pv != cv:
                diffs.append(f"layer {p_name!r}: {cat} predicted {pv}, counted {cv}")
    return VerifyVerdict(ok=not diffs, diffs=tuple(diffs))
