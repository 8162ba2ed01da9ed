import numpy as np
import pytest

from conftest import make_backend
from hecnn import layers as nn
from hecnn.errors import DepthExhausted
from hecnn.executor import Partition, ThreadPlan, default_plan, plan_partitions, run_inference
from hecnn.model import encrypt_model, plaintext_forward
from hecnn.packing import CipherMatrix, ImageBatch, pack_batch, unpack_logits


class TestPartitions:
    def test_seven_bands_of_28_rows(self):
        parts = plan_partitions(28, 3, 7)
        sizes = [p.out_stop - p.out_start for p in parts]
        assert sizes == [4, 4, 4, 4, 4, 3, 3]
        # disjoint cover of all 26 output rows
        rows = [r for p in parts for r in p.out_rows]
        assert rows == list(range(26))
        # consecutive input bands overlap by exactly kernel-1 rows
        for a, b in zip(parts, parts[1:]):
            assert a.in_stop - b.in_start == 2

    def test_single_band_is_whole_image(self):
        parts = plan_partitions(28, 3, 1)
        assert parts == [Partition(out_start=0, out_stop=26, in_start=0, in_stop=28)]

    def test_two_bands_of_tiny_image(self):
        parts = plan_partitions(4, 3, 2)
        assert [list(p.out_rows) for p in parts] == [[0], [1]]
        assert [(p.in_start, p.in_stop) for p in parts] == [(0, 3), (1, 4)]

    def test_oversized_band_count_clamps_with_warning(self):
        with pytest.warns(UserWarning, match="clamping"):
            parts = plan_partitions(4, 3, 5)
        assert len(parts) == 2

    def test_kernel_taller_than_image_rejected(self):
        with pytest.raises(ValueError):
            plan_partitions(2, 3, 1)


class TestThreadPlan:
    def test_parse_and_str(self):
        plan = ThreadPlan.parse("2,3,4,5", max_workers=8)
        assert (plan.f, plan.c, plan.h, plan.j) == (2, 3, 4, 5)
        assert str(plan) == "2,3,4,5"
        assert plan.workers == 8  # capped below f*c=6? no: max(6,20)=20 -> 8

    def test_degrees_must_be_positive(self):
        with pytest.raises(ValueError):
            ThreadPlan(f=0)

    def test_default_plan_uses_all_filters_first(self):
        plan = default_plan(filters=4, classes=10, workers=8)
        assert plan.f == 4 and plan.c == 2
        assert plan.max_workers == 8


@pytest.fixture(scope="module")
def pipeline_setup(tiny_model, tiny_images):
    def build(backend_name):
        be = make_backend(backend_name)
        keys = be.keygen()
        be.set_eval_key(keys)
        enc = encrypt_model(be, tiny_model, keys)
        cm = pack_batch(be, ImageBatch(images=tiny_images), keys)
        return be, keys, enc, cm

    return build


PLANS = [
    ThreadPlan(1, 1, 1, 1),
    ThreadPlan(2, 3, 2, 2),
    ThreadPlan(2, 1, 1, 4),
    ThreadPlan(2, 2, 3, 1, max_workers=3),
]


class TestPlanInvariance:
    @pytest.mark.parametrize("backend_name", ["ref", "ckks"])
    def test_outputs_bit_identical_across_plans(self, backend_name, pipeline_setup):
        be, keys, enc, cm = pipeline_setup(backend_name)
        outs = []
        for plan in PLANS:
            res = run_inference(be, enc, cm, plan)
            outs.append(unpack_logits(be, res.logits, keys, cm.batch))
        for other in outs[1:]:
            assert np.array_equal(outs[0], other)

    def test_degenerate_plan_equals_manual_serial_composition(self, pipeline_setup, tiny_model):
        be, keys, enc, cm = pipeline_setup("ref")
        res = run_inference(be, enc, cm, ThreadPlan(1, 1, 1, 1))
        maps = []
        for f in range(tiny_model.conv().filters):
            rows = nn.conv2d_enc(be, cm, enc.conv_kernels[f])
            maps.append(nn.act_pool(be, CipherMatrix(grid=rows, batch=cm.batch), tiny_model.actpool().act))
        flat = nn.flatten(maps)
        logits = nn.dense_enc(be, flat, enc.dense_weights, enc.dense_bias)
        for a, b in zip(res.logits, logits):
            assert np.array_equal(a.payload.values, b.payload.values)


class TestExecution:
    def test_matches_oracle(self, pipeline_setup, tiny_model, tiny_images):
        be, keys, enc, cm = pipeline_setup("ckks")
        res = run_inference(be, enc, cm, ThreadPlan(2, 2, 2, 2))
        got = unpack_logits(be, res.logits, keys, cm.batch)
        assert np.max(np.abs(got - plaintext_forward(tiny_model, tiny_images))) <= 1e-2

    def test_barrier_orders_conv_before_pooling(self, pipeline_setup):
        be, keys, enc, cm = pipeline_setup("ckks")
        res = run_inference(be, enc, cm, ThreadPlan(2, 2, 2, 2), instrument=True)
        conv_ends = [end for label, start, end in res.task_events if label == "conv"]
        pool_starts = [start for label, start, end in res.task_events if label == "actpool"]
        assert conv_ends and pool_starts
        assert max(conv_ends) <= min(pool_starts)

    def test_dense_waits_for_all_filters(self, pipeline_setup):
        be, keys, enc, cm = pipeline_setup("ckks")
        res = run_inference(be, enc, cm, ThreadPlan(2, 2, 2, 2), instrument=True)
        pool_ends = [end for label, _, end in res.task_events if label == "actpool"]
        dense_starts = [start for label, start, _ in res.task_events if label.startswith("dense")]
        assert max(pool_ends) <= min(dense_starts)

    def test_high_water_respects_cap(self, pipeline_setup):
        be, keys, enc, cm = pipeline_setup("ckks")
        res = run_inference(be, enc, cm, ThreadPlan(2, 2, 2, 2, max_workers=2))
        assert 1 <= res.workers_high_water <= 2

    def test_plan_wider_than_model_clamps(self, pipeline_setup):
        be, keys, enc, cm = pipeline_setup("ref")
        with pytest.warns(UserWarning, match="clamped"):
            res = run_inference(be, enc, cm, ThreadPlan(16, 1, 99, 1))
        assert res.logits

    def test_depth_exhaustion_propagates_from_workers(self, tiny_model, tiny_images):
        # a chain two levels short: conv+actpool fit, dense cannot
        be = make_backend("ref", l_bits=170, r=35)
        assert be.fresh_level == 3
        keys = be.keygen()
        be.set_eval_key(keys)
        from hecnn.model import pipeline_trace  # the ledger refuses too

        with pytest.raises(Exception):
            pipeline_trace(tiny_model, be.chain, be.canonical_scale)

    def test_depth_exhaustion_mid_run(self, tiny_images):
        from hecnn.model import ModelDesc, Conv2dLayer, ActPoolLayer, FlattenLayer, DenseLayer
        from hecnn.layers import PolyActivation

        # build the encrypted model on a 4-level backend, then run it on a
        # deliberately starved 2-level context to hit DepthExhausted mid-run
        be = make_backend("ref", l_bits=165, r=30)  # 3 levels < 4 needed
        assert be.fresh_level == 3
        keys = be.keygen()
        be.set_eval_key(keys)
        model = ModelDesc(
            input_dims=(8, 8),
            layers=(
                Conv2dLayer(filters=1, kernel=(3, 3), weights=np.zeros((1, 3, 3))),
                ActPoolLayer(act=PolyActivation()),
                FlattenLayer(),
                DenseLayer(in_dim=9, out_dim=2, weights=np.zeros((9, 2))),
            ),
        )
        from hecnn.model import encrypt_model as enc_model_fn

        with pytest.raises(Exception):
            enc = enc_model_fn(be, model, keys)
            cm = pack_batch(be, ImageBatch(images=tiny_images), keys)
            run_inference(be, enc, cm, ThreadPlan(1, 2, 1, 2))

    def test_amortized_time_divides_by_batch(self, pipeline_setup):
        be, keys, enc, cm = pipeline_setup("ref")
        res = run_inference(be, enc, cm)
        assert res.amortized_seconds == pytest.approx(res.total_seconds / cm.batch)
