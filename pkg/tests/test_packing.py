import numpy as np
import pytest

from hecnn.packing import (
    CipherMatrix,
    ImageBatch,
    load_matrix,
    pack_batch,
    pack_kernel,
    save_matrix,
    unpack_batch,
    unpack_logits,
)


def test_cell_layout_matches_definition(any_backend):
    be, keys = any_backend
    imgs = np.arange(2 * 2 * 2, dtype=np.float64).reshape(2, 2, 2) / 8.0
    cm = pack_batch(be, ImageBatch(images=imgs), keys)
    cell = be.decrypt(cm.grid[0][0], keys).values
    assert abs(cell[0] - imgs[0, 0, 0]) <= 1e-6
    assert abs(cell[1] - imgs[1, 0, 0]) <= 1e-6
    assert np.max(np.abs(cell[2:])) <= 1e-6  # unused slots zero-filled


def test_grid_has_exactly_mn_ciphertexts(any_backend):
    be, keys = any_backend
    imgs = np.zeros((3, 4, 5))
    cm = pack_batch(be, ImageBatch(images=imgs), keys)
    assert cm.dims == (4, 5)
    assert sum(1 for _ in cm.cells()) == 20


def test_roundtrip(any_backend):
    be, keys = any_backend
    rng = np.random.default_rng(0)
    imgs = rng.uniform(0, 1, (6, 3, 3))
    back = unpack_batch(be, pack_batch(be, ImageBatch(images=imgs), keys), keys)
    tol = 0.0 if be.name == "ref" else 1e-6
    assert np.max(np.abs(back.images - imgs)) <= tol


def test_full_capacity_batch_packs(any_backend):
    be, keys = any_backend
    rng = np.random.default_rng(1)
    imgs = rng.uniform(0, 1, (be.slots, 2, 2))
    cm = pack_batch(be, ImageBatch(images=imgs), keys)
    assert cm.batch == be.slots


def test_over_capacity_batch_rejected(any_backend):
    be, keys = any_backend
    with pytest.raises(ValueError):
        pack_batch(be, ImageBatch(images=np.zeros((be.slots + 1, 2, 2))), keys)


def test_parallel_pack_equals_serial(ckks_small):
    be, keys = ckks_small
    rng = np.random.default_rng(2)
    imgs = rng.uniform(0, 1, (4, 3, 3))
    serial = pack_batch(be, ImageBatch(images=imgs), keys, workers=1)
    par = pack_batch(be, ImageBatch(images=imgs), keys, workers=4)
    for a, b in zip(serial.cells(), par.cells()):
        assert np.array_equal(a.payload.c0, b.payload.c0)
        assert np.array_equal(a.payload.c1, b.payload.c1)


class TestKernelPacking:
    def test_broadcast_value_in_every_slot(self, any_backend):
        be, keys = any_backend
        ck = pack_kernel(be, np.array([[0.5]]), keys)
        vals = be.decrypt(ck.grid[0][0], keys).values
        assert np.max(np.abs(vals - 0.5)) <= 1e-6

    def test_3x3_kernel_yields_nine_ciphertexts(self, any_backend):
        be, keys = any_backend
        ck = pack_kernel(be, np.ones((3, 3)), keys)
        assert ck.dims == (3, 3)
        assert sum(len(row) for row in ck.grid) == 9

    def test_broadcast_kernel_scales_every_image_identically(self, any_backend):
        be, keys = any_backend
        rng = np.random.default_rng(3)
        imgs = rng.uniform(0, 1, (4, 2, 2))
        cm = pack_batch(be, ImageBatch(images=imgs), keys)
        ck = pack_kernel(be, np.array([[0.25]]), keys)
        prod = be.mul_ct_ct(cm.grid[1][1], ck.grid[0][0])
        got = be.decrypt(prod, keys).values[:4]
        assert np.max(np.abs(got - imgs[:, 1, 1] * 0.25)) <= 1e-6

    def test_nonfinite_kernel_rejected(self, any_backend):
        be, keys = any_backend
        with pytest.raises(ValueError):
            pack_kernel(be, np.array([[np.nan]]), keys)


def test_logits_unpack_shape(any_backend):
    be, keys = any_backend
    cts = [be.encrypt(np.full(be.slots, float(r)), keys) for r in range(10)]
    logits = unpack_logits(be, cts, keys, batch=3)
    assert logits.shape == (3, 10)
    assert np.max(np.abs(logits - np.arange(10)[None, :])) <= 1e-6


def test_marker_slots_survive_pack_compute_unpack(any_backend):
    # slot j carries image j through packing and arithmetic, never mixing
    be, keys = any_backend
    b = min(8, be.slots)
    imgs = np.zeros((b, 2, 2))
    for j in range(b):
        imgs[j] = (j + 1) / 10.0
    cm = pack_batch(be, ImageBatch(images=imgs), keys)
    doubled = be.add_ct_ct(cm.grid[0][0], cm.grid[0][0])
    got = be.decrypt(doubled, keys).values[:b]
    assert np.max(np.abs(got - 2 * imgs[:, 0, 0])) <= 1e-5


def test_matrix_file_roundtrip(any_backend, tmp_path):
    be, keys = any_backend
    rng = np.random.default_rng(4)
    imgs = rng.uniform(0, 1, (3, 2, 3))
    cm = pack_batch(be, ImageBatch(images=imgs), keys)
    path = tmp_path / "batch.hecx"
    save_matrix(be, cm, path)
    back = load_matrix(be, path)
    assert back.dims == cm.dims and back.batch == cm.batch
    restored = unpack_batch(be, back, keys)
    tol = 0.0 if be.name == "ref" else 1e-6
    assert np.max(np.abs(restored.images - imgs)) <= tol
