"""Model description, plaintext reference forward pass, and model encryption.

The model file keeps the architecture as clear-text JSON (the server is
allowed to see it) with raw little-endian float64 weight blobs.  The
encrypted container holds the same manifest plus one broadcast ciphertext
per weight, encrypted under the end user's public key, so the server can
run inference without ever seeing a weight.

The plaintext forward pass applies the identical folded activation and the
identical fixed accumulation order as the encrypted layers, making it an
exact oracle for the reference backend and a tolerance oracle for the real
one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from hecnn.backends.base import CipherVec, HEBackend, KeyMaterial
from hecnn.backends.chain import ModulusChain
from hecnn.errors import HecnnError, ModelValidationError
from hecnn.layers import WINDOW_ORDER, PolyActivation
from hecnn.packing import CipherKernel
from hecnn import serialization as ser

MODEL_MAGIC = b"HECNNMDL"
MODEL_VERSION = 1
KIND_PLAIN_MODEL = 1
KIND_ENC_MODEL = 2


@dataclass(frozen=True)
class Conv2dLayer:
    filters: int
    kernel: tuple[int, int]
    weights: np.ndarray  # (filters, P, Q)
    bias: np.ndarray | None = None  # (filters,)
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class ActPoolLayer:
    act: PolyActivation
    kind: str = field(default="actpool", init=False)


@dataclass(frozen=True)
class FlattenLayer:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class DenseLayer:
    in_dim: int
    out_dim: int
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray | None = None  # (out_dim,)
    kind: str = field(default="dense", init=False)


Layer = Conv2dLayer | ActPoolLayer | FlattenLayer | DenseLayer

_ORDER = {"conv2d": 0, "actpool": 1, "flatten": 2, "dense": 3}


@dataclass(frozen=True)
class ModelDesc:
    """Depth-constrained CNN: conv -> actpool -> flatten -> dense (prefixes allowed)."""

    input_dims: tuple[int, int]
    layers: tuple[Layer, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ModelValidationError("model has no layers")
        kinds = [layer.kind for layer in self.layers]
        order = [_ORDER[k] for k in kinds]
        if sorted(order) != order or len(set(order)) != len(order):
            raise ModelValidationError(
                f"layers must follow conv2d -> actpool -> flatten -> dense, got {kinds}"
            )
        if kinds[0] != "conv2d":
            raise ModelValidationError("model must start with a conv2d layer")
        if "dense" in kinds and "flatten" not in kinds:
            raise ModelValidationError("dense layer requires a preceding flatten")
        self.dimension_trace()  # raises on inconsistency
        for layer in self.layers:
            for arr in self._tensors_of(layer):
                if arr is not None and not np.all(np.isfinite(arr)):
                    raise ModelValidationError(f"{layer.kind} weights contain NaN/inf")

    @staticmethod
    def _tensors_of(layer: Layer):
        if isinstance(layer, Conv2dLayer):
            return (layer.weights, layer.bias)
        if isinstance(layer, DenseLayer):
            return (layer.weights, layer.bias)
        return ()

    def dimension_trace(self) -> list[tuple[str, tuple]]:
        """Shape after each layer; raises ModelValidationError on mismatch."""
        m, n = self.input_dims
        filters = 1
        trace: list[tuple[str, tuple]] = [("input", (m, n))]
        flat: int | None = None
        for layer in self.layers:
            if isinstance(layer, Conv2dLayer):
                p, q = layer.kernel
                if layer.weights.shape != (layer.filters, p, q):
                    raise ModelValidationError(
                        f"conv weights shape {layer.weights.shape} != {(layer.filters, p, q)}"
                    )
                if layer.bias is not None and layer.bias.shape != (layer.filters,):
                    raise ModelValidationError("conv bias shape mismatch")
                if p > m or q > n:
                    raise ModelValidationError(f"kernel {layer.kernel} larger than input {(m, n)}")
                m, n = m - p + 1, n - q + 1
                filters = layer.filters
                trace.append(("conv2d", (m, n, filters)))
            elif isinstance(layer, ActPoolLayer):
                if m % 2 or n % 2:
                    raise ModelValidationError(f"actpool needs even dims, got {(m, n)}")
                m, n = m // 2, n // 2
                trace.append(("actpool", (m, n, filters)))
            elif isinstance(layer, FlattenLayer):
                flat = m * n * filters
                trace.append(("flatten", (flat,)))
            elif isinstance(layer, DenseLayer):
                if flat is None or layer.in_dim != flat:
                    raise ModelValidationError(
                        f"dense in_dim {layer.in_dim} != flattened length {flat}"
                    )
                if layer.weights.shape != (layer.in_dim, layer.out_dim):
                    raise ModelValidationError("dense weights shape mismatch")
                if layer.bias is not None and layer.bias.shape != (layer.out_dim,):
                    raise ModelValidationError("dense bias shape mismatch")
                trace.append(("dense", (layer.out_dim,)))
        return trace

    def conv(self) -> Conv2dLayer | None:
        return next((l for l in self.layers if isinstance(l, Conv2dLayer)), None)

    def actpool(self) -> ActPoolLayer | None:
        return next((l for l in self.layers if isinstance(l, ActPoolLayer)), None)

    def dense(self) -> DenseLayer | None:
        return next((l for l in self.layers if isinstance(l, DenseLayer)), None)


# ---------------------------------------------------------------------------
# Level/scale ledger shared by the model owner and the analyzer
# ---------------------------------------------------------------------------


def pipeline_trace(
    model: ModelDesc, chain: ModulusChain, canonical_scale: Fraction
) -> list[dict]:
    """Per-layer level and exact scale of the encrypted pipeline.

    Mirrors the layer implementations: conv and dense each rescale once;
    the activation consumes two levels and restores the canonical scale by
    construction; flatten and the fused pool are free.
    """
    level = chain.num_levels
    scale = canonical_scale
    steps = [{"layer": "input", "level": level, "scale": scale}]
    for layer in model.layers:
        if isinstance(layer, Conv2dLayer):
            if level < 1:
                raise HecnnError("chain too short for the conv layer")
            scale = scale * canonical_scale / chain.level_primes[level - 1]
            level -= 1
        elif isinstance(layer, ActPoolLayer):
            if level < 2:
                raise HecnnError("chain too short for the activation")
            scale = canonical_scale
            level -= 2
        elif isinstance(layer, DenseLayer):
            if level < 1:
                raise HecnnError("chain too short for the dense layer")
            scale = scale * canonical_scale / chain.level_primes[level - 1]
            level -= 1
        steps.append({"layer": layer.kind, "level": level, "scale": scale})
    return steps


# ---------------------------------------------------------------------------
# Plaintext oracle
# ---------------------------------------------------------------------------


def plaintext_forward(model: ModelDesc, images: np.ndarray) -> np.ndarray:
    """Reference forward pass with the approximate activation.

    Operates per-cell on batch vectors using exactly the operation order of
    the encrypted layers, so the reference backend reproduces it bit for
    bit.  Returns logits (B, R) for a dense-terminated model, otherwise the
    final feature maps (B, F, I, J) or flattened features (B, len).
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, :, :]
    maps = [x]  # one entry per filter channel
    flat: np.ndarray | None = None
    out: np.ndarray | None = None
    for layer in model.layers:
        if isinstance(layer, Conv2dLayer):
            src = maps[0]
            b, m, n = src.shape
            p, q = layer.kernel
            om, on = m - p + 1, n - q + 1
            new_maps = []
            for f in range(layer.filters):
                w = layer.weights[f]
                fm = np.empty((b, om, on))
                for i in range(om):
                    for j in range(on):
                        acc = src[:, i, j] * w[0, 0]
                        for dp in range(p):
                            for dq in range(q):
                                if dp == 0 and dq == 0:
                                    continue
                                acc = acc + src[:, i + dp, j + dq] * w[dp, dq]
                        if layer.bias is not None:
                            acc = acc + layer.bias[f]
                        fm[:, i, j] = acc
                new_maps.append(fm)
            maps = new_maps
        elif isinstance(layer, ActPoolLayer):
            new_maps = []
            for fm in maps:
                b, m, n = fm.shape
                g = layer.act.apply(fm, pool_divisor=4.0)
                pooled = np.empty((b, m // 2, n // 2))
                for i in range(m // 2):
                    for j in range(n // 2):
                        di, dj = WINDOW_ORDER[0]
                        acc = g[:, 2 * i + di, 2 * j + dj].copy()
                        for di, dj in WINDOW_ORDER[1:]:
                            acc = acc + g[:, 2 * i + di, 2 * j + dj]
                        pooled[:, i, j] = acc
                new_maps.append(pooled)
            maps = new_maps
        elif isinstance(layer, FlattenLayer):
            b, i_dim, j_dim = maps[0].shape
            filters = len(maps)
            flat = np.empty((b, i_dim * j_dim * filters))
            for i in range(i_dim):
                for j in range(j_dim):
                    for c in range(filters):
                        flat[:, (i * j_dim + j) * filters + c] = maps[c][:, i, j]
        elif isinstance(layer, DenseLayer):
            assert flat is not None
            b = flat.shape[0]
            out = np.empty((b, layer.out_dim))
            for r in range(layer.out_dim):
                acc = flat[:, 0] * layer.weights[0, r]
                for i in range(1, layer.in_dim):
                    acc = acc + flat[:, i] * layer.weights[i, r]
                if layer.bias is not None:
                    acc = acc + layer.bias[r]
                out[:, r] = acc
    if out is not None:
        return out
    if flat is not None:
        return flat
    return np.stack(maps, axis=1)


# ---------------------------------------------------------------------------
# Plain model container
# ---------------------------------------------------------------------------


def _manifest_of(model: ModelDesc) -> dict:
    layers = []
    for layer in model.layers:
        if isinstance(layer, Conv2dLayer):
            layers.append(
                {
                    "kind": "conv2d",
                    "filters": layer.filters,
                    "kernel": list(layer.kernel),
                    "has_bias": layer.bias is not None,
                }
            )
        elif isinstance(layer, ActPoolLayer):
            a = layer.act
            layers.append(
                {"kind": "actpool", "a0": a.a0, "a1": a.a1, "a2": a.a2, "input_scale": a.input_scale}
            )
        elif isinstance(layer, FlattenLayer):
            layers.append({"kind": "flatten"})
        elif isinstance(layer, DenseLayer):
            layers.append(
                {
                    "kind": "dense",
                    "in_dim": layer.in_dim,
                    "out_dim": layer.out_dim,
                    "has_bias": layer.bias is not None,
                }
            )
    return {"version": MODEL_VERSION, "input_dims": list(model.input_dims), "layers": layers}


def _manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def _model_blobs(model: ModelDesc) -> list[np.ndarray]:
    blobs = []
    for layer in model.layers:
        if isinstance(layer, Conv2dLayer):
            blobs.append(layer.weights)
            if layer.bias is not None:
                blobs.append(layer.bias)
        elif isinstance(layer, DenseLayer):
            blobs.append(layer.weights)
            if layer.bias is not None:
                blobs.append(layer.bias)
    return blobs


def save_model(model: ModelDesc, path: str | Path) -> None:
    """Byte-deterministic container: manifest JSON + row-major float64 blobs."""
    manifest = _manifest_bytes(_manifest_of(model))
    body = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in _model_blobs(model))
    head = MODEL_MAGIC + struct.pack("<BBI", MODEL_VERSION, KIND_PLAIN_MODEL, len(manifest))
    Path(path).write_bytes(head + manifest + body)


def _read_container(path: str | Path, expected_kind: int) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise HecnnError(f"{path}: not a model container")
    version, kind, mlen = struct.unpack_from("<BBI", data, 8)
    if version != MODEL_VERSION:
        raise HecnnError(f"unsupported model container version {version}")
    if kind != expected_kind:
        raise HecnnError(f"{path}: container kind {kind}, expected {expected_kind}")
    manifest = json.loads(data[14 : 14 + mlen])
    return manifest, data[14 + mlen :]


def load_model(path: str | Path) -> ModelDesc:
    manifest, body = _read_container(path, KIND_PLAIN_MODEL)
    m, n = manifest["input_dims"]
    offset = 0

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
        return arr

    layers: list[Layer] = []
    for spec in manifest["layers"]:
        kind = spec.get("kind")
        if kind == "conv2d":
            f = spec["filters"]
            p, q = spec["kernel"]
            weights = take((f, p, q))
            bias = take((f,)) if spec["has_bias"] else None
            layers.append(Conv2dLayer(filters=f, kernel=(p, q), weights=weights, bias=bias))
        elif kind == "actpool":
            layers.append(
                ActPoolLayer(
                    act=PolyActivation(
                        a0=spec["a0"], a1=spec["a1"], a2=spec["a2"], input_scale=spec["input_scale"]
                    )
                )
            )
        elif kind == "flatten":
            layers.append(FlattenLayer())
        elif kind == "dense":
            weights = take((spec["in_dim"], spec["out_dim"]))
            bias = take((spec["out_dim"],)) if spec["has_bias"] else None
            layers.append(
                DenseLayer(
                    in_dim=spec["in_dim"], out_dim=spec["out_dim"], weights=weights, bias=bias
                )
            )
        else:
            raise ModelValidationError(f"unknown layer kind {kind!r}")
    return ModelDesc(input_dims=(m, n), layers=tuple(layers))


# ---------------------------------------------------------------------------
# Encrypted model
# ---------------------------------------------------------------------------


@dataclass
class EncryptedModel:
    """Architecture in the clear, every weight broadcast-encrypted."""

    model: ModelDesc  # weights in this copy are zeroed out
    fingerprint: bytes
    conv_kernels: list[CipherKernel]
    dense_weights: list[list[CipherVec]] | None
    dense_bias: list[CipherVec] | None
    cipher_counts: dict[str, int]

    @property
    def batch_dims(self) -> tuple[int, int]:
        return self.model.input_dims


def _strip_weights(model: ModelDesc) -> ModelDesc:
    layers: list[Layer] = []
    for layer in model.layers:
        if isinstance(layer, Conv2dLayer):
            layers.append(
                Conv2dLayer(
                    filters=layer.filters,
                    kernel=layer.kernel,
                    weights=np.zeros_like(layer.weights),
                    bias=np.zeros_like(layer.bias) if layer.bias is not None else None,
                )
            )
        elif isinstance(layer, DenseLayer):
            layers.append(
                DenseLayer(
                    in_dim=layer.in_dim,
                    out_dim=layer.out_dim,
                    weights=np.zeros_like(layer.weights),
                    bias=np.zeros_like(layer.bias) if layer.bias is not None else None,
                )
            )
        else:
            layers.append(layer)
    return ModelDesc(input_dims=model.input_dims, layers=tuple(layers))


def encrypt_model(backend: HEBackend, model: ModelDesc, key: KeyMaterial) -> EncryptedModel:
    """Model-owner flow: broadcast-encrypt every weight under the user's key.

    Bias ciphertexts are encrypted directly at the scale the pipeline will
    carry at their point of use (derived from the deterministic level/scale
    ledger), so bias additions never trigger scale alignment.  Every
    ciphertext is also dropped to the level of its use site — operations
    would align it down anyway, and the dense-layer weights dominate the
    container, so shedding their unused modulus primes shrinks it several
    fold at no cost.
    """
    trace = pipeline_trace(model, backend.chain, backend.canonical_scale)
    by_layer = {step["layer"]: step for step in trace}
    in_level = {
        step["layer"]: trace[i - 1]["level"] for i, step in enumerate(trace) if i > 0
    }
    counts = {"conv_weight": 0, "conv_bias": 0, "dense_weight": 0, "dense_bias": 0}

    def enc_at(value: float, scale=None, level: int | None = None):
        ct = backend.encrypt(np.full(backend.slots, float(value)), key, scale=scale)
        return ct if level is None else backend.drop_to_level(ct, level)

    conv_kernels: list[CipherKernel] = []
    conv = model.conv()
    if conv is not None:
        conv_scale = by_layer["conv2d"]["scale"]
        conv_out_level = by_layer["conv2d"]["level"]
        for f in range(conv.filters):
            grid = [
                [enc_at(conv.weights[f, p, q]) for q in range(conv.kernel[1])]
                for p in range(conv.kernel[0])
            ]
            counts["conv_weight"] += conv.kernel[0] * conv.kernel[1]
            bias_ct = None
            if conv.bias is not None:
                bias_ct = enc_at(conv.bias[f], scale=conv_scale, level=conv_out_level)
                counts["conv_bias"] += 1
            conv_kernels.append(CipherKernel(grid=grid, bias=bias_ct))

    dense_w = None
    dense_b = None
    dense = model.dense()
    if dense is not None:
        dense_scale = by_layer["dense"]["scale"]
        dense_in_level = in_level["dense"]
        dense_out_level = by_layer["dense"]["level"]
        dense_w = [
            [enc_at(dense.weights[i, r], level=dense_in_level) for r in range(dense.out_dim)]
            for i in range(dense.in_dim)
        ]
        counts["dense_weight"] = dense.in_dim * dense.out_dim
        if dense.bias is not None:
            dense_b = [
                enc_at(dense.bias[r], scale=dense_scale, level=dense_out_level)
                for r in range(dense.out_dim)
            ]
            counts["dense_bias"] = dense.out_dim

    counts["total"] = sum(counts.values())
    return EncryptedModel(
        model=_strip_weights(model),
        fingerprint=backend.fingerprint,
        conv_kernels=conv_kernels,
        dense_weights=dense_w,
        dense_bias=dense_b,
        cipher_counts=counts,
    )


def save_encrypted_model(backend: HEBackend, enc: EncryptedModel, path: str | Path) -> None:
    """Container: clear manifest (architecture only) + ciphertext records."""
    manifest = _manifest_of(enc.model)
    manifest["fingerprint"] = enc.fingerprint.hex()
    manifest["backend"] = backend.name
    manifest["params"] = list(backend.params.public_triple())
    manifest["cipher_counts"] = enc.cipher_counts
    mbytes = _manifest_bytes(manifest)

    records: list[bytes] = []
    for kern in enc.conv_kernels:
        for row in kern.grid:
            for ct in row:
                records.append(ser.cipher_record(backend, ct))
        if kern.bias is not None:
            records.append(ser.cipher_record(backend, kern.bias))
    if enc.dense_weights is not None:
        for row in enc.dense_weights:
            for ct in row:
                records.append(ser.cipher_record(backend, ct))
    if enc.dense_bias is not None:
        for ct in enc.dense_bias:
            records.append(ser.cipher_record(backend, ct))

    head = MODEL_MAGIC + struct.pack("<BBI", MODEL_VERSION, KIND_ENC_MODEL, len(mbytes))
    Path(path).write_bytes(head + mbytes + b"".join(records))


def load_encrypted_model(backend: HEBackend, path: str | Path) -> EncryptedModel:
    manifest, body = _read_container(path, KIND_ENC_MODEL)
    if manifest["backend"] != backend.name:
        raise HecnnError(
            f"encrypted model was built for backend {manifest['backend']!r}"
        )
    fingerprint = bytes.fromhex(manifest["fingerprint"])
    if fingerprint != backend.fingerprint:
        raise HecnnError(
            "encrypted model belongs to a different key family; "
            "build the context from the matching public material first"
        )

    m, n = manifest["input_dims"]
    layers: list[Layer] = []
    offset = 0

    def next_ct() -> CipherVec:
        nonlocal offset
        ct, offset = ser.cipher_from_record(backend, body, offset)
        return ct

    conv_kernels: list[CipherKernel] = []
    dense_w = None
    dense_b = None
    for spec in manifest["layers"]:
        kind = spec["kind"]
        if kind == "conv2d":
            f = spec["filters"]
            p, q = spec["kernel"]
            layers.append(
                Conv2dLayer(
                    filters=f,
                    kernel=(p, q),
                    weights=np.zeros((f, p, q)),
                    bias=np.zeros(f) if spec["has_bias"] else None,
                )
            )
            for _ in range(f):
                grid = [[next_ct() for _ in range(q)] for _ in range(p)]
                bias_ct = next_ct() if spec["has_bias"] else None
                conv_kernels.append(CipherKernel(grid=grid, bias=bias_ct))
        elif kind == "actpool":
            layers.append(
                ActPoolLayer(
                    act=PolyActivation(
                        a0=spec["a0"], a1=spec["a1"], a2=spec["a2"], input_scale=spec["input_scale"]
                    )
                )
            )
        elif kind == "flatten":
            layers.append(FlattenLayer())
        elif kind == "dense":
            in_dim, out_dim = spec["in_dim"], spec["out_dim"]
            layers.append(
                DenseLayer(
                    in_dim=in_dim,
                    out_dim=out_dim,
                    weights=np.zeros((in_dim, out_dim)),
                    bias=np.zeros(out_dim) if spec["has_bias"] else None,
                )
            )
            dense_w = [[next_ct() for _ in range(out_dim)] for _ in range(in_dim)]
            if spec["has_bias"]:
                dense_b = [next_ct() for _ in range(out_dim)]
    model = ModelDesc(input_dims=(m, n), layers=tuple(layers))
    return EncryptedModel(
        model=model,
        fingerprint=fingerprint,
        conv_kernels=conv_kernels,
        dense_weights=dense_w,
        dense_bias=dense_b,
        cipher_counts=manifest["cipher_counts"],
    )


def random_model(
    input_dims: tuple[int, int] = (16, 16),
    filters: int = 4,
    kernel: tuple[int, int] = (3, 3),
    classes: int = 10,
    input_scale: float = 1.0,
    seed: int = 0,
    conv_bias: bool = False,
    weight_span: float = 0.25,
) -> ModelDesc:
    """Small random-weight model with the canonical topology (test fixture)."""
    rng = np.random.default_rng(seed)
    m, n = input_dims
    p, q = kernel
    om, on = m - p + 1, n - q + 1
    flat = (om // 2) * (on // 2) * filters
    conv = Conv2dLayer(
        filters=filters,
        kernel=kernel,
        weights=rng.uniform(-weight_span, weight_span, (filters, p, q)),
        bias=rng.uniform(-weight_span, weight_span, filters) if conv_bias else None,
    )
    dense = DenseLayer(
        in_dim=flat,
        out_dim=classes,
        weights=rng.uniform(-weight_span, weight_span, (flat, classes)),
        bias=rng.uniform(-weight_span, weight_span, classes),
    )
    return ModelDesc(
        input_dims=input_dims,
        layers=(conv, ActPoolLayer(act=PolyActivation(input_scale=input_scale)), FlattenLayer(), dense),
    )
