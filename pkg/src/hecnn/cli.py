"""Command-line surface for the three-party encrypted inference workflow.

Roles: the end user runs ``keygen`` and keeps the secret key, sharing the
public and evaluation keys; the model owner runs ``encrypt-model`` under the
user's public key; the untrusted server runs ``infer`` holding only public
material; the user runs ``decrypt-output``/``predict`` on the result.
``predict`` reports the per-image argmax of the final layer directly; the
monotone softmax is never computed.

``analyze`` prints the static cost report for a model, and ``bench-params``/
``bench-threads`` reproduce the parameter and thread-plan sweeps as CSV.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from hecnn import bench as bench_mod
from hecnn import packing, serialization as ser
from hecnn.analyzer import analyze
from hecnn.backends import get_backend
from hecnn.errors import HecnnError
from hecnn.executor import ThreadPlan, default_plan, run_inference
from hecnn.model import (
    encrypt_model,
    load_encrypted_model,
    load_model,
    save_encrypted_model,
)
from hecnn.params import check_security_gate, derive_params


def parse_int_pow(text: str) -> int:
    """Parse an integer, allowing 2^k / 2**k notation for ring sizes."""
    text = text.strip()
    for sep in ("^", "**"):
        if sep in text:
            base, exp = text.split(sep, 1)
            return int(base) ** int(exp)
    return int(text)


def parse_params_triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError("--params expects 'm,L,r' (m may use 2^k notation)")
    return parse_int_pow(parts[0]), int(parts[1]), int(parts[2])


def _context_from_file(path: str, backend_name: str | None, seed: int = 0):
    """Rebuild a backend context from any envelope file and join its key family."""
    env = ser.peek_params(path)
    name = backend_name or env.backend_name
    backend = get_backend(name, env.derive_params(seed=seed))
    backend.adopt_fingerprint(env.fingerprint)
    return backend


def _load_role_key(backend, path: str, role: str):
    got_role, key = ser.load_key(backend, path)
    if got_role != role:
        raise HecnnError(f"{path} contains a {got_role} key, expected {role}")
    return key


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    m, l_bits, r = parse_params_triple(args.params)
    params = derive_params(m, l_bits, r, seed=args.seed)
    est = check_security_gate(params, args.allow_insecure)
    backend = get_backend(args.backend, params)
    keys = backend.keygen()
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    ser.save_key(backend, keys, "secret", f"{prefix}.secret.hek")
    ser.save_key(backend, keys, "public", f"{prefix}.public.hek")
    ser.save_key(backend, keys, "evaluation", f"{prefix}.eval.hek")
    lam = "unknown" if est.lam is None else f"~{est.lam:.0f} bits"
    print(f"wrote {prefix}.{{secret,public,eval}}.hek")
    print(f"slots: {params.slots}  levels: {backend.fresh_level}  security: {lam}")
    print(f"fingerprint: {keys.fingerprint.hex()}")
    return 0


def cmd_encrypt_model(args) -> int:
    backend = _context_from_file(args.public_key, args.backend)
    pk = _load_role_key(backend, args.public_key, "public")
    model = load_model(args.model)
    enc = encrypt_model(backend, model, pk)
    save_encrypted_model(backend, enc, args.out)
    print(f"wrote {args.out}")
    for kind, count in enc.cipher_counts.items():
        print(f"  {kind} ciphertexts: {count}")
    return 0


def cmd_encrypt_input(args) -> int:
    backend = _context_from_file(args.public_key, args.backend)
    pk = _load_role_key(backend, args.public_key, "public")
    images = np.load(args.images)
    if images.ndim == 2:
        images = images[None]
    if args.batch is not None:
        images = images[: args.batch]
    if images.shape[0] > backend.slots:
        raise HecnnError(
            f"batch {images.shape[0]} exceeds {backend.slots} slots; pass --batch"
        )
    lo, hi = float(images.min()), float(images.max())
    if lo < 0.0 or hi > 1.0:
        raise HecnnError(f"images must be normalized to [0, 1]; got range [{lo}, {hi}]")
    cm = packing.pack_batch(backend, packing.ImageBatch(images=images), pk, workers=args.workers)
    packing.save_matrix(backend, cm, args.out)
    m, n = cm.dims
    print(f"wrote {args.out}: {m}x{n} grid = {m * n} ciphertexts, batch {cm.batch}")
    return 0


def cmd_infer(args) -> int:
    backend = _context_from_file(args.eval_key, args.backend)
    evk = _load_role_key(backend, args.eval_key, "evaluation")
    backend.set_eval_key(evk)
    enc_model = load_encrypted_model(backend, args.model)
    enc_input = packing.load_matrix(backend, args.input)
    conv = enc_model.model.conv()
    dense = enc_model.model.dense()
    if args.plan:
        plan = ThreadPlan.parse(args.plan, max_workers=args.workers)
    else:
        plan = default_plan(
            conv.filters if conv else 1,
            dense.out_dim if dense else 1,
            args.workers or 1,
        )
    result = run_inference(backend, enc_model, enc_input, plan)
    packing.save_cipher_list(backend, result.logits, result.batch, args.out)
    print(f"wrote {args.out} ({len(result.logits)} logit ciphertexts, batch {result.batch})")
    print(f"plan F,C,H,J = {result.plan}  workers high-water: {result.workers_high_water}")
    for stage, secs in result.stage_seconds.items():
        print(f"  {stage}: {secs:.3f} s")
    print(f"total: {result.total_seconds:.3f} s")
    print(f"amortized per image: {result.amortized_seconds * 1e3:.3f} ms")
    return 0


def _decrypt_logits(args):
    backend = _context_from_file(args.output, args.backend)
    sk = _load_role_key(backend, args.secret_key, "secret")
    cts, batch = packing.load_cipher_list(backend, args.output)
    return packing.unpack_logits(backend, cts, sk, batch)


def cmd_decrypt_output(args) -> int:
    logits = _decrypt_logits(args)
    if args.out.endswith(".csv"):
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"logit_{r}" for r in range(logits.shape[1])])
            writer.writerows(logits.tolist())
    else:
        np.save(args.out, logits)
    print(f"wrote {args.out}: logits shape {logits.shape}")
    return 0


def cmd_predict(args) -> int:
    logits = _decrypt_logits(args)
    classes = np.argmax(logits, axis=1)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "predicted_class"])
            writer.writerows([[i, int(c)] for i, c in enumerate(classes)])
        print(f"wrote {args.out}")
    else:
        for i, c in enumerate(classes):
            print(f"image {i}: class {int(c)}")
    return 0


def cmd_analyze(args) -> int:
    m, l_bits, r = parse_params_triple(args.params)
    params = derive_params(m, l_bits, r)
    model = load_model(args.model)
    report = analyze(model, params)
    print(report.table(), end="")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            rows = report.csv_rows()
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {args.csv}")
    return 0


def cmd_bench_params(args) -> int:
    m = parse_int_pow(args.m)
    l_values = [int(x) for x in args.l_values.split(",")]
    for l_bits in l_values:
        check_security_gate(derive_params(m, l_bits, args.r), args.allow_insecure)
    records = bench_mod.bench_params(
        m, args.r, l_values, trials=args.trials, seed=args.seed, backend_name=args.backend
    )
    bench_mod.write_param_csv(records, args.out)
    print(f"wrote {args.out} ({len(records)} records)")
    return 0


def cmd_bench_threads(args) -> int:
    m, l_bits, r = parse_params_triple(args.params)
    params = derive_params(m, l_bits, r, seed=args.seed)
    check_security_gate(params, args.allow_insecure)
    backend = get_backend(args.backend, params)
    keys = backend.keygen()
    backend.set_eval_key(keys)
    model = load_model(args.model)
    enc = encrypt_model(backend, model, keys)
    rng = np.random.default_rng(args.seed)
    images = rng.uniform(0.0, 1.0, (args.batch, *model.input_dims))
    cm = packing.pack_batch(backend, packing.ImageBatch(images=images), keys)
    plans = [ThreadPlan.parse(p) for p in args.plans.split(";") if p]
    results = bench_mod.bench_threads(backend, enc, cm, plans)
    bench_mod.write_thread_csv(results, args.out)
    for plan, res in results:
        print(
            f"plan {plan}: total {res.total_seconds:.3f} s, "
            f"amortized {res.amortized_seconds * 1e3:.3f} ms/image, "
            f"high-water {res.workers_high_water}"
        )
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hecnn", description="Encrypted CNN inference on slot-packed ciphertexts"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, backend_default=None):
        p.add_argument("--backend", choices=["ckks", "ref"], default=backend_default)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("keygen", help="generate secret/public/evaluation keys")
    p.add_argument(
        "--params",
        default="2^14,200,35",
        help="m,L,r (m may use 2^k); the desk-scale default stays at 128-bit security",
    )
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--allow-insecure", action="store_true")
    add_common(p, backend_default="ckks")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("encrypt-model", help="model owner: encrypt weights under the user's key")
    p.add_argument("--model", required=True)
    p.add_argument("--public-key", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_encrypt_model)

    p = sub.add_parser("encrypt-input", help="end user: pack and encrypt an image batch")
    p.add_argument("--images", required=True, help=".npy of shape (B, M, N), values in [0,1]")
    p.add_argument("--public-key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    add_common(p)
    p.set_defaults(func=cmd_encrypt_input)

    p = sub.add_parser("infer", help="server: run the encrypted pipeline (no secret key)")
    p.add_argument("--model", required=True, help="encrypted model container")
    p.add_argument("--input", required=True)
    p.add_argument("--eval-key", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plan", default=None, help="F,C,H,J")
    p.add_argument("--workers", type=int, default=None)
    add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decrypt-output", help="end user: decrypt logits")
    p.add_argument("--output", required=True)
    p.add_argument("--secret-key", required=True)
    p.add_argument("--out", required=True, help=".npy or .csv")
    add_common(p)
    p.set_defaults(func=cmd_decrypt_output)

    p = sub.add_parser("predict", help="decrypt + per-image argmax (softmax not needed)")
    p.add_argument("--output", required=True)
    p.add_argument("--secret-key", required=True)
    p.add_argument("--out", default=None, help="optional CSV")
    add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("analyze", help="static depth/cost report for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench-params", help="sweep L: op timings, ciphertext size, security")
    p.add_argument("--m", required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--l-values", required=True, help="comma-separated L values")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-insecure", action="store_true")
    add_common(p, backend_default="ckks")
    p.set_defaults(func=cmd_bench_params)

    p = sub.add_parser("bench-threads", help="sweep thread plans on a model")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--plans", required=True, help="semicolon-separated F,C,H,J plans")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-insecure", action="store_true")
    add_common(p, backend_default="ckks")
    p.set_defaults(func=cmd_bench_threads)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (HecnnError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
