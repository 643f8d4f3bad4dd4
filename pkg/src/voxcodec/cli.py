"""Command-line surface: encode/decode sequences, evaluate metrics, emit RD
CSV and BD-rate tables, run self-tests and gradient checks.

Exit codes: 0 ok, 2 missing weights/model, 3 malformed input, 4 missing
reference frame state, 5 original/decoded count mismatch, 6 too few curve
points.  All outputs are deterministic given (inputs, weights, seed).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import codec, gradcheck, metrics, octree, synthetic
from . import entropy as ent
from .errors import VoxCodecError
from .nn import ConvSpec, sparse_conv
from .motion import adaptive_interpolate
from .ply import load_ply, write_frame
from .sparse import SparseTensor
from .weights import WeightStore, entropy_models, make_weights, validate_store

EXIT_OK = 0
EXIT_NO_WEIGHTS = 2
EXIT_BAD_INPUT = 3
EXIT_NO_REFERENCE = 4
EXIT_COUNT_MISMATCH = 5
EXIT_FEW_POINTS = 6

_CONFIG_KEYS = {"alpha", "lambda", "plan", "gop"}


def _load_config(path):
    """Plain key=value config; unknown keys are rejected."""
    values = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VoxCodecError(f"config line {ln}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise VoxCodecError(f"config line {ln}: unknown key '{key}'")
        values[key] = val
    return values


def _resolve_weights(args):
    path = args.weights or os.environ.get("DDPC_WEIGHTS")
    if not path or not Path(path).is_file():
        print("error: no weight file (use --weights or DDPC_WEIGHTS)", file=sys.stderr)
        raise SystemExit(EXIT_NO_WEIGHTS)
    try:
        store = WeightStore.load(path)
        validate_store(store)
        models = entropy_models(store)
    except VoxCodecError as exc:
        print(f"error: unusable weight file: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_NO_WEIGHTS)
    return store, models


def _apply_config(args):
    if getattr(args, "config", None):
        cfg = _load_config(args.config)
        if "alpha" in cfg:
            args.alpha = float(cfg["alpha"])
        if "lambda" in cfg:
            args.lam = int(cfg["lambda"])
        if "gop" in cfg:
            args.gop = int(cfg["gop"])
    if args.lam not in codec.LAMBDA_TAGS:
        raise VoxCodecError(f"lambda must be one of {codec.LAMBDA_TAGS}")


def _input_frames(args):
    if args.synthetic:
        n, nframes, translation = synthetic.parse_synthetic_spec(args.synthetic)
        return synthetic.make_rigid_sequence(n, nframes, translation, args.precision, args.seed)
    frames = []
    for p in args.inputs:
        frames.append(load_ply(p, args.precision))
    if not frames:
        raise VoxCodecError("no input frames")
    return frames


def cmd_encode(args) -> int:
    store, models = _resolve_weights(args)
    try:
        _apply_config(args)
        frames = _input_frames(args)
    except VoxCodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    gop = args.gop if args.gop > 0 else len(frames)
    manifest = {
        "alpha": args.alpha,
        "lambda": args.lam,
        "precision_bits": args.precision,
        "gop": gop,
        "latent_carry": bool(args.latent_carry),
        "transmit_c3": bool(args.transmit_c3),
        "frames": [],
    }
    prev_latent = None
    total_bits = 0.0
    total_points = 0
    for i, frame in enumerate(frames):
        intra = (i % gop == 0) or prev_latent is None
        if intra:
            bs, result = codec.encode_intra(
                frame, models, store, lam=args.lam,
                transmit_c3=args.transmit_c3, latent_carry=args.latent_carry)
        else:
            bs, result = codec.encode_inter(
                frame, prev_latent, models, store, alpha=args.alpha, lam=args.lam,
                transmit_c3=args.transmit_c3, latent_carry=args.latent_carry)
        prev_latent = result.reference_latent
        name = f"frame{i:04d}.ddpc"
        (outdir / name).write_bytes(codec.serialize(bs))
        frame_bits = 8 * bs.payload_bytes()
        frame_bpp = metrics.bpp(frame_bits, frame.n)
        manifest["frames"].append(
            {"file": name, "type": "I" if intra else "P",
             "n_points": frame.n, "payload_bytes": bs.payload_bytes(),
             "bpp": frame_bpp})
        total_bits += frame_bits
        total_points += frame.n
        print(f"frame {i:4d} {'I' if intra else 'P'} points={frame.n} bpp={frame_bpp:.6f}")
    manifest["total_bpp"] = total_bits / total_points
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"total bpp={manifest['total_bpp']:.6f} over {total_points} points")
    return EXIT_OK


def cmd_decode(args) -> int:
    store, models = _resolve_weights(args)
    manifest_path = Path(args.manifest)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: bad manifest: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    prev_latent = None
    alpha = float(manifest.get("alpha", args.alpha))
    carry = bool(manifest.get("latent_carry", False))
    for i, entry in enumerate(manifest["frames"]):
        data = (manifest_path.parent / entry["file"]).read_bytes()
        try:
            bs = codec.parse(data)
            result = codec.decode(bs, prev_latent, models, store, alpha=alpha,
                                  latent_carry=carry)
        except VoxCodecError as exc:
            print(f"error: frame {i}: {exc}", file=sys.stderr)
            return EXIT_NO_REFERENCE if "previous decoded latent" in str(exc) else EXIT_BAD_INPUT
        prev_latent = result.reference_latent
        out = outdir / (Path(entry["file"]).stem + ".ply")
        write_frame(out, result.decoded)
        print(f"frame {i:4d} -> {out.name} points={result.decoded.n}")
    return EXIT_OK


CSV_HEADER = "sequence,frame,lambda,bpp,d1_db,d2_db"


def _fmt(x: float) -> str:
    return "inf" if np.isinf(x) else repr(float(x))


def cmd_eval(args) -> int:
    try:
        _apply_config(args)
        originals = _input_frames(args)
    except VoxCodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    decoded_paths = sorted(Path(args.decoded).glob("*.ply"))
    if len(decoded_paths) != len(originals):
        print(f"error: {len(originals)} originals vs {len(decoded_paths)} decoded frames",
              file=sys.stderr)
        return EXIT_COUNT_MISMATCH
    manifest = json.loads((Path(args.decoded).parent / "manifest.json").read_text()) \
        if args.bitstream_dir is None else \
        json.loads((Path(args.bitstream_dir) / "manifest.json").read_text())
    rows = []
    for i, (orig, dec_path) in enumerate(zip(originals, decoded_paths)):
        dec = load_ply(dec_path, args.precision)
        bpp = manifest["frames"][i]["bpp"]
        d1 = metrics.d1_psnr(orig, dec, peak=args.peak)
        d2 = metrics.d2_psnr(orig, dec, peak=args.peak)
        rows.append(f"{args.sequence},{i},{args.lam},{_fmt(bpp)},{_fmt(d1)},{_fmt(d2)}")
        print(rows[-1])
    out = Path(args.csv)
    new = not out.exists()
    with open(out, "a") as fh:
        if new:
            fh.write(CSV_HEADER + "\n")
        fh.write("\n".join(rows) + "\n")
    return EXIT_OK


def _read_curve(path):
    rows = Path(path).read_text().strip().splitlines()
    if rows and rows[0].strip() == CSV_HEADER:
        rows = rows[1:]
    pts = []
    for row in rows:
        seq, frame, lam, bpp, d1, d2 = row.split(",")
        pts.append((float(bpp), float(d1), float(d2)))
    # average frames per lambda is the caller's concern; points come as rows
    return pts


def cmd_rdcsv(args) -> int:
    try:
        a = _read_curve(args.curve_a)
        b = _read_curve(args.curve_b)
        bd_d1 = metrics.bd_rate([(p[0], p[1]) for p in a], [(p[0], p[1]) for p in b])
        bd_d2 = metrics.bd_rate([(p[0], p[2]) for p in a], [(p[0], p[2]) for p in b])
    except VoxCodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FEW_POINTS
    print(f"bd_rate_d1_percent={bd_d1:.4f}")
    print(f"bd_rate_d2_percent={bd_d2:.4f}")
    if args.svg:
        _write_svg(args.svg, a, b)
        print(f"wrote {args.svg}")
    return EXIT_OK


def _write_svg(path, curve_a, curve_b):
    w, h, pad = 640, 480, 50
    pts = curve_a + curve_b
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    sx = lambda x: pad + (w - 2 * pad) * (0.5 if x1 == x0 else (x - x0) / (x1 - x0))
    sy = lambda y: h - pad - (h - 2 * pad) * (0.5 if y1 == y0 else (y - y0) / (y1 - y0))

    def poly(curve, color):
        p = sorted(curve)
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y, *_ in p)
        return (f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>'
                + "".join(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>'
                          for x, y, *_ in p))

    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
        f'<rect width="{w}" height="{h}" fill="white"/>'
        f'<line x1="{pad}" y1="{h-pad}" x2="{w-pad}" y2="{h-pad}" stroke="black"/>'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h-pad}" stroke="black"/>'
        f'<text x="{w//2}" y="{h-12}" text-anchor="middle" font-size="12">bpp</text>'
        f'<text x="14" y="{h//2}" font-size="12" transform="rotate(-90 14 {h//2})" '
        f'text-anchor="middle">D1 PSNR (dB)</text>'
        + poly(curve_a, "#1f77b4") + poly(curve_b, "#d62728")
        + "</svg>"
    )
    Path(path).write_text(svg + "\n")


def cmd_gradcheck(args) -> int:
    reports, failures = gradcheck.run_all(args.instances, args.seed)
    print(f"{'op':24s} {'max rel err':>12s} {'tol':>8s} result")
    for rep in reports:
        status = "pass" if rep.max_rel_error <= rep.tolerance else "FAIL"
        print(f"{rep.op:24s} {rep.max_rel_error:12.3e} {rep.tolerance:8.0e} {status}")
    for name, seed, err in failures:
        print(f"failing seed: {name} seed={seed} rel_err={err:.3e}")
    return EXIT_OK if not failures else 1


def cmd_selftest(args) -> int:
    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"selftest {name}: ok")
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures.append(name)
            print(f"selftest {name}: FAILED ({exc})")

    rng = np.random.Generator(np.random.PCG64(args.seed))

    def entropy_roundtrip():
        pmfs = [rng.uniform(0.5, 2.0, 9) for _ in range(4)]
        model = ent.build_table_from_pmf(pmfs, [-4] * 4, escape_mass=1e-3)
        syms = rng.integers(-6, 7, size=(500, 4))
        data = ent.range_encode(syms, model)
        assert np.array_equal(ent.range_decode(data, model, 500), syms)

    def octree_roundtrip():
        coords = np.unique(rng.integers(0, 64, size=(300, 3)), axis=0)
        stream = octree.octree_encode(coords, 6)
        back = octree.octree_decode(stream)
        assert np.array_equal(back, np.array(sorted(map(tuple, coords)), dtype=np.int32))

    def conv_oracle():
        spec = ConvSpec(2, 3, 3)
        coords = np.array(sorted({tuple(rng.integers(0, 6, 3)) for _ in range(12)}))
        x = SparseTensor.build(coords, rng.normal(size=(len(coords), 2)).astype(np.float32), 0)
        wgt = rng.normal(size=spec.weight_shape).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        out = sparse_conv(x, spec, wgt, b)
        offs = spec.offsets()
        for j, c in enumerate(out.coords):
            acc = b.astype(np.float64).copy()
            for o, off in enumerate(offs):
                pos = c + off
                hit = np.where((x.coords == pos).all(axis=1))[0]
                if hit.size:
                    acc += x.feats[hit[0]].astype(np.float64) @ wgt[o].astype(np.float64)
            assert np.allclose(out.feats[j], acc, atol=1e-5)

    def interpolation_cases():
        # three neighbours at squared distance 2, features 1,2,3, alpha 3:
        # the weight sum 1.5 is below alpha, so the mean shrinks to 1
        ref = SparseTensor.build(
            [[1, 1, 0], [1, 0, 1], [0, 1, 1]], [[1.0], [2.0], [3.0]], scale=2)
        m = SparseTensor.build([[0, 0, 0]], np.zeros((1, 3), np.float32), scale=2)
        out = adaptive_interpolate(m, ref, 3.0)
        assert abs(out.feats[0, 0] - 1.0) < 1e-6

    def gradcheck_smoke():
        _, failures = gradcheck.run_all(5, args.seed)
        assert not failures

    check("entropy-roundtrip", entropy_roundtrip)
    check("octree-roundtrip", octree_roundtrip)
    check("conv-dense-oracle", conv_oracle)
    check("interpolation-hand-cases", interpolation_cases)
    check("gradcheck-smoke", gradcheck_smoke)
    return EXIT_OK if not failures else 1


def cmd_make_weights(args) -> int:
    store = make_weights(args.seed, profile=args.profile)
    store.save(args.output)
    print(f"wrote {args.output} (seed={args.seed}, profile={args.profile})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxcodec", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, weights=True):
        if weights:
            p.add_argument("--weights", help="DPCW weight file (or DDPC_WEIGHTS env)")
        p.add_argument("--lambda", dest="lam", type=int, default=3,
                       choices=codec.LAMBDA_TAGS, help="rate-point tag")
        p.add_argument("--alpha", type=float, default=3.0,
                       help="interpolation isolation penalty")
        p.add_argument("--precision", type=int, default=7, help="coordinate bits")
        p.add_argument("--gop", type=int, default=0,
                       help="frames per intra period (0 = whole sequence)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--transmit-c3", action="store_true",
                       help="also transmit the scale-3 coordinate set")
        p.add_argument("--latent-carry", action="store_true",
                       help="reuse the decoded latent instead of re-extracting")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("encode", help="encode a PLY sequence (or synthetic)")
    common(p)
    p.add_argument("--synthetic", help="rigid:N,frames,translation")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("inputs", nargs="*", help="input PLY frames in order")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="decode a manifest to PLY frames")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="compute bpp/D1/D2 against originals")
    common(p, weights=False)
    p.add_argument("--synthetic", help="rigid:N,frames,translation")
    p.add_argument("--decoded", required=True, help="directory of decoded PLYs")
    p.add_argument("--bitstream-dir", default=None,
                   help="directory holding manifest.json (default: decoded/..)")
    p.add_argument("--csv", required=True, help="CSV to append rows to")
    p.add_argument("--sequence", default="seq")
    p.add_argument("--peak", type=int, default=metrics.DEFAULT_PEAK)
    p.add_argument("inputs", nargs="*", help="original PLY frames in order")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rdcsv", help="BD-rate between two RD CSV curves")
    p.add_argument("curve_a", help="reference curve CSV")
    p.add_argument("curve_b", help="candidate curve CSV")
    p.add_argument("--svg", help="write an SVG plot")
    p.set_defaults(fn=cmd_rdcsv)

    p = sub.add_parser("selftest", help="run built-in fixture checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("make-weights", help="emit a seeded-random weight file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", default="random", choices=("random", "surrogate"))
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_make_weights)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:  # argparse errors and hard exits carry the code
        return int(exc.code or 0)
    except VoxCodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
