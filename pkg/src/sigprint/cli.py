"""Command-line entry point: phantom, extract, pairwise, curate, selftest.

Exit codes: 0 success, 1 data error, 2 usage error. Every artifact gets a
``<artifact>.manifest.json`` sidecar recording the tool version, resolved
parameters, input checksums and seeds.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .curation import (
    CohortMetadata,
    OutlierRules,
    age_difference_buckets,
    flag_outliers,
    ks_table,
    label_pairs,
    report_dict,
    report_json,
    report_text,
    sha256_file,
    summarize,
)
from .descriptor import extract_signature, load_signature, save_signature
from .errors import EmptyCollection, IoFailure, MissingMetadata, SigprintError
from .jaccard import SoftJaccardParams, pairwise_matrix, read_matrix_csv
from .scalespace import ScaleSpaceParams
from .volume import PhantomSpec, load_volume, make_phantom, observe, save_volume

THREADS_ENV = "SIGPRINT_THREADS"


class UsageError(Exception):
    pass


def _set_threads(requested: int | None) -> int:
    import numba

    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            requested = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    limit = numba.config.NUMBA_NUM_THREADS
    n = limit if not requested or requested < 1 else min(requested, limit)
    numba.set_num_threads(n)
    return n


def _prepare_out(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path.parent}: {exc}") from exc
    return path


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        _prepare_out(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def manifest_path(artifact) -> Path:
    p = Path(artifact)
    return p.with_name(p.name + ".manifest.json")


def write_manifest(artifact, command: str, params: dict, inputs: dict, seeds: dict, timestamp: bool) -> Path:
    """Sidecar for ``artifact``; inputs map a label to a file path, recorded by sha256."""
    doc = {
        "tool": "sigprint",
        "version": __version__,
        "command": command,
        "parameters": params,
        "seeds": seeds,
        "inputs": {k: {"name": Path(v).name, "sha256": sha256_file(v)} for k, v in sorted(inputs.items())},
        "output": {"name": Path(artifact).name, "sha256": sha256_file(artifact)},
    }
    if timestamp:
        doc["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    out = manifest_path(artifact)
    _write_bytes(out, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return out


def _scale_params(args) -> ScaleSpaceParams:
    return ScaleSpaceParams(
        base_sigma=args.base_sigma,
        scales_per_octave=args.scales,
        num_octaves=args.octaves,
        contrast_threshold=args.contrast,
        edge_ratio_threshold=args.edge_ratio,
    )


def cmd_phantom(args) -> int:
    if args.blobs < 0:
        raise UsageError("--blobs must be >= 0")
    spec = PhantomSpec(seed=args.seed, num_blobs=args.blobs, noise_sigma=args.noise, dims=tuple(args.dims))
    vol = make_phantom(spec)
    params = {"num_blobs": spec.num_blobs, "blob_scale_range": list(spec.blob_scale_range),
              "intensity_range": list(spec.intensity_range), "noise_sigma": spec.noise_sigma,
              "dims": list(spec.dims), "spacing": list(spec.spacing), "support_fraction": spec.support_fraction}
    seeds = {"phantom": args.seed}
    if args.view_seed is not None:
        vol, t = observe(vol, np.random.default_rng(args.view_seed), noise_fraction=args.view_noise)
        params["view"] = {"noise_fraction": args.view_noise, "scale": t.scale,
                          "rotation": t.rotation.tolist(), "translation": t.translation.tolist()}
        seeds["view"] = args.view_seed
    out = _prepare_out(args.out)
    save_volume(vol, out)
    write_manifest(out, "phantom", params, {}, seeds, not args.no_timestamp)
    print(f"wrote {out} dims={'x'.join(str(n) for n in vol.dims)} checksum={vol.checksum():016x}")
    return 0


def cmd_extract(args) -> int:
    _set_threads(args.threads)
    vol = load_volume(args.volume, nonfinite=args.nonfinite)
    params = _scale_params(args)
    image_id = args.id if args.id is not None else Path(args.volume).name.split(".")[0]
    sig = extract_signature(vol, params, image_id=image_id)
    out = _prepare_out(args.out)
    save_signature(sig, out)
    write_manifest(out, "extract", {"image_id": image_id, "nonfinite": args.nonfinite, **sig.extraction_params},
                   {"volume": args.volume}, {}, not args.no_timestamp)
    print(f"{image_id}: {len(sig.keypoints)} keypoints, {len(sig)} descriptors")
    return 0


def _signature_files(source: str) -> list[Path]:
    p = Path(source)
    if p.is_dir():
        return sorted(p.glob("*.sgs"))
    if p.is_file():
        return [p]
    raise IoFailure(f"no such signature file or directory: {source}")


def cmd_pairwise(args) -> int:
    _set_threads(args.threads)
    files = [f for src in args.signatures for f in _signature_files(src)]
    if len(files) < 2:
        raise EmptyCollection(f"pairwise needs at least 2 signature files, found {len(files)}")
    sigs = [load_signature(f) for f in files]
    checks = None if args.checks < 0 else args.checks
    p = SoftJaccardParams(K=args.k, mode=args.mode, symmetrize=args.symmetrize, checks=checks)
    m = pairwise_matrix(sigs, p, seed=args.seed)
    out = Path(args.out)
    _write_bytes(out, m.to_csv().encode("utf-8"))
    inputs = {f"signature:{s.image_id}": f for s, f in zip(sigs, files)}
    write_manifest(out, "pairwise", {**p.to_dict(), "bandwidth_reference": "indexed collection"},
                   inputs, {"forest": args.seed}, not args.no_timestamp)
    print(f"{len(sigs)} signatures, {sum(len(s) for s in sigs)} descriptors, "
          f"{len(sigs) * (len(sigs) - 1) // 2} pairs -> {out}")
    return 0


def cmd_curate(args) -> int:
    matrix = read_matrix_csv(args.matrix)
    meta = CohortMetadata.read_csv(args.metadata)
    missing = [i for i in matrix.image_ids if i not in meta]
    if missing:
        raise MissingMetadata("no metadata for image id(s): " + ", ".join(missing))
    meta = meta.subset(matrix.image_ids)
    labels = label_pairs(meta)
    group_by = age_difference_buckets(meta, args.age_bucket) if args.age_bucket else None
    rules = OutlierRules(sigma=args.sigma, duplicate_epsilon=args.duplicate_epsilon,
                         clip_iterations=args.clip_iterations)
    dists = summarize(matrix, labels)
    if group_by is not None:
        dists += summarize(matrix, labels, group_by)
    ks = ks_table(matrix, labels, include_self=args.ks_self)
    report = flag_outliers(matrix, labels, rules)
    mpath = manifest_path(args.matrix)
    mhash = sha256_file(mpath) if mpath.exists() else None
    data = report_dict(matrix, labels, dists, report, ks, mhash)

    prefix = Path(args.out)
    json_path = prefix.with_name(prefix.name + ".json")
    text_path = prefix.with_name(prefix.name + ".txt")
    _write_bytes(json_path, report_json(data).encode("utf-8"))
    _write_bytes(text_path, report_text(data).encode("utf-8"))
    params = {**rules.to_dict(), "age_bucket": args.age_bucket, "ks_self": args.ks_self}
    inputs = {"matrix": args.matrix, "metadata": args.metadata}
    for path in (json_path, text_path):
        write_manifest(path, "curate", params, inputs, {}, not args.no_timestamp)
    print(f"{len(report.flags)} flagged pair(s) -> {json_path}, {text_path}")
    for f in report.flags:
        print(f"  {f.pair[0]} {f.pair[1]} {f.label.value} d_J={f.distance:.6g} {f.verdict.value}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(verbose=not args.quiet) else 1


def _add_common(p, threads=True):
    p.add_argument("--no-timestamp", action="store_true", help="omit the creation time from manifests")
    if threads:
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: all cores; {THREADS_ENV} overrides)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigprint", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sigprint {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a seeded blob phantom volume")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--blobs", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.0, help="additive Gaussian noise std")
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64], metavar=("NX", "NY", "NZ"))
    p.add_argument("--view-seed", type=int, default=None,
                   help="re-observe under a random similarity transform drawn from this seed")
    p.add_argument("--view-noise", type=float, default=0.02,
                   help="noise std of the re-observation, as a fraction of the intensity range")
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_phantom)

    d = ScaleSpaceParams()
    p = sub.add_parser("extract", help="extract a keypoint signature from a volume")
    p.add_argument("volume")
    p.add_argument("--out", required=True)
    p.add_argument("--id", default=None, help="image id (default: file name without extensions)")
    p.add_argument("--base-sigma", type=float, default=d.base_sigma)
    p.add_argument("--scales", type=int, default=d.scales_per_octave)
    p.add_argument("--octaves", type=int, default=None)
    p.add_argument("--contrast", type=float, default=d.contrast_threshold,
                   help="DoG threshold as a fraction of the 1-99 percentile intensity range")
    p.add_argument("--edge-ratio", type=float, default=d.edge_ratio_threshold)
    p.add_argument("--nonfinite", choices=["reject", "zero"], default="reject")
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pairwise", help="all-pairs soft Jaccard matrix over signature files")
    p.add_argument("signatures", nargs="+", help="signature files or directories of *.sgs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--mode", choices=["soft", "hard"], default="soft")
    p.add_argument("--symmetrize", choices=["none", "mean"], default="mean")
    p.add_argument("--checks", type=int, default=128, help="leaf-visit budget; -1 searches every leaf")
    _add_common(p)
    p.set_defaults(func=cmd_pairwise)

    r = OutlierRules()
    p = sub.add_parser("curate", help="label pairs, summarize distances and flag outliers")
    p.add_argument("matrix")
    p.add_argument("metadata")
    p.add_argument("--out", required=True, help="report prefix; writes <out>.json and <out>.txt")
    p.add_argument("--sigma", type=float, default=r.sigma)
    p.add_argument("--duplicate-epsilon", type=float, default=r.duplicate_epsilon)
    p.add_argument("--clip-iterations", type=int, default=r.clip_iterations)
    p.add_argument("--age-bucket", type=float, default=None, help="also summarize by |age difference| buckets")
    p.add_argument("--ks-self", action="store_true", help="include each label's self-comparison in the KS table")
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("selftest", help="run the bundled property checks")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sigprint {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SigprintError, ValueError, OSError) as exc:
        print(f"sigprint {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
