"""Command-line entry point: ``pcfgaze <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Angles in files are radians; angles printed to the console are degrees.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, geom
from . import io as pio
from .errors import (
    DataError,
    DegeneratePointError,
    DisconnectedManifold,
    FormatError,
    InvalidInputError,
    NumericalError,
    OutOfRangeError,
    RankDeficientError,
)
from .manifold import build_knn_graph, extend_embedding, geodesic_all_pairs, isomap_embed
from .pipeline import PipelineConfig, parse_config_text, run_pipeline, synth_sphere_dataset
from .propagator import train_propagator
from .spherical import fit_spherical, sf_forward, sphere_error

logger = logging.getLogger("pcfgaze")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _range_deg(text):
    """``"lo,hi"`` or a half-width, in degrees; returned in radians."""
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad angle range {text!r}")
    if len(parts) == 1:
        parts = [-abs(parts[0]), abs(parts[0])]
    if len(parts) != 2 or not parts[0] < parts[1]:
        raise argparse.ArgumentTypeError(f"bad angle range {text!r}")
    return tuple(np.radians(parts))


# --- subcommands -----------------------------------------------------------

def cmd_synth(args):
    if args.dim < 3:
        raise UsageError("--dim must be at least 3")
    if args.n < 10:
        raise UsageError("--n must be at least 10")
    if args.noise < 0:
        raise UsageError("--noise must be non-negative")
    try:
        data, feats = synth_sphere_dataset(args.n, args.dim, args.noise, args.pitch_range,
                                           args.yaw_range, args.seed, n_distractors=args.distractors)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    pio.save_features(feats, args.out_features)
    pio.save_labels(data.labels, args.out_labels, form="vectors")
    if args.out_raw:
        pio.save_features(data.raw, args.out_raw)
    print(f"wrote {data.n} samples of dimension {feats.shape[1]} to {args.out_features}")


def cmd_isomap(args):
    feats = pio.load_features(args.features)
    n = feats.shape[0]
    if not 1 <= args.k < n:
        raise UsageError(f"--k must satisfy 1 <= k < n (k={args.k}, n={n})")
    geo = geodesic_all_pairs(build_knn_graph(feats, args.k), largest_component=args.largest_component)
    emb = isomap_embed(geo)
    pio.save_geodesic(geo, args.out_geodesic)
    pio.save_embedding(emb, args.out_embedding)
    ev = ", ".join(f"{v:.6g}" for v in emb.eigenvalues)
    print(f"embedded {geo.n} of {n} samples; eigenvalues {ev}")


def _aligned_rows(arr, geo, what):
    """Select rows of a per-sample array matching a (possibly restricted) geodesic map."""
    if geo is None or arr.shape[0] == geo.n:
        return arr
    if arr.shape[0] > int(np.max(geo.indices)):
        return arr[geo.indices]
    raise DataError(f"{what} has {arr.shape[0]} rows; geodesic map has {geo.n}")


def cmd_fit(args):
    coords = pio.load_embedding_coords(args.embedding)
    labels = pio.load_label_vectors(args.labels)
    if args.geodesic:
        labels = _aligned_rows(labels, pio.load_geodesic(args.geodesic), "labels")
    if labels.shape[0] != coords.shape[0]:
        raise DataError(f"{coords.shape[0]} embedding rows but {labels.shape[0]} labels")
    try:
        params = fit_spherical(coords, labels, seed=args.seed)
    except InvalidInputError as exc:
        raise NumericFailure(f"spherical fit is degenerate: {exc}") from exc
    pio.save_sf_params(params, args.out_params)
    print(f"mean angular error: {params.objective_deg:.6f} deg")


def cmd_estimate(args):
    feats = pio.load_features(args.features)
    geo = pio.load_geodesic(args.geodesic)
    emb = pio.load_embedding(args.embedding, geo)
    params = pio.load_sf_params(args.params)
    angles = sf_forward(params, extend_embedding(geo, emb, feats)) if feats.shape[0] else np.empty((0, 2))
    pio.save_labels(angles, args.out_gaze, form="angles")
    msg = f"estimated gaze for {angles.shape[0]} samples"
    if args.labels:
        labels = pio.load_label_vectors(args.labels)
        if labels.shape[0] != angles.shape[0]:
            raise DataError(f"{angles.shape[0]} estimates but {labels.shape[0]} labels")
        err = np.degrees(np.mean(geom.angular_difference(geom.angles_to_vector(angles), labels)))
        msg += f"; mean angular error: {err:.6f} deg"
    print(msg)


def cmd_sphere_error(args):
    coords = pio.load_embedding_coords(args.embedding)
    params = pio.load_sf_params(args.params)
    if args.out_map:
        pio.atomic_write(args.out_map, analysis.sphere_error_map_csv(coords, params))
    print(f"{sphere_error(coords, params):.6f}")


def cmd_train_ip(args):
    feats = pio.load_features(args.features)
    coords = pio.load_embedding_coords(args.embedding)
    if args.geodesic:
        feats = _aligned_rows(feats, pio.load_geodesic(args.geodesic), "features")
    if feats.shape[0] != coords.shape[0]:
        raise DataError(f"{feats.shape[0]} feature rows but {coords.shape[0]} embedding rows")
    params, report = train_propagator(feats, coords, epochs=args.epochs, lr=args.lr, seed=args.seed,
                                      batch_size=args.batch_size)
    pio.save_weights(params, args.out_weights)
    print(f"final L1 loss: {report.final_loss:.6f} (initial {report.initial_loss:.6f})")


def _config_from_args(args):
    values = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            values[f.name] = v
    try:
        return PipelineConfig.from_mapping(values)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train_pcf(args):
    config = _config_from_args(args)
    logger.info("train-pcf config: %s", dataclasses.asdict(config))
    result = run_pipeline(config)
    out = Path(args.out_model_dir)
    out.mkdir(parents=True, exist_ok=True)

    pio.atomic_write(out / "config.txt", config.to_text())
    pio.save_weights(result.model_before.params, out / "feature_model_pretrained.pcfw")
    pio.save_weights(result.model_after.params, out / "feature_model.pcfw")
    pio.save_weights(result.head, out / "head.pcfw")
    pio.save_weights(result.ip, out / "ip.pcfw")
    pio.save_sf_params(result.before.sf, out / "sf_before.json")
    pio.save_sf_params(result.after.sf, out / "sf.json")
    pio.save_embedding(result.before.emb, out / "embedding_before.csv")
    pio.save_embedding(result.after.emb, out / "embedding.csv")
    pio.save_geodesic(result.after.geo, out / "geodesic.pcfg")
    report = analysis.sphere_error_report(
        [("train", result.before.emb, result.after.emb, result.before.sf, result.after.sf)])
    report.write_csv(out / "sphere_error.csv")
    n_rows = max(len(result.pretrain_losses), len(result.ip_report.epoch_losses), len(result.it_losses))

    def col(seq, i):
        return f"{seq[i]:.9g}" if i < len(seq) else ""

    losses = "epoch,pretrain_l1,ip_l1,it_l1\n" + "".join(
        f"{i + 1},{col(result.pretrain_losses, i)},{col(result.ip_report.epoch_losses, i)},{col(result.it_losses, i)}\n"
        for i in range(n_rows))
    pio.atomic_write(out / "losses.csv", losses)
    summary = result.summary()
    pio.atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"sphere error {summary['sphere_error_before']:.6f} -> {summary['sphere_error_after']:.6f}; "
          f"held-out error {summary['heldout_deg_before']:.4f} -> {summary['heldout_deg_after']:.4f} deg")


def cmd_profile(args):
    feats = pio.load_features(args.features)
    geo = pio.load_geodesic(args.geodesic)
    labels = pio.load_label_vectors(args.labels)
    feats = _aligned_rows(feats, geo, "features")
    labels = _aligned_rows(labels, geo, "labels")
    prof = analysis.distance_angle_profile(feats, geo, labels, bin_width_deg=args.bin_deg,
                                           max_pairs=args.max_pairs, seed=args.seed)
    prof.write_csv(args.out_csv)
    print(f"profile of {prof.total_pairs} pairs written to {args.out_csv}")


# --- parser ----------------------------------------------------------------

def build_parser():
    p = _Parser(prog="pcfgaze", description="Physics-consistent gaze features: manifold, fitting and training tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic spherical gaze dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--pitch-range", type=_range_deg, default=_range_deg("40"), help="degrees: half-width or lo,hi")
    s.add_argument("--yaw-range", type=_range_deg, default=_range_deg("60"), help="degrees: half-width or lo,hi")
    s.add_argument("--distractors", type=int, default=4, help="distractor coordinates in the raw inputs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-features", required=True)
    s.add_argument("--out-labels", required=True)
    s.add_argument("--out-raw")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("isomap", help="k-NN geodesics and 3-D embedding")
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=int, default=300)
    s.add_argument("--out-embedding", required=True)
    s.add_argument("--out-geodesic", required=True)
    s.add_argument("--largest-component", action="store_true")
    s.set_defaults(func=cmd_isomap)

    s = sub.add_parser("fit", help="fit the spherical gaze map to an embedding")
    s.add_argument("--embedding", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--geodesic", help="select label rows kept by a largest-component isomap run")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-params", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("estimate", help="estimate gaze for feature rows")
    s.add_argument("--features", required=True)
    s.add_argument("--geodesic", required=True)
    s.add_argument("--embedding", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--labels", help="report mean angular error against these labels")
    s.add_argument("--out-gaze", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("sphere-error", help="mean distance of embedding points to the fitted sphere")
    s.add_argument("--embedding", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out-map", help="per-point radial error CSV")
    s.set_defaults(func=cmd_sphere_error)

    s = sub.add_parser("train-ip", help="train the isometric propagator")
    s.add_argument("--features", required=True)
    s.add_argument("--embedding", required=True)
    s.add_argument("--geodesic")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-weights", required=True)
    s.set_defaults(func=cmd_train_ip)

    s = sub.add_parser("train-pcf", help="full pipeline with PCF-oriented training")
    s.add_argument("--config", help="key=value config file; flags override it")
    s.add_argument("--out-model-dir", required=True)
    for f in dataclasses.fields(PipelineConfig):
        kind = float if f.type in ("float", float) else int
        s.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=kind, default=None)
    s.set_defaults(func=cmd_train_pcf)

    s = sub.add_parser("profile", help="distance-vs-angle profile CSV")
    s.add_argument("--features", required=True)
    s.add_argument("--geodesic", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--bin-deg", type=float, default=analysis.DEFAULT_BIN_DEG)
    s.add_argument("--max-pairs", type=int, default=analysis.DEFAULT_MAX_PAIRS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-csv", required=True)
    s.set_defaults(func=cmd_profile)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logger.info("pcfgaze %s: %s", args.command,
                {k: v for k, v in vars(args).items() if k != "func" and v is not None})
    try:
        args.func(args)
    except UsageError as exc:
        print(f"pcfgaze: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, RankDeficientError, NumericalError, DegeneratePointError) as exc:
        print(f"pcfgaze: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DataError, DisconnectedManifold, OutOfRangeError, InvalidInputError, OSError) as exc:
        print(f"pcfgaze: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
