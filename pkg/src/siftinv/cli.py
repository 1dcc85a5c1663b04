"""Command-line entry point for the extraction / inversion / evaluation pipelines.

Every command is deterministic given its inputs and --seed: rerunning
produces byte-identical outputs.  On failure, partially written outputs
are removed and a one-line diagnostic goes to stderr with a distinct
exit code per failure class.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import coordest, metrics, sli
from .errors import (DegenerateInputError, FormatError, InvalidInputError,
                     InvalidParameterError, ShapeError, SiftinvError)
from .featmap import (BinaryMap, build_binary_map, build_feature_map,
                      deserialize_map, serialize_map, subsample_features)
from .image import load_gray, load_rgb, save_image, to_grayscale
from .lbp import extract_lbp, lbp_to_image
from .sift import SiftParams, extract_sift, load_sift, save_sift

_IMAGE_EXTS = (".png", ".pgm", ".ppm")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BAD_PARAM = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_FORMAT = 4
EXIT_SHAPE = 5
EXIT_BAD_INPUT = 6
EXIT_DEGENERATE = 7

_EXIT_CODES = (
    (InvalidParameterError, EXIT_BAD_PARAM),
    (FileNotFoundError, EXIT_MISSING_FILE),
    (FormatError, EXIT_BAD_FORMAT),
    (ShapeError, EXIT_SHAPE),
    (InvalidInputError, EXIT_BAD_INPUT),
    (DegenerateInputError, EXIT_DEGENERATE),
)


class OutputGuard:
    """Registry of produced paths, deleted if the command fails."""

    def __init__(self):
        self.paths: list[str] = []

    def register(self, path: str | os.PathLike) -> str:
        path = os.fspath(path)
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                if os.path.isfile(p):
                    os.remove(p)
            except OSError:
                pass


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _require_dir(path: str) -> str:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"no such directory: {path}")
    return path


def _log(msg: str) -> None:
    print(f"siftinv: {msg}", file=sys.stderr)


def _sift_params(args) -> SiftParams:
    return SiftParams(octaves=args.octaves, scales_per_octave=args.scales,
                      sigma0=args.sigma0, contrast_thresh=args.contrast,
                      edge_ratio=args.edge_ratio)


def _list_images(directory: str) -> list[str]:
    names = sorted(n for n in os.listdir(directory)
                   if os.path.splitext(n)[1].lower() in _IMAGE_EXTS)
    return [os.path.join(directory, n) for n in names]


def _features_for_image(path: str, params: SiftParams):
    sft = os.path.splitext(path)[0] + ".sft"
    if os.path.isfile(sft):
        return load_sift(sft)
    return extract_sift(load_gray(path), params)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_extract_sift(args, guard: OutputGuard) -> int:
    img = load_gray(_require_file(args.input))
    feats = extract_sift(img, _sift_params(args))
    save_sift(feats, guard.register(args.output))
    stats = feats.stats
    _log(f"extracted {len(feats)} keypoints "
         f"(detected={stats.detected}, dropped_orientation={stats.dropped_orientation}, "
         f"dropped_window={stats.dropped_window})")
    return EXIT_OK


def cmd_extract_lbp(args, guard: OutputGuard) -> int:
    img = load_gray(_require_file(args.input))
    save_image(lbp_to_image(extract_lbp(img)), guard.register(args.output))
    return EXIT_OK


def cmd_build_map(args, guard: OutputGuard) -> int:
    _log(f"seed={args.seed}")
    feats = load_sift(_require_file(args.input))
    if args.fraction is not None:
        feats = subsample_features(feats, args.fraction, args.seed)
        _log(f"subsampled to {len(feats)} keypoints (fraction={args.fraction})")
    m = build_binary_map(feats) if args.method == "binary" else build_feature_map(feats)
    serialize_map(m, guard.register(args.output))
    return EXIT_OK


def _expected_train_outputs(cfg: "sli.TrainConfig") -> list[str]:
    nets = ["g2prime", "d2"] if cfg.mode == "binary" else ["g1", "g2", "d1", "d2"]
    names = [f"{n}.ckp" for n in nets] + ["loss_log.csv"]
    if cfg.checkpoint_interval > 0:
        stages = ((2, cfg.stage2_steps),) if cfg.mode == "binary" else \
            ((1, cfg.stage1_steps), (2, cfg.stage2_steps))
        for stage, steps in stages:
            for step in range(cfg.checkpoint_interval, steps + 1,
                              cfg.checkpoint_interval):
                names.extend(f"{n}_s{stage}_{step:06d}.ckp" for n in nets)
    return names


def cmd_train(args, guard: OutputGuard) -> int:
    cfg = sli.load_config(_require_file(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, out_dir=args.output)
    _log(f"seed={cfg.seed}")
    params = _sift_params(args)
    corpus = []
    for path in _list_images(_require_dir(args.corpus)):
        corpus.append((load_rgb(path), _features_for_image(path, params)))
    if not corpus:
        raise InvalidInputError(f"no images found in corpus {args.corpus}")
    os.makedirs(args.output, exist_ok=True)
    for name in _expected_train_outputs(cfg):
        guard.register(os.path.join(args.output, name))
    result = sli.train(corpus, cfg)
    _log(f"trained {len(result.loss_rows)} steps over {len(corpus)} images")
    return EXIT_OK


def _load_generators(model_dir: str, source):
    if isinstance(source, BinaryMap):
        g2 = sli.load_model(_require_file(os.path.join(model_dir, "g2prime.ckp")))
        return sli.SliModel(g1=None, g2=g2)
    g1 = sli.load_model(_require_file(os.path.join(model_dir, "g1.ckp")))
    g2 = sli.load_model(_require_file(os.path.join(model_dir, "g2.ckp")))
    return sli.SliModel(g1=g1, g2=g2)


def cmd_reconstruct(args, guard: OutputGuard) -> int:
    source = deserialize_map(_require_file(args.input))
    model = _load_generators(_require_dir(args.model), source)
    lbp_est, img = sli.reconstruct(model, source)
    save_image(img, guard.register(args.output))
    if args.lbp_output:
        if lbp_est is None:
            raise InvalidParameterError("binary-map input produces no LBP estimate")
        save_image(lbp_est, guard.register(args.lbp_output))
    return EXIT_OK


def cmd_estimate_coords(args, guard: OutputGuard) -> int:
    feats = load_sift(_require_file(args.input))
    _log(f"seed={args.seed}")
    if args.method == "reference":
        cat_map = coordest.load_category_map(_require_file(args.category_map))
        params = _sift_params(args)
        picks = [_require_file(p)
                 for p in coordest.pick_reference_images(cat_map, args.seed)]
        entries = [(path, extract_sift(load_gray(path), params)) for path in picks]
        refs = coordest.ReferenceSet.from_entries(entries)
        if args.level == "descriptor":
            out = coordest.estimate_coords_descriptor_level(feats, refs, args.seed)
        else:
            out = coordest.estimate_coords_image_level(feats, refs, args.seed)
    else:
        clf = coordest.RegionClassifier.load(_require_file(args.classifier))
        lm = coordest.load_landmarks(_require_file(args.landmarks))
        out = coordest.estimate_coords_landmark(feats, clf, lm, args.seed)
    save_sift(out, guard.register(args.output))
    _log(f"estimated coordinates for {len(out)} of {len(feats)} descriptors")
    return EXIT_OK


def cmd_train_classifier(args, guard: OutputGuard) -> int:
    params = _sift_params(args)
    descs, labels = [], []
    for path in _list_images(_require_dir(args.corpus)):
        lmk = os.path.splitext(path)[0] + ".lmk"
        if not os.path.isfile(lmk):
            continue
        feats = _features_for_image(path, params)
        if len(feats) == 0:
            continue
        descs.append(feats.descriptors)
        labels.append(coordest.label_descriptors(feats, coordest.load_landmarks(lmk)))
    if not descs:
        raise InvalidInputError(f"no image/.lmk pairs found in {args.corpus}")
    cfg = coordest.ClassifierConfig(steps=args.steps, seed=args.seed)
    clf = coordest.train_region_classifier(
        np.concatenate(descs), np.concatenate(labels), cfg)
    clf.save(guard.register(args.output))
    _log(f"trained on {sum(len(d) for d in descs)} descriptors, seed={args.seed}")
    return EXIT_OK


def _evaluate_pair(gt_path: str, recon_path: str, image_id: str, args):
    gt = load_rgb(gt_path)
    recon = load_rgb(recon_path)
    rec = metrics.evaluate_reconstruction(gt, recon, _sift_params(args), args.threshold)
    return metrics.format_csv_row(image_id, args.variant, rec)


def cmd_evaluate(args, guard: OutputGuard) -> int:
    if os.path.isdir(args.gt):
        _require_dir(args.recon)
        gt_paths = _list_images(args.gt)
        pairs = []
        for g in gt_paths:
            r = os.path.join(args.recon, os.path.basename(g))
            pairs.append((g, _require_file(r), os.path.splitext(os.path.basename(g))[0]))
    else:
        pairs = [(_require_file(args.gt), _require_file(args.recon),
                  args.id or os.path.splitext(os.path.basename(args.gt))[0])]
    with ThreadPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        rows = list(pool.map(lambda p: _evaluate_pair(p[0], p[1], p[2], args), pairs))
    with open(guard.register(args.output), "w", encoding="utf-8") as fh:
        fh.write(",".join(metrics.CSV_HEADER) + "\n")
        for row in rows:
            fh.write(row + "\n")
    if args.matches:
        gt = load_rgb(pairs[0][0])
        recon = load_rgb(pairs[0][1])
        f_gt = extract_sift(to_grayscale(gt), _sift_params(args))
        f_recon = extract_sift(to_grayscale(recon), _sift_params(args))
        report = metrics.prm(f_gt, f_recon, args.threshold)
        with open(guard.register(args.matches), "w", encoding="utf-8") as fh:
            text = metrics.format_match_report(report)
            fh.write(text + ("\n" if text else ""))
    return EXIT_OK


def cmd_sweep(args, guard: OutputGuard) -> int:
    img = load_rgb(_require_file(args.image))
    model_dir = _require_dir(args.model)
    params = _sift_params(args)
    feats = extract_sift(to_grayscale(img), params)
    fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    if not fractions:
        raise InvalidParameterError("empty fractions list")
    os.makedirs(args.output, exist_ok=True)
    _log(f"seed={args.seed}")
    model = _load_generators(model_dir, build_feature_map(feats))

    def run_fraction(fraction: float):
        sub = subsample_features(feats, fraction, args.seed)
        fmap = build_feature_map(sub)
        _, recon = sli.reconstruct(model, fmap)
        out_png = os.path.join(args.output, f"recon_frac{fraction:g}.png")
        save_image(recon, out_png)
        rec = metrics.evaluate_reconstruction(img, recon, params, args.threshold)
        return out_png, metrics.format_csv_row(
            os.path.splitext(os.path.basename(args.image))[0], f"frac{fraction:g}", rec)

    with ThreadPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        results = list(pool.map(run_fraction, fractions))
    for out_png, _ in results:
        guard.register(out_png)
    csv_path = guard.register(os.path.join(args.output, "sweep.csv"))
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(metrics.CSV_HEADER) + "\n")
        for _, row in results:
            fh.write(row + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_sift_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--octaves", type=int, default=3)
    p.add_argument("--scales", type=int, default=3, help="scales per octave")
    p.add_argument("--sigma0", type=float, default=1.6)
    p.add_argument("--contrast", type=float, default=0.03)
    p.add_argument("--edge-ratio", type=float, default=10.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siftinv",
        description="SIFT/LBP extraction, feature-map inversion, and leakage metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-sift", help="image -> SFT1 feature file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _add_sift_flags(p)
    p.set_defaults(func=cmd_extract_sift)

    p = sub.add_parser("extract-lbp", help="image -> LBP raster image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_extract_lbp)

    p = sub.add_parser("build-map", help="SFT1 -> SMP1 dense map")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--method", choices=("full", "binary"), default="full")
    p.add_argument("--fraction", type=float, default=None,
                   help="keep a random fraction of the keypoints")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("train", help="corpus dir + config -> CKP1 checkpoints")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    _add_sift_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="checkpoint dir + SMP1 -> image")
    p.add_argument("--model", required=True, help="training output directory")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--lbp-output", default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("estimate-coords",
                       help="SFT1 without coordinates -> SFT1 with estimates")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--method", choices=("reference", "landmark"), required=True)
    p.add_argument("--level", choices=("descriptor", "image"), default="image",
                   help="reference method granularity")
    p.add_argument("--category-map", default=None, help="path<TAB>category lines")
    p.add_argument("--classifier", default=None, help="region classifier checkpoint")
    p.add_argument("--landmarks", default=None, help="68-line 'x y' prior landmarks")
    p.add_argument("--seed", type=int, default=0)
    _add_sift_flags(p)
    p.set_defaults(func=cmd_estimate_coords)

    p = sub.add_parser("train-classifier",
                       help="images + .lmk landmark files -> region classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    _add_sift_flags(p)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="image pair (or dirs) -> metrics CSV")
    p.add_argument("--gt", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--matches", default=None, help="write 'recon gt ratio' lines")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--id", default=None)
    p.add_argument("--variant", default="full")
    p.add_argument("--jobs", type=int, default=1)
    _add_sift_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="fraction sweep: build-map/reconstruct/evaluate")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--fractions", default="0.25,0.5,0.75,1.0")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    _add_sift_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "estimate-coords":
        if args.method == "reference" and not args.category_map:
            print("siftinv: --method reference requires --category-map", file=sys.stderr)
            return EXIT_BAD_PARAM
        if args.method == "landmark" and not (args.classifier and args.landmarks):
            print("siftinv: --method landmark requires --classifier and --landmarks",
                  file=sys.stderr)
            return EXIT_BAD_PARAM
    guard = OutputGuard()
    try:
        return args.func(args, guard)
    except SiftinvError as exc:
        guard.cleanup()
        for klass, code in _EXIT_CODES:
            if isinstance(exc, klass):
                print(f"siftinv: error: {exc}", file=sys.stderr)
                return code
        print(f"siftinv: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        guard.cleanup()
        print(f"siftinv: error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except Exception as exc:  # unexpected
        guard.cleanup()
        print(f"siftinv: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
