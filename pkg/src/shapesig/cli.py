"""Command-line driver: data generation, both training stages, evaluation and export.

Every command writes under ``--out``. Settings come from built-in defaults,
then an optional INI file (``--config``), then ``SHAPESIG_SEED``, then flags.
Exit status is 0 on success, 1 on a runtime error and 2 when the
configuration cannot be parsed.
"""

import argparse
import configparser
import logging
import os
import sys

import numpy as np

from .affine3d import AugmentationSpec
from .gradcheck import format_table, run_suite
from .losses import summarize
from .nets import SegNetConfig, ShapeNetConfig, load_checkpoint, save_checkpoint
from .synth import FAMILIES, generate_dataset, load_dataset, save_dataset
from .training import (SegTrainConfig, ShapeTrainConfig, evaluate_affine_invariance,
                       evaluate_segmenter, predict, run_phase1, train_segmenter,
                       train_shape_learner)
from .volume_io import read_rvf

log = logging.getLogger("shapesig")

SEED_ENV = "SHAPESIG_SEED"

DEFAULTS = {
    "data": {"dir": "", "subjects": 10, "dims": 48, "seed": 0, "split": 0.8,
             "family": "ellipsoid_with_tail"},
    "shape_net": {"levels": 4, "base_channels": 8},
    "seg_net": {"depth": 3, "base_channels": 8},
    "train_shape": {"iterations": 200, "lr": 1e-4, "seed": 0},
    "train_seg": {"phase1_iters": 800, "phase2_iters": 400, "alpha": 0.1, "cap": 1.0,
                  "lr": 1e-4, "seed": 0},
    "augment": {"max_rotation_deg": 8.0, "scale_min": 0.85, "scale_max": 1.15,
                "max_translation_frac": 0.10},
    "eval": {"n_pairs": 50, "seed": 0},
}
PATH_KEYS = {("data", "dir")}
SEED_KEYS = [("data", "seed"), ("train_shape", "seed"), ("train_seg", "seed"), ("eval", "seed")]


class ConfigError(ValueError):
    """The configuration file or an override could not be parsed."""


def _convert(section, key, raw):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None


def load_config(path=None, overrides=None, seed=None):
    """Resolve the run configuration as ``{section: {key: value}}``.

    Relative paths in the file are taken relative to the file's directory.
    ``seed`` (or ``SHAPESIG_SEED``) replaces every seed; ``overrides`` maps
    ``(section, key)`` to already-typed values and wins over everything.
    """
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        base = os.path.dirname(os.path.abspath(path))
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                value = _convert(section, key, raw)
                if (section, key) in PATH_KEYS and value:
                    value = os.path.join(base, value)
                cfg[section][key] = value
    env = os.environ.get(SEED_ENV)
    if seed is None and env not in (None, ""):
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    if seed is not None:
        for section, key in SEED_KEYS:
            cfg[section][key] = int(seed)
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            cfg[section][key] = value
    if cfg["data"]["family"] not in FAMILIES:
        raise ConfigError(f"[data] family must be one of {', '.join(FAMILIES)}")
    return cfg


def augmentation(cfg):
    a = cfg["augment"]
    return AugmentationSpec(a["max_rotation_deg"], (a["scale_min"], a["scale_max"]),
                            a["max_translation_frac"])


def shape_train_config(cfg):
    t = cfg["train_shape"]
    return ShapeTrainConfig(iterations=t["iterations"], lr=t["lr"], seed=t["seed"],
                            augmentation=augmentation(cfg),
                            net=ShapeNetConfig(**cfg["shape_net"]))


def seg_train_config(cfg, alpha=None):
    t = cfg["train_seg"]
    return SegTrainConfig(phase1_iters=t["phase1_iters"], phase2_iters=t["phase2_iters"],
                          alpha=t["alpha"] if alpha is None else alpha, cap=t["cap"],
                          lr=t["lr"], seed=t["seed"], augmentation=augmentation(cfg),
                          net=SegNetConfig(**cfg["seg_net"]))


# --- PGM slice export ----------------------------------------------------------

def write_pgm(path, img):
    """Binary 8-bit greyscale (P5); rows are the first array axis."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, w, h, maxval, rest = raw.split(maxsplit=4)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit P5 image")
    return np.frombuffer(rest, np.uint8).reshape(int(h), int(w))


def mid_slices(vol):
    d, h, w = vol.shape
    return {"axial": vol[d // 2], "coronal": vol[:, h // 2, :], "sagittal": vol[:, :, w // 2]}


def overlay(label, pred):
    """0 background, 96 missed label, 160 spurious prediction, 255 agreement."""
    out = np.zeros(label.shape, np.uint8)
    out[(label == 1) & ~pred] = 96
    out[(label == 0) & pred] = 160
    out[(label == 1) & pred] = 255
    return out


def dump_case_slices(directory, case, soft, tag=""):
    os.makedirs(directory, exist_ok=True)
    lo, hi = float(case.image.data.min()), float(case.image.data.max())
    image = np.round(255 * (case.image.data - lo) / max(hi - lo, 1e-12))
    views = {
        "image": image,
        "label": case.label.data * 255,
        "prediction": np.round(np.clip(soft, 0, 1) * 255),
        "overlay": overlay(case.label.data, soft >= 0.5),
    }
    written = []
    for kind, vol in views.items():
        for plane, sl in mid_slices(np.asarray(vol)).items():
            path = os.path.join(directory, f"subject_{case.subject_id:03d}{tag}_{kind}_{plane}.pgm")
            write_pgm(path, sl)
            written.append(path)
    return written


# --- commands --------------------------------------------------------------------

def _data_dir(args, cfg):
    return args.data or cfg["data"]["dir"] or os.path.join(args.out, "data")


def _load_data(args, cfg):
    path = _data_dir(args, cfg)
    if not os.path.exists(os.path.join(path, "manifest.txt")):
        raise FileNotFoundError(f"no dataset at {path} (run gen-data first)")
    return load_dataset(path)


def _out(args, name):
    return os.path.join(args.out, name)


def cmd_gen_data(args, cfg):
    d = cfg["data"]
    ds = generate_dataset(d["subjects"], d["dims"], d["seed"], d["split"], d["family"])
    path = _data_dir(args, cfg)
    save_dataset(ds, path)
    print(f"wrote {len(ds.cases)} subjects ({len(ds.train)} train / {len(ds.test)} test) "
          f"at {d['dims']}^3 to {path}")
    return ds


def cmd_train_shape(args, cfg, ds=None):
    ds = ds or _load_data(args, cfg)
    g, tlog = train_shape_learner(ds, shape_train_config(cfg))
    ckpt = getattr(args, "shape", None) or _out(args, "shape_learner.ssck")
    save_checkpoint(g, ckpt)
    tlog.checkpoint = ckpt
    tlog.write_csv(_out(args, "shape_log.csv"))
    with open(_out(args, "shape_collapse.csv"), "w") as fh:
        fh.write("iteration,different_subject_distance,collapsed\n")
        for it, dist, flag in tlog.collapse:
            fh.write(f"{it},{dist!r},{int(flag)}\n")
    flagged = [it for it, _, flag in tlog.collapse if flag]
    if flagged:
        print(f"warning: signatures collapsed (first flagged at iteration {flagged[0]})")
    print(f"shape learner: {len(tlog.records)} iterations, final loss "
          f"{tlog.records[-1]['total'] if tlog.records else float('nan'):.4g}, saved {ckpt}")
    return g


def _load_shape(args, required=True):
    path = getattr(args, "shape", None) or _out(args, "shape_learner.ssck")
    if not os.path.exists(path):
        if required:
            raise FileNotFoundError(f"no shape-learner checkpoint at {path} (run train-shape)")
        return None
    return load_checkpoint(path, expect="shape_learner")


def cmd_eval_shape(args, cfg, ds=None, g=None):
    ds = ds or _load_data(args, cfg)
    g = g or _load_shape(args)
    e = cfg["eval"]
    same, diff = evaluate_affine_invariance(g, ds, e["n_pairs"], e["seed"], augmentation(cfg))
    ratio = diff / same if same > 0 else float("inf")
    with open(_out(args, "eval_shape.csv"), "w") as fh:
        fh.write("same_subject_mean,different_subject_mean,ratio\n")
        fh.write(f"{same!r},{diff!r},{ratio!r}\n")
    print(f"average shape loss over {e['n_pairs']} affine pairs: same subject {same:.4g}, "
          f"different subject {diff:.4g}, ratio {ratio:.3g}")
    return same, diff


def cmd_train_seg(args, cfg):
    ds = _load_data(args, cfg)
    scfg = seg_train_config(cfg)
    g = _load_shape(args, required=scfg.alpha > 0)
    net, tlog = train_segmenter(ds, g, scfg)
    ckpt = args.seg or _out(args, "segnet.ssck")
    save_checkpoint(net, ckpt)
    tlog.write_csv(_out(args, "seg_log.csv"))
    print(f"segmenter: {len(tlog.records)} iterations (alpha {scfg.alpha}), saved {ckpt}")


def _print_summary(label, records):
    s = summarize(records)
    print(f"{label}: mean Dice {s.dice_coefficient:.4f}, mean HD {s.hausdorff:.3f} "
          f"over {len(records)} test cases")
    return s


def cmd_evaluate(args, cfg):
    ds = _load_data(args, cfg)
    g = _load_shape(args, required=False)
    net, preds = None, None
    if args.predictions:
        preds = {}
        for case in ds.test_cases():
            stem = os.path.join(args.predictions, f"subject_{case.subject_id:03d}")
            for suffix in ("_pred.rvf", "_label.rvf"):
                if os.path.exists(stem + suffix):
                    preds[case.subject_id] = read_rvf(stem + suffix).data
                    break
            else:
                raise FileNotFoundError(f"no prediction for subject {case.subject_id} "
                                        f"in {args.predictions}")
    else:
        path = args.seg or _out(args, "segnet.ssck")
        net = load_checkpoint(path, expect="segnet")
    csv_path = _out(args, "metrics.csv")
    records = evaluate_segmenter(net, ds, g, predictions=preds, csv_path=csv_path)
    _print_summary("evaluation", records)
    print(f"metrics written to {csv_path}")


def cmd_grad_check(args, cfg):
    dtypes = {"f32": (np.float32,), "f64": (np.float64,), "both": (np.float32, np.float64)}
    results = run_suite(dtypes[args.dtype], pipelines=not args.ops_only)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


def cmd_dump_slices(args, cfg):
    ds = _load_data(args, cfg)
    net = load_checkpoint(args.seg or _out(args, "segnet.ssck"), expect="segnet")
    directory = _out(args, "slices")
    n = 0
    for case in ds.test_cases():
        n += len(dump_case_slices(directory, case, predict(net, case.image)))
    print(f"wrote {n} PGM slices to {directory}")


def format_table2(rows):
    """Method comparison laid out as structure / method / Dice / HD."""
    lines = [f"{'structure':<22} {'method':<22} {'Dice':>8} {'HD':>9}"]
    for structure, method, dice, hd in rows:
        lines.append(f"{structure:<22} {method:<22} {dice:8.4f} {hd:9.3f}")
    return "\n".join(lines)


def cmd_reproduce(args, cfg):
    """gen-data, train-shape, eval-shape, baseline and guided segmenters, evaluation."""
    os.makedirs(args.out, exist_ok=True)
    ds = cmd_gen_data(args, cfg)
    g = cmd_train_shape(args, cfg, ds)
    same, diff = cmd_eval_shape(args, cfg, ds, g)
    guided_cfg = seg_train_config(cfg)
    baseline_cfg = seg_train_config(cfg, alpha=0.0)
    # both runs share phase 1; the baseline simply continues without the shape term
    phase1 = run_phase1(ds, guided_cfg, g)
    rows = []
    for tag, scfg, method in [("baseline", baseline_cfg, "dice only"),
                              ("guided", guided_cfg, f"dice + shape (a={guided_cfg.alpha:g})")]:
        net, tlog = train_segmenter(ds, g, scfg, phase1=phase1)
        save_checkpoint(net, _out(args, f"segnet_{tag}.ssck"))
        tlog.write_csv(_out(args, f"seg_log_{tag}.csv"))
        records = evaluate_segmenter(net, ds, g, csv_path=_out(args, f"metrics_{tag}.csv"))
        s = _print_summary(tag, records)
        rows.append((ds.family, method, s.dice_coefficient, s.hausdorff))
        for case in ds.test_cases():
            dump_case_slices(_out(args, "slices"), case, predict(net, case.image), f"_{tag}")
    table = format_table2(rows)
    table += (f"\n\naverage shape loss over {cfg['eval']['n_pairs']} affine pairs: "
              f"same subject {same:.4f}, different subject {diff:.4f}\n")
    with open(_out(args, "table.txt"), "w") as fh:
        fh.write(table)
    print(table)


# --- argument parsing -------------------------------------------------------------

_FLAGS = {
    "subjects": ("data", "subjects", int, "number of synthetic subjects"),
    "dims": ("data", "dims", int, "cubic volume extent in voxels"),
    "split": ("data", "split", float, "training fraction of subjects"),
    "family": ("data", "family", str, "shape family: " + ", ".join(FAMILIES)),
    "iterations": ("train_shape", "iterations", int, "shape-learner iterations (batch size 1)"),
    "shape-lr": ("train_shape", "lr", float, "shape-learner Adam learning rate"),
    "phase1": ("train_seg", "phase1_iters", int, "Dice-only iterations"),
    "phase2": ("train_seg", "phase2_iters", int, "Dice + shape iterations"),
    "alpha": ("train_seg", "alpha", float, "shape-loss weight (0 disables the shape term)"),
    "cap": ("train_seg", "cap", float, "upper clamp on the shape loss"),
    "seg-lr": ("train_seg", "lr", float, "segmenter Adam learning rate"),
    "pairs": ("eval", "n_pairs", int, "affine pairs for eval-shape"),
}

_COMMAND_FLAGS = {
    "gen-data": ["subjects", "dims", "split", "family"],
    "train-shape": ["iterations", "shape-lr"],
    "eval-shape": ["pairs"],
    "train-seg": ["phase1", "phase2", "alpha", "cap", "seg-lr"],
    "evaluate": [],
    "grad-check": [],
    "dump-slices": [],
    "reproduce": ["subjects", "dims", "split", "family", "iterations", "shape-lr",
                  "phase1", "phase2", "alpha", "cap", "seg-lr", "pairs"],
}

_HELP = {
    "gen-data": "generate a synthetic dataset",
    "train-shape": "train the shape learner on affine pairs",
    "eval-shape": "average shape loss of same- vs different-subject affine pairs",
    "train-seg": "train the segmenter (Dice, then Dice + capped shape loss)",
    "evaluate": "per-case Dice, Hausdorff distance and shape loss on the test split",
    "grad-check": "finite-difference check of every op and both loss pipelines",
    "dump-slices": "write mid-volume PGM slices of label, prediction and overlay",
    "reproduce": "run the whole pipeline and print the method comparison table",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [data] [shape_net] [seg_net] "
                        "[train_shape] [train_seg] [augment] [eval] sections")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help=f"seed for every stage; overrides "
                        f"the config file and ${SEED_ENV}")
    common.add_argument("--data", help="dataset directory (default: <out>/data)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="shapesig", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, flags in _COMMAND_FLAGS.items():
        p = sub.add_parser(name, parents=[common], help=_HELP[name], description=_HELP[name])
        for flag in flags:
            section, key, typ, text = _FLAGS[flag]
            p.add_argument(f"--{flag}", type=typ, dest=f"{section}.{key}",
                           help=f"{text} (default: {DEFAULTS[section][key]})")
        if name in ("train-shape", "eval-shape", "train-seg", "evaluate"):
            p.add_argument("--shape", help="shape-learner checkpoint "
                           "(default: <out>/shape_learner.ssck)")
        if name in ("train-seg", "evaluate", "dump-slices"):
            p.add_argument("--seg", help="segmenter checkpoint (default: <out>/segnet.ssck)")
        if name == "evaluate":
            p.add_argument("--predictions", help="directory of subject_NNN_pred.rvf (or "
                           "subject_NNN_label.rvf) files to score instead of a network")
        if name == "grad-check":
            p.add_argument("--dtype", choices=("f32", "f64", "both"), default="both",
                           help="precision of the analytic pass (default: both)")
            p.add_argument("--ops-only", action="store_true",
                           help="skip the full L_dice / L_total pipelines")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data, "train-shape": cmd_train_shape, "eval-shape": cmd_eval_shape,
    "train-seg": cmd_train_seg, "evaluate": cmd_evaluate, "grad-check": cmd_grad_check,
    "dump-slices": cmd_dump_slices, "reproduce": cmd_reproduce,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for dest, value in vars(args).items():
        if "." in dest:
            overrides[tuple(dest.split("."))] = value
    try:
        cfg = load_config(args.config, overrides, args.seed)
    except ConfigError as exc:
        print(f"shapesig: config error: {exc}", file=sys.stderr)
        return 2
    try:
        os.makedirs(args.out, exist_ok=True)
        status = _COMMANDS[args.command](args, cfg)
    except Exception as exc:  # one-line diagnostic, no traceback
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"shapesig: error: {msg}", file=sys.stderr)
        return 1
    return status if isinstance(status, int) else 0
