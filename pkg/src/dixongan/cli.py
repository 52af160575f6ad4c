"""Command-line entry point: simulate, train, predict, evaluate, swapmap, report.

Exit codes: 0 success, 2 usage or configuration error, 3 training divergence.
Every command writes ``run_manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, sim
from .errors import ConfigError, DirectiveError, DivergenceError, DixonError, FormatError
from .metrics import (DEFAULT_MIN_CLUSTER, DEFAULT_THRESHOLD, MetricsReport, fp_statistics,
                      predict_full, subject_metrics, swap_label_map)
from .model import InputMode, LossMode
from .train import (TrainConfig, format_cv_table, load_generator, run_cross_validation,
                    run_training, thread_limit)
from .volume import (Channel, Volume, joint_scale, normalize_study, normalize_volumes,
                     read_volume, write_volume)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
MANIFEST_NAME = "run_manifest.json"
PRED_FILES = {"fat": "fat_hat.dvol", "water": "water_hat.dvol"}

log = logging.getLogger("dixongan")


class UsageError(DixonError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None = None
    version: str = __version__
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, out_dir):
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True,
                                   default=str))
        return path


# -- key=value configuration ----------------------------------------------------------

def parse_kv(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def _coerce(name, raw, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, (InputMode, LossMode)):
            return type(default)(raw.upper())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.replace("(", "").replace(")", "").split(",")
                     if p.strip()]
            return tuple(items) if name == "subjects" else tuple(int(p) for p in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def train_config_from(values: dict) -> TrainConfig:
    defaults = TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kw = {k: _coerce(k, v, getattr(defaults, k)) if isinstance(v, str) else v
          for k, v in values.items()}
    return TrainConfig(**kw)


def _load_config(args):
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_kv(path.read_text()))
    for item in args.set or []:
        values.update(parse_kv(item))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out_dir"] = args.out
    return values


# -- study discovery -------------------------------------------------------------------

def _study_dirs(root, which="scanner", marker="ip.dvol"):
    """Map subject id -> directory. Accepts a corpus root with manifest.json,
    a single study directory, or a directory of per-subject directories."""
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    if (root / "manifest.json").is_file():
        manifest = sim.load_manifest(root)
        return {e["subject_id"]: root / e["subject_id"] / which for e in manifest["subjects"]}
    if (root / marker).is_file():
        # <subject>/scanner or <subject>/truth inside a corpus
        sid = root.parent.name if root.name in ("scanner", "truth") else root.name
        return {sid: root}
    subs = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if (d / marker).is_file():
            subs[d.name] = d
        elif (d / which / marker).is_file():
            subs[d.name] = d / which
    if not subs:
        raise UsageError(f"no studies found under {root}")
    return subs


def _matched(a: dict, b: dict, a_name, b_name):
    missing_a = sorted(set(b) - set(a))
    missing_b = sorted(set(a) - set(b))
    if missing_a or missing_b:
        parts = []
        if missing_b:
            parts.append(f"missing from {b_name}: {', '.join(missing_b)}")
        if missing_a:
            parts.append(f"missing from {a_name}: {', '.join(missing_a)}")
        raise UsageError("subject sets differ; " + "; ".join(parts))
    return sorted(a)


def _read_study(d, subject_id=""):
    return sim.read_study(d, subject_id=subject_id)


def _pred_dirs(root, which):
    """Prediction directories, or plain studies (fat.dvol, water.dvol) standing
    in for predictions, e.g. a corpus's truth side."""
    try:
        return _study_dirs(root, which, marker=PRED_FILES["fat"])
    except UsageError:
        return _study_dirs(root, which, marker="fat.dvol")


def _read_prediction(d):
    d = Path(d)
    names = PRED_FILES if (d / PRED_FILES["fat"]).is_file() else \
        {"fat": "fat.dvol", "water": "water.dvol"}
    return (read_volume(d / names["fat"], Channel.F),
            read_volume(d / names["water"], Channel.W))


def _normalised_pair(ref_study, fat, water):
    """Reference study and a (fat, water) pair, both divided by the
    reference study's scale."""
    ns, scale = normalize_study(ref_study)
    pf, pw = normalize_volumes([fat, water], scale)
    return ns, pf, pw


@dataclass
class EchoPair:
    """The echoes a generator consumes; ``op`` may be absent for single-input
    models."""
    ip: Volume
    op: Volume | None

    @property
    def dims(self):
        return self.ip.dims

    @property
    def spacing(self):
        return self.ip.spacing


# -- commands --------------------------------------------------------------------------

def cmd_simulate(args):
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if not 0.0 <= args.swap_rate <= 1.0:
        raise UsageError("--swap-rate must lie in [0, 1]")
    seed = args.seed if args.seed is not None else 0
    if args.spec:
        try:
            base = sim.PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"cannot parse phantom spec {args.spec}: {exc}") from exc
    else:
        base = sim.default_spec(tuple(args.dims), seed, args.noise)
    out = Path(args.out or "corpus")
    manifest = sim.generate_corpus(base, args.n, args.swap_rate, seed, out)
    print(out / "manifest.json")
    return RunManifest("simulate", {"n": args.n, "swap_rate": args.swap_rate,
                                    "base_spec": base.to_dict()},
                       {"spec": args.spec}, {"manifest": str(out / "manifest.json"),
                                             "subjects": [s["subject_id"] for s in manifest["subjects"]]},
                       seed), out


def cmd_train(args):
    cfg = train_config_from(_load_config(args))
    cfg.validate()
    if not cfg.corpus_manifest:
        raise UsageError("corpus_manifest is required")
    if not Path(cfg.corpus_manifest).exists():
        raise UsageError(f"corpus not found: {cfg.corpus_manifest}")
    out = Path(cfg.out_dir)
    manifest = RunManifest("train", cfg.to_dict(), {"corpus": cfg.corpus_manifest}, {}, cfg.seed)
    if args.folds:
        results = run_cross_validation(cfg, folds=args.folds)
        table = format_cv_table(results, f"{cfg.input_mode.value}/{cfg.loss_mode.value}")
        (out / "cv_report.txt").write_text(table + "\n")
        print(table)
        manifest.outputs = {"cv_report": str(out / "cv_report.txt"),
                            "folds": [{"fold": r.fold, "test": r.test_ids} for r in results]}
        return manifest, out
    try:
        ckpt, record, _ = run_training(cfg)
    except DivergenceError as exc:
        manifest.outputs = {"train_record": str(out / "train_record.csv")}
        manifest.extra = {"diverged_at_step": exc.step}
        manifest.write(out)
        raise
    manifest.outputs = {"checkpoint": str(ckpt), "train_record": str(out / "train_record.csv")}
    manifest.extra = {"steps": len(record.history), "epoch_seconds": record.epoch_seconds}
    print(ckpt)
    return manifest, out


def cmd_predict(args):
    generator, config = load_generator(args.checkpoint)
    mode = generator.input_mode
    if args.input_mode and InputMode(args.input_mode.upper()) is not mode:
        raise UsageError(f"checkpoint was trained with {mode.value}, not {args.input_mode}")
    tile = tuple(args.tile) if args.tile else tuple(config["generator"]["crop_size"])
    if len(tile) == 1:
        tile = tile * 3
    dirs = _study_dirs(args.study)
    out = Path(args.out or "pred")
    single = len(dirs) == 1 and (Path(args.study) / "ip.dvol").is_file()
    seconds = {}
    with thread_limit():
        for sid, d in dirs.items():
            ip = read_volume(d / "ip.dvol", Channel.IP)
            op = read_volume(d / "op.dvol", Channel.OP) if (d / "op.dvol").is_file() else None
            if op is None and mode is InputMode.DUAL_IP_OP:
                raise UsageError(f"{sid}: dual-input checkpoint needs op.dvol")
            have_fw = (d / "fat.dvol").is_file() and (d / "water.dvol").is_file()
            if have_fw and op is not None:
                ns, scale = normalize_study(_read_study(d, sid))
                pair = EchoPair(ns.ip, ns.op)
            else:
                vols = [ip] + ([op] if op is not None else [])
                scale = joint_scale(vols)
                normed = normalize_volumes(vols, scale)
                pair = EchoPair(normed[0], normed[1] if op is not None else None)
            t0 = time.perf_counter()
            pf, pw = predict_full(generator, pair, tile)
            seconds[sid] = time.perf_counter() - t0
            target = out if single else out / sid
            target.mkdir(parents=True, exist_ok=True)
            write_volume(pf.with_data(pf.data * scale), target / PRED_FILES["fat"])
            write_volume(pw.with_data(pw.data * scale), target / PRED_FILES["water"])
            log.info("%s predicted in %.2f s", sid, seconds[sid])
    return RunManifest("predict", {"checkpoint_config": config, "tile": list(tile)},
                       {"checkpoint": args.checkpoint, "study": args.study},
                       {"predictions": str(out), "subjects": sorted(dirs)}, None,
                       extra={"predict_seconds": seconds}), out


def cmd_evaluate(args):
    truth = _study_dirs(args.truth, args.which)
    pred = _pred_dirs(args.pred, args.pred_which)
    report = MetricsReport()
    for sid in _matched(pred, truth, "predictions", "truth"):
        study = _read_study(truth[sid], sid)
        ns, pf, pw = _normalised_pair(study, *_read_prediction(pred[sid]))
        report.add(subject_metrics(sid, pf, pw, ns.fat, ns.water))
    csv_path = Path(args.out or "metrics.csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(csv_path)
    print(report.table_line())
    return RunManifest("evaluate", {"which": args.which}, {"pred": args.pred, "truth": args.truth},
                       {"csv": str(csv_path)}), csv_path.parent


def cmd_swapmap(args):
    orig = _study_dirs(args.original, args.which)
    pred = _pred_dirs(args.pred, args.pred_which)
    out = Path(args.out or "swapmaps")
    maps, per_subject, dims = [], {}, None
    for sid in _matched(pred, orig, "predictions", "original"):
        study = _read_study(orig[sid], sid)
        ns, pf, pw = _normalised_pair(study, *_read_prediction(pred[sid]))
        lm = swap_label_map(ns.fat, ns.water, pf, pw, args.threshold, args.min_cluster)
        (out / sid).mkdir(parents=True, exist_ok=True)
        write_volume(lm.mask, out / sid / "swap_label.dvol")
        maps.append(lm)
        dims = study.dims
        per_subject[sid] = {"clusters": len(lm.clusters), "voxels": lm.voxels,
                            "sizes": [c.size for c in lm.clusters]}
    stats = fp_statistics(maps, dims)
    (out / "fp_statistics.json").write_text(json.dumps(
        {"aggregate": stats.to_dict(), "subjects": per_subject}, indent=1, sort_keys=True))
    print(stats.format())
    return RunManifest("swapmap", {"threshold": args.threshold, "min_cluster": args.min_cluster,
                                   "which": args.which},
                       {"original": args.original, "pred": args.pred},
                       {"stats": str(out / "fp_statistics.json")}), out


def write_pgm(path, image):
    """Binary 8-bit portable graymap of a [0, 1] image; rows follow the
    image's first axis."""
    a = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pix = np.round(a * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path} is not a binary graymap")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def mid_slices(vol, axial=None, coronal=None):
    """Axial (fixed z) and coronal (fixed y) planes, defaulting to mid-volume."""
    nx, ny, nz = vol.shape
    z = nz // 2 if axial is None else axial
    y = ny // 2 if coronal is None else coronal
    return {"axial": vol[:, :, z].T, "coronal": vol[:, y, :].T[::-1]}


def cmd_report(args):
    study = _read_study(Path(args.original), "original")
    pf, pw = _read_prediction(args.pred)
    ns, pf, pw = _normalised_pair(study, pf, pw)
    out = Path(args.out or "report")
    out.mkdir(parents=True, exist_ok=True)
    panels = {
        "fat_original": ns.fat.data, "fat_predicted": pf.data,
        "fat_difference": np.abs(ns.fat.data - pf.data),
        "water_original": ns.water.data, "water_predicted": pw.data,
        "water_difference": np.abs(ns.water.data - pw.data),
    }
    images = []
    for name, vol in panels.items():
        for view, img in mid_slices(vol, args.axial_slice, args.coronal_slice).items():
            path = out / f"{name}_{view}.pgm"
            write_pgm(path, img)
            images.append(str(path))
    summary = {name: {"max": float(v.max()), "mean": float(v.mean())}
               for name, v in panels.items() if name.endswith("difference")}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return RunManifest("report", {"axial_slice": args.axial_slice,
                                  "coronal_slice": args.coronal_slice},
                       {"original": args.original, "pred": args.pred},
                       {"images": images, "summary": str(out / "summary.json")}), out


# -- parser ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="dixongan", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic corpus")
    p.add_argument("--spec", help="phantom spec JSON (default: built-in torso)")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--swap-rate", type=float, default=0.0)
    p.add_argument("--dims", type=int, nargs=3, default=[48, 48, 48])
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    p.add_argument("--config", help="key=value file of TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--folds", type=int, default=0, help="run k-fold cross-validation instead")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict fat/water volumes")
    p.add_argument("checkpoint")
    p.add_argument("study", help="study directory or corpus root")
    p.add_argument("--input-mode", help="expected input mode; must match the checkpoint")
    p.add_argument("--tile", type=int, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="SSIM/PSNR of predictions against reference studies")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--which", default="scanner", choices=("scanner", "truth"))
    p.add_argument("--pred-which", default="truth", choices=("scanner", "truth"),
                   help="side to read when the prediction argument is a corpus root")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("swapmap", help="swap label maps and false-positive statistics")
    p.add_argument("original")
    p.add_argument("pred")
    p.add_argument("--which", default="scanner", choices=("scanner", "truth"))
    p.add_argument("--pred-which", default="truth", choices=("scanner", "truth"),
                   help="side to read when the prediction argument is a corpus root")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--min-cluster", type=int, default=DEFAULT_MIN_CLUSTER)
    p.add_argument("--out")
    p.set_defaults(func=cmd_swapmap)

    p = sub.add_parser("report", help="mid-slice graymaps of original, predicted and difference")
    p.add_argument("original", help="study directory")
    p.add_argument("pred", help="directory with fat_hat.dvol and water_hat.dvol")
    p.add_argument("--axial-slice", type=int)
    p.add_argument("--coronal-slice", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        manifest, out = args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, DirectiveError, FormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest.wall_clock = time.perf_counter() - t0
    manifest.write(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
