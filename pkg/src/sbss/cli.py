"""Command-line entry point: ``sbss {synth,train-ecn,infer,eval,profile,budget}``.

Every command reads a JSON run spec (``--config``); see README for the schema.
Relative paths inside a spec are resolved against the spec file's directory.
Set ``SBSS_LOG=DEBUG|INFO|WARNING`` for verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import formats
from .backend import (DEFAULT_FLOPS_PER_PIXEL, FileBackend, MissingMapError, OracleBackend,
                      OracleConfig, SceneProfile, SceneSet, generate_scenes)
from .ecm import FusionMode
from .metrics import accumulate, miou, profile_scales
from .pipeline import BackendError, ConfigError, RunConfig, run_ms, run_sbss
from .scheduler import PRESETS, ScaleSchedule, schedule_ratio
from .trainer import TrainConfig, train_schedule

log = logging.getLogger("sbss")


# --- run spec -----------------------------------------------------------------

class RunSpec:
    """Validated view of a JSON run spec."""

    def __init__(self, raw: dict, base: Path = Path("."), seed=None, out=None):
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        self.raw = raw
        self.base = Path(base)
        # a top-level seed (or --seed) overrides every seed in the spec
        self.seed_given = seed is not None or "seed" in raw
        self.seed = int(raw.get("seed", 0) if seed is None else seed)
        self.out = self.path(out if out is not None else raw.get("out", "out"))
        self.scheme = raw.get("scheme", "ecs_ms")
        self.classes = raw.get("classes")
        try:
            self.mode = FusionMode(raw.get("mode", "ecn_act"))
        except ValueError:
            raise ConfigError(f"mode: unknown fusion mode {raw.get('mode')!r}") from None

    @classmethod
    def load(cls, path, seed=None, out=None):
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls(raw, path.parent, seed, out)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def _get(self, key, default=None, required=False):
        if key not in self.raw:
            if required:
                raise ConfigError(f"{key}: missing required field")
            return default
        return self.raw[key]

    @property
    def patch(self):
        patch = self._get("patch", required=True)
        if not (isinstance(patch, list) and len(patch) == 2):
            raise ConfigError(f"patch: expected [height, width], got {patch!r}")
        return tuple(int(p) for p in patch)

    def schedule(self) -> ScaleSchedule:
        scheme = self.scheme
        try:
            if scheme == "custom":
                scales = self._get("scales", required=True)
                fractions = self._get("fractions", [1] * len(scales))
                return ScaleSchedule(scales, fractions, self.patch, "custom")
            if scheme == "ms" and "scales" in self.raw:
                return PRESETS["ms"](self.patch, tuple(self.raw["scales"]))
            if scheme not in PRESETS:
                raise ConfigError(f"scheme: unknown {scheme!r}, expected one of "
                                  f"{sorted(PRESETS) + ['custom']}")
            return PRESETS[scheme](self.patch)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def corpus(self) -> Path:
        return self.path(self._get("corpus", required=True))

    def backend(self):
        spec = self._get("backend", required=True)
        kind = spec.get("kind")
        fpp = float(spec.get("flops_per_pixel", DEFAULT_FLOPS_PER_PIXEL))
        if fpp <= 0:
            raise ConfigError("backend.flops_per_pixel: must be positive")
        if kind == "file":
            if "manifest" not in spec:
                raise ConfigError("backend.manifest: missing required field")
            return FileBackend.from_manifest(self.path(spec["manifest"]), fpp)
        if kind == "oracle":
            o = dict(spec.get("oracle", {}))
            if self.seed_given or "seed" not in o:
                o["seed"] = self.seed
            try:
                cfg = OracleConfig(classes=int(o.pop("classes", self.classes or 0)), **o)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"backend.oracle: {exc}") from None
            labels_dir = self.path(spec.get("labels", self.corpus() / "labels"))
            labels = {p.stem: formats.read_pgm(p) for p in sorted(labels_dir.glob("*.pgm"))}
            return OracleBackend(cfg, labels, fpp)
        raise ConfigError(f"backend.kind: expected 'file' or 'oracle', got {kind!r}")

    def weights(self, n):
        from .formats import read_ecw
        paths = self._get("weights")
        if paths is None:
            wdir = self.path(self._get("weights_dir", self.out))
            paths = [wdir / f"ecn_t{i}.ecw" for i in range(n)]
        if isinstance(paths, str):
            wdir = self.path(paths)
            paths = [wdir / f"ecn_t{i}.ecw" for i in range(n)]
        if len(paths) != n:
            raise ConfigError(f"weights: need {n} files (one per transition), got {len(paths)}")
        return [read_ecw(self.path(p)) for p in paths]

    def train_config(self) -> TrainConfig:
        t = dict(self._get("train", {}))
        if self.seed_given or "seed" not in t:
            t["seed"] = self.seed
        try:
            return TrainConfig(**t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None


def load_corpus(root: Path) -> SceneSet:
    root = Path(root)
    label_paths = sorted((root / "labels").glob("*.pgm"))
    ids, images, labels = [], [], []
    for lp in label_paths:
        ip = root / "images" / f"{lp.stem}.ppm"
        if not ip.exists():
            raise FileNotFoundError(f"image for {lp.stem!r} not found: {ip}")
        ids.append(lp.stem)
        images.append(formats.read_ppm(ip))
        labels.append(formats.read_pgm(lp))
    if not ids:
        raise FileNotFoundError(f"no labels found under {root / 'labels'}")
    return SceneSet(ids, images, labels)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --- commands -----------------------------------------------------------------

def cmd_synth(spec: RunSpec, args) -> int:
    s = dict(spec.raw.get("synth", {}))
    classes = int(s.get("classes", spec.classes or 4))
    if classes < 2:
        raise ConfigError(f"synth.classes: need at least 2, got {classes}")
    if "fractions" in s:
        try:
            profile = SceneProfile(tuple(s["fractions"]), tuple(s.get("radius", [])))
        except ValueError as exc:
            raise ConfigError(f"synth.profile: {exc}") from None
    else:
        profile = SceneProfile.default(classes)
    count = int(s.get("count", 10))
    dims = tuple(int(d) for d in s.get("dims", [128, 128]))
    seed = spec.seed if spec.seed_given else int(s.get("seed", 0))
    scenes = generate_scenes(profile, count, dims, seed, prefix=s.get("prefix", "scene"))
    out = spec.out
    formats.ensure_dir(out / "images")
    formats.ensure_dir(out / "labels")
    for image_id, img, lab in scenes:
        formats.write_ppm(out / "images" / f"{image_id}.ppm", img)
        formats.write_pgm(out / "labels" / f"{image_id}.pgm", lab)
    _write_json(out / "manifest.json", dict(
        ids=scenes.ids, classes=profile.classes, dims=list(dims), seed=seed,
        profile=dict(fractions=[float(f) for f in profile.fractions],
                     radius=[float(r) for r in profile.radius])))
    log.info("wrote %d scenes to %s", count, out)
    return 0


def cmd_train_ecn(spec: RunSpec, args) -> int:
    sched = spec.schedule()
    if sched.transitions < 1:
        raise ConfigError("scales: training needs at least two scales")
    backend = spec.backend()
    scenes = load_corpus(spec.corpus())
    cfg = spec.train_config()
    chained = bool(spec.raw.get("train_chained", True))
    out = formats.ensure_dir(spec.out)
    lines = {i: [] for i in range(sched.transitions)}

    def log_fn(i, it, lr, loss):
        lines[i].append(f"{it}\t{lr:.6g}\t{loss:.6f}")
        log.info("transition %d iter %d lr %.3g loss %.5f", i, it, lr, loss)

    weights = train_schedule(cfg, backend, scenes, sched, spec.mode, chained,
                             args.workers, log_fn)
    for i, w in enumerate(weights):
        formats.write_ecw(out / f"ecn_t{i}.ecw", w)
        with open(out / f"train_t{i}.log", "w", encoding="utf-8") as fh:
            fh.write("iteration\tlr\tloss\n")
            fh.write("".join(line + "\n" for line in lines[i]))
    return 0


def _targets(spec: RunSpec, args):
    if args.image:
        p = Path(args.image)
        return [(p.stem, formats.read_ppm(p))]
    root = spec.corpus()
    paths = sorted((root / "images").glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no images under {root / 'images'}")
    return [(p.stem, formats.read_ppm(p)) for p in paths]


def cmd_infer(spec: RunSpec, args) -> int:
    sched = spec.schedule()
    backend = spec.backend()
    out = formats.ensure_dir(spec.out)
    if spec.scheme in ("ms", "ss"):
        runner = lambda image_id, img: run_ms(backend, img, sched.scales, sched.patch,  # noqa: E731
                                              image_id, args.workers)
    else:
        weights = spec.weights(sched.transitions) if spec.mode.needs_weights else None
        cfg = RunConfig(sched, backend, spec.mode, weights, args.workers)
        runner = lambda image_id, img: run_sbss(cfg, img, image_id)  # noqa: E731
    for image_id, img in _targets(spec, args):
        res = runner(image_id, img)
        formats.write_pgm(out / f"{image_id}.pgm", res.labels)
        formats.write_tns(out / f"{image_id}.tns", res.probs)
        _write_json(out / f"{image_id}.ledger.json", res.ledger.report())
        _write_json(out / f"{image_id}.diag.json", res.diagnostics)
        log.info("%s: ratio %.4f", image_id, res.ledger.ratio)
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = sorted(pred_dir.glob("*.pgm"))
    if not preds:
        raise FileNotFoundError(f"no predictions (*.pgm) under {pred_dir}")
    pairs = []
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise FileNotFoundError(f"ground truth missing for {p.name}: {g}")
        pairs.append((formats.read_pgm(p), formats.read_pgm(g)))
    classes = args.classes
    if classes is None:
        top = 0
        for pred, gt in pairs:
            top = max(top, int(pred.max()), int(gt[gt != 255].max(initial=0)))
        classes = top + 1
    cm = np.zeros((classes, classes), dtype=np.uint64)
    for pred, gt in pairs:
        cm = accumulate(cm, pred, gt)
    iou, mean = miou(cm)
    out = formats.ensure_dir(args.out or pred_dir)
    _write_json(out / "metrics.json", dict(
        classes=classes, images=len(pairs), miou=mean,
        iou=[None if np.isnan(v) else float(v) for v in iou],
        confusion=cm.astype(int).tolist()))
    with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("class,iou\n")
        for c, v in enumerate(iou):
            fh.write(f"{c},{'' if np.isnan(v) else f'{v:.6f}'}\n")
        fh.write(f"mean,{mean:.6f}\n")
    print(f"mIoU {mean:.6f} over {len(pairs)} images")
    return 0


def cmd_profile(spec: RunSpec, args) -> int:
    backend = spec.backend()
    scenes = load_corpus(spec.corpus())
    scales = ([float(s) for s in args.scales.split(",")] if args.scales
              else list(spec.raw.get("profile_scales", PRESETS["ms"]((1, 1)).scales)))
    classes = spec.classes or backend.cfg.classes
    table = profile_scales(backend, scenes, scales, spec.patch, classes, args.workers)
    out = formats.ensure_dir(spec.out)
    (out / "scale_preference.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "scale_preference.json").write_text(table.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(table.to_csv())
    return 0


def cmd_budget(spec, args) -> int:
    patch = tuple(int(p) for p in args.patch.split("x")) if args.patch else (512, 512)
    rows = [(name, PRESETS[name](patch)) for name in ("ms", "ecs_ms", "ss", "ecs_ss")]
    if spec is not None:
        rows.append(("config", spec.schedule()))
    print(f"{'schedule':<10} {'scales':<36} {'ratio':>8}")
    for name, sched in rows:
        scales = ",".join(f"{s:g}" for s in sched.scales)
        print(f"{name:<10} {scales:<36} {schedule_ratio(sched):>8.4f}")
    return 0


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sbss", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run spec")
        p.add_argument("--seed", type=int, default=None, help="override every seed in the spec")
        p.add_argument("--workers", type=int, default=1, help="patch worker threads")
        p.add_argument("--out", default=None, help="output directory")
        return p

    common(sub.add_parser("synth", help="generate a synthetic scene corpus"))
    common(sub.add_parser("train-ecn", help="train one correction network per transition"))
    p = common(sub.add_parser("infer", help="run the configured scheme"))
    p.add_argument("--image", default=None, help="single PPM image instead of the corpus")
    p = sub.add_parser("eval", help="confusion matrix and mIoU of PGM predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--out", default=None)
    p = common(sub.add_parser("profile", help="per-class IoU at each resizing scale"))
    p.add_argument("--scales", default=None, help="comma-separated scales")
    p = common(sub.add_parser("budget", help="processed-area ratio of each schedule"),
               config_required=False)
    p.add_argument("--patch", default=None, help="patch size as HxW")
    return ap


def _setup_logging():
    level = os.environ.get("SBSS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            return cmd_eval(args)
        if getattr(args, "workers", 1) < 1:
            raise ConfigError(f"--workers: must be >= 1, got {args.workers}")
        spec = RunSpec.load(args.config, args.seed, args.out) if args.config else None
        handler = {"synth": cmd_synth, "train-ecn": cmd_train_ecn, "infer": cmd_infer,
                   "profile": cmd_profile, "budget": cmd_budget}[args.command]
        return handler(spec, args)
    except (ConfigError, formats.CorruptFileError, BackendError, MissingMapError,
            FileNotFoundError, ValueError) as exc:
        print(f"sbss: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
