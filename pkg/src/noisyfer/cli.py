"""Command-line entry point: ``noisyfer <command> [options]``.

Every command reads one optional config file (``--config``) plus ``--set
key=value`` overrides and command-specific flags, then writes its outputs
under ``--run-dir`` together with ``config.txt``, the fully resolved config.
Rerunning with that snapshot and the same seed reproduces the run.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, experiments, geometry
from .config import RunConfig, defaults_table, dump_config, load_config
from .data import CLASSES, Manifest, VideoSample, generate_synthetic, load_manifest, save_manifest
from .errors import InputError, NoisyFerError, NumericError, UsageError
from .model import Model
from .selftrain import BalanceSpec, balance, iterate, pseudo_label, unbalanced
from .tensor import Rng
from .training import evaluate, model_gradcheck, train

log = logging.getLogger("noisyfer")

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so usage errors map to exit 1."""

    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


# -- run directory and output helpers --------------------------------------


class RunDir:
    def __init__(self, path, force: bool):
        self.path = Path(path)
        if self.path.exists() and any(self.path.iterdir()) and not force:
            raise UsageError(f"run directory {self.path} is not empty; pass --force to reuse it")
        self.path.mkdir(parents=True, exist_ok=True)

    def file(self, name: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.file(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p

    def jsonl(self, name: str, records) -> Path:
        p = self.file(name)
        with p.open("w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        return p


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args, extra: dict[str, str] | None = None) -> RunConfig:
    pairs = _overrides(args.set)
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = str(args.seed)
    pairs.update(extra or {})
    return load_config(args.config, pairs)


def _start(args, cfg: RunConfig) -> RunDir:
    run = RunDir(args.run_dir, args.force)
    run.file("config.txt").write_text(dump_config(cfg))
    return run


def _data_paths(args) -> tuple[Path, Path]:
    if args.data is not None:
        d = Path(args.data)
        return d / "labelled.json", d / "validation.json"
    if args.labelled is None:
        raise UsageError("give --data DIR or --labelled PATH")
    return Path(args.labelled), Path(args.validation) if args.validation else None


def _check_side(cfg: RunConfig, videos) -> None:
    side = cfg.model.backbone.input_side
    for v in videos:
        if v.frames.shape[1:] != (9, side, side):
            raise InputError(f"video {v.video_id} frames {v.frames.shape[1:]} do not match the model input (9, {side}, {side})")


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    run = _start(args, cfg)
    lab, unl, val, truth = generate_synthetic(cfg.data, Rng(cfg.seed))
    save_manifest(lab, run.file("labelled.json"))
    save_manifest(unl, run.file("unlabelled.json"))
    save_manifest(val, run.file("validation.json"))
    run.write_json("truth.json", truth)
    print(f"wrote {len(lab)} labelled, {len(unl)} unlabelled, {len(val)} validation videos to {run.path}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _resolve(args)
    run = _start(args, cfg)
    try:
        frames = np.load(args.frames)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read frames {args.frames}: {exc}") from exc
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise InputError(f"frames must be n x H x W x 3, got {frames.shape}")
    h, w = frames.shape[1:3]
    try:
        lines = Path(args.landmarks).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read landmarks {args.landmarks}: {exc}") from exc
    records = geometry.parse_records(lines, frame_size=(w, h))
    if len(records) != len(frames):
        raise InputError(f"{len(records)} landmark records for {len(frames)} frames")
    specs = geometry.region_specs(cfg.geometry.side)
    vid = args.video_id or Path(args.frames).stem
    diagnostics = []
    entries = []
    if args.label is None:
        spans = geometry.validate_clips(records, cfg.clip_rule(), (w, h), fixed_length=args.fixed_length)
        run.write_json("clips.json", [{"video_id": vid, "start": s, "length": n} for s, n in spans])
        first = records[0].frame_index
        for start, n in spans:
            lo = start - first
            stack, kept = geometry.build_video_stack(frames[lo : lo + n], records[lo : lo + n], specs)
            entries.append(VideoSample(f"{vid}-{start:06d}", stack, None))
            diagnostics.append({"video_id": entries[-1].video_id, "kept_frames": len(kept), "span": n})
    else:
        if not 0 <= args.label < len(CLASSES):
            raise InputError(f"label {args.label} outside the class table")
        stack, kept = geometry.build_video_stack(frames, records, specs)
        entries.append(VideoSample(vid, stack, args.label))
        diagnostics.append({"video_id": vid, "kept_frames": len(kept), "span": len(frames)})
    manifest = Manifest(args.dataset_id, entries, illumination_corrected=args.illumination_corrected)
    save_manifest(manifest, run.file("manifest.json"))
    run.jsonl("diagnostics.jsonl", diagnostics)
    print(f"wrote {len(entries)} video(s) to {run.path / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    extra = {"train.epochs": str(args.epochs)} if args.epochs is not None else {}
    cfg = _resolve(args, extra)
    lab_path, val_path = _data_paths(args)
    labelled = load_manifest(lab_path).entries
    validation = load_manifest(val_path).entries if val_path else None
    _check_side(cfg, labelled)
    run = _start(args, cfg)
    model = Model(cfg.model, seed=cfg.seed)
    with run.file("metrics.jsonl").open("w") as fh:

        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        res = train(model, labelled, cfg.train_config(), validation, on_epoch=on_epoch)
    checkpoint.save_model(run.file("model.ckpt"), res.model)
    run.write_json("summary.json", {"best_epoch": res.best_epoch, "best_val_accuracy": res.best_accuracy,
                                    "epochs": len(res.history)})
    print(f"best epoch {res.best_epoch} val accuracy {res.best_accuracy}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model, _ = checkpoint.load_model(args.checkpoint)
    videos = load_manifest(args.manifest).entries
    if any(v.label is None for v in videos):
        raise InputError("eval needs a fully labelled manifest")
    run = _start(args, cfg)
    rep = evaluate(model, videos)
    run.write_json("metrics.json", rep.to_dict())
    diag = []
    for i in range(0, len(videos), 64):
        chunk = videos[i : i + 64]
        res = model.forward(chunk)
        for d, v, row in zip(res.diagnostics([v.video_id for v in chunk]), chunk, res.logits.data):
            d.update({"label": v.label, "prediction": int(row.argmax())})
            diag.append(d)
    run.jsonl("diagnostics.jsonl", diag)
    print(f"accuracy {rep.accuracy:.4f} macro-F1 {rep.macro_f1:.4f}")
    return 0


def cmd_pseudo_label(args) -> int:
    cfg = _resolve(args)
    model, _ = checkpoint.load_model(args.checkpoint)
    pool = load_manifest(args.manifest).entries
    run = _start(args, cfg)
    pl = pseudo_label(model, pool)
    run.jsonl(
        "pseudo.jsonl",
        ({"video_id": v, "label": int(c), "confidence": float(p)} for v, c, p in zip(pl.video_ids, pl.labels, pl.confidences)),
    )
    if args.labelled:
        target = load_manifest(args.labelled).class_counts()
        s = cfg.selftrain
        bal = balance(pl, BalanceSpec(tuple(int(c) for c in target), s.minority, s.majority, s.threshold))
    else:
        bal = unbalanced(pl)
    run.write_json("balance.json", {"before": bal.before, "after": bal.after, "warnings": bal.warnings,
                                    "entries": [list(e) for e in bal.entries]})
    print(f"pseudo-labelled {len(pl)} videos; histogram {bal.before} -> {bal.after}")
    return 0


def cmd_selftrain(args) -> int:
    extra = {}
    if args.generations is not None:
        extra["selftrain.max_generations"] = str(args.generations)
    if args.ratio is not None:
        extra["selftrain.ratio"] = str(args.ratio)
    if args.eps_sat is not None:
        extra["selftrain.eps_sat"] = repr(args.eps_sat)
    if args.batch_b is not None:
        extra["selftrain.batch_b"] = str(args.batch_b)
    if args.no_noise:
        extra["noise.enabled"] = "false"
    if args.no_augment:
        extra["noise.augment"] = "false"
    if args.no_dropout:
        extra["noise.dropout_p"] = "0.0"
    if args.no_balance:
        extra["selftrain.balance"] = "false"
    cfg = _resolve(args, extra)
    d = Path(args.data)
    labelled = load_manifest(d / "labelled.json").entries
    unlabelled = load_manifest(d / "unlabelled.json").entries
    validation = load_manifest(d / "validation.json").entries
    truth = None
    if (d / "truth.json").exists():
        truth = json.loads((d / "truth.json").read_text())
    _check_side(cfg, labelled + unlabelled + validation)
    teacher = None
    if args.teacher:
        teacher, _ = checkpoint.load_model(args.teacher)
    run = _start(args, cfg)

    def on_generation(rep, model):
        g = rep["generation"]
        name = "teacher" if g == 0 else f"gen_{g:02d}"
        if g > 0:
            run.write_json(f"reports/{name}.json", rep)
        else:
            run.write_json("reports/teacher.json", rep)
        checkpoint.save_model(run.file(f"checkpoints/{name}.ckpt"), model, {"generation": g})
        log.info("generation %d val accuracy %.4f", g, rep["val_accuracy"])

    state = iterate(labelled, unlabelled, validation, cfg.selftrain_config(), teacher, truth, on_generation)
    run.jsonl(
        "metrics.jsonl",
        ({"generation": g, **rec} for g, hist in enumerate(state.epoch_logs) for rec in hist),
    )
    checkpoint.save_model(run.file("checkpoints/best.ckpt"), state.best_model(), {"generation": state.best_generation})
    run.write_json("summary.json", {"history": state.history, "best_generation": state.best_generation,
                                    "best_val_accuracy": state.best_accuracy})
    print("validation accuracy by generation: " + ", ".join(f"{a:.4f}" for a in state.history))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    rng = Rng(cfg.seed)
    side = cfg.model.backbone.input_side
    model = Model(cfg.model, seed=cfg.seed)
    video = rng.uniform(0.0, 1.0, (args.frames, 9, side, side))
    label = int(rng.integers(0, cfg.model.num_classes))
    res = model_gradcheck(model, video, label, lambda_f=cfg.train.lambda_f, n_coords=args.coords, seed=cfg.seed)
    print(f"max relative error {res['max_rel_error']:.3e} over {res['checked']} coordinates")
    if args.run_dir:
        run = _start(args, cfg)
        run.write_json("gradcheck.json", {"max_rel_error": res["max_rel_error"], "checked": res["checked"]})
    if not res["max_rel_error"] < GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: {res['max_rel_error']:.3e} >= {GRADCHECK_TOLERANCE}")
    return 0


def _print_table(title, rows):
    print(title)
    for name, acc in rows:
        print(f"  {name:<52s} {acc:6.2f}%")


def cmd_report(args) -> int:
    cfg = _resolve(args)
    if args.defaults:
        print(defaults_table())
        return 0
    _print_table("Published AFEW 8.0 validation accuracy (documentation only):", experiments.PUBLISHED_AFEW)
    _print_table("Published CK+ accuracy (documentation only):", experiments.PUBLISHED_CKPLUS)
    _print_table("Published component ladder on AFEW 8.0 (documentation only):", experiments.PUBLISHED_LADDER)
    if not args.ablation:
        return 0
    if not args.run_dir:
        raise UsageError("report --ablation needs --run-dir")
    run = _start(args, cfg)
    lab, unl, val, _ = generate_synthetic(cfg.data, Rng(cfg.seed))
    _check_side(cfg, lab.entries)
    st = cfg.selftrain_config() if args.generations else None
    if st is not None:
        st = replace(st, max_generations=args.generations, eps_sat=-1.0)
    print("Desk-scale ladder on synthetic data:")
    rows = []

    def on_row(row):
        rows.append(row)
        print(f"  {row['step']:<52s} {100 * row['val_accuracy']:6.2f}%")

    experiments.run_ladder(lab.entries, unl.entries, val.entries, cfg.model, cfg.train_config(), st, on_row)
    run.jsonl("ablation.jsonl", rows)
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--run-dir", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty run directory")

    p = _Parser(prog="noisyfer", description="Region-attention video emotion classifier with noisy-student self-training.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text, needs_run_dir=True):
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        sp.set_defaults(func=fn, needs_run_dir=needs_run_dir)
        return sp

    add("gen-data", cmd_gen_data, "generate synthetic labelled, unlabelled and validation manifests")

    sp = add("preprocess", cmd_preprocess, "align and crop face/eyes/mouth regions from frames plus landmarks")
    sp.add_argument("--frames", required=True, help=".npy array, n x H x W x 3")
    sp.add_argument("--landmarks", required=True, help="landmark record text file, one line per frame")
    sp.add_argument("--video-id")
    sp.add_argument("--label", type=int, help="class index; omit for unlabelled clip extraction")
    sp.add_argument("--dataset-id", default="preprocessed")
    sp.add_argument("--fixed-length", action="store_true", help="emit fixed-length clips of min_frames")
    sp.add_argument("--illumination-corrected", action="store_true", help="record that frames were pre-corrected")

    for name, fn, text in (("train", cmd_train, "supervised training with best-epoch retention"),):
        sp = add(name, fn, text)
        sp.add_argument("--data", help="directory with labelled.json and validation.json")
        sp.add_argument("--labelled")
        sp.add_argument("--validation")
        sp.add_argument("--epochs", type=int)

    sp = add("eval", cmd_eval, "accuracy, macro-F1, confusion matrix and attention diagnostics")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)

    sp = add("pseudo-label", cmd_pseudo_label, "label an unlabelled manifest with a trained model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--labelled", help="labelled manifest giving the target class distribution for balancing")

    sp = add("selftrain", cmd_selftrain, "teacher plus noisy-student generations")
    sp.add_argument("--data", required=True, help="directory with labelled/unlabelled/validation manifests")
    sp.add_argument("--teacher", help="start from this checkpoint instead of training a teacher")
    sp.add_argument("--generations", type=int)
    sp.add_argument("--ratio", type=int)
    sp.add_argument("--batch-b", type=int)
    sp.add_argument("--eps-sat", type=float, help="saturation threshold in percentage points; negative disables")
    sp.add_argument("--no-noise", action="store_true")
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--no-dropout", action="store_true")
    sp.add_argument("--no-balance", action="store_true")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the full loss gradient", needs_run_dir=False)
    sp.add_argument("--coords", type=int, default=100)
    sp.add_argument("--frames", type=int, default=3)

    sp = add("report", cmd_report, "published tables, config defaults and the desk ablation ladder", needs_run_dir=False)
    sp.add_argument("--ablation", action="store_true", help="train the component ladder on synthetic data")
    sp.add_argument("--generations", type=int, default=0, help="self-training generations after the ladder")
    sp.add_argument("--defaults", action="store_true", help="print the config defaults table")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        if args.needs_run_dir and not args.run_dir:
            raise UsageError(f"{args.command} needs --run-dir")
        return args.func(args)
    except NoisyFerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
