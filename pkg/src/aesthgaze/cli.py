"""Command-line entry point for the full pipeline.

Subcommands: synth, preprocess, train, evaluate, ablate, explain, report.
Configuration lives in flat key=value files mirrored by flags; flags win.
Exit codes: 0 success, 1 pipeline failure (one-line error), 2 usage error.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dims
from .config import ScreenGeometry, StimulusConfig
from .errors import AesthgazeError, ConfigError
from .model import (FULL_MULTIMODAL, VIDEO_ONLY_MEANFILL, VIDEO_ONLY_ZERO,
                    ModelConfig, load_checkpoint, save_checkpoint)
from .preprocess import normalize_and_binarize, preprocess_record, save_aligned
from .records import load_manifest
from .splits import TEST, TRAIN, VAL, split_by_participant
from .synthgen import gen_dataset
from .train import (TrainConfig, VARIANTS, ablation_grid, compute_modality_stats,
                    evaluate, format_ablation_table, load_dataset,
                    stage1_pretrain, stage2_transfer, stage3_joint_finetune,
                    write_history_csv)
from .model import init_model

MODE_FLAGS = {
    "full": FULL_MULTIMODAL,
    "video-only-zero": VIDEO_ONLY_ZERO,
    "video-only-mean": VIDEO_ONLY_MEANFILL,
}

COMPLETE_MARKER = "COMPLETE"


def read_config_file(path):
    """Flat key = value file; '#' comments and blank lines ignored."""
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        cfg[key.strip()] = value.strip()
    return cfg


_STIM_INT = ("duration_s", "fps", "gaze_hz", "work_w", "work_h")
_GEO_KEYS = ("width_px", "height_px", "diagonal_inches", "viewing_distance_cm")


def build_stim_config(cfg: dict) -> StimulusConfig:
    stim_kw = {k: int(cfg[k]) for k in _STIM_INT if k in cfg}
    geo_kw = {}
    for k in _GEO_KEYS:
        if k in cfg:
            geo_kw[k] = int(cfg[k]) if k.endswith("_px") else float(cfg[k])
    return StimulusConfig(**stim_kw, geometry=ScreenGeometry(**geo_kw)).validate()


def build_model_config(cfg: dict, stim: StimulusConfig) -> ModelConfig:
    kw = {"seq_len": stim.duration_s, "in_h": stim.work_h, "in_w": stim.work_w}
    for key in ("lstm_hidden", "shared_lstm_layers", "head_hidden",
                "video_task_channels", "pupil_task_channels", "pupil_size"):
        if key in cfg:
            kw[key] = int(cfg[key])
    for key in ("video_channels", "pupil_channels"):
        if key in cfg:
            kw[key] = tuple(int(v) for v in cfg[key].split(","))
    return ModelConfig(**kw).validate()


def build_train_config(cfg: dict, args) -> TrainConfig:
    tc = TrainConfig()
    for key in ("stage1_epochs", "stage3_epochs", "batch_size", "patience"):
        if key in cfg:
            tc = replace(tc, **{key: int(cfg[key])})
    for key in ("learning_rate", "freeze_fraction", "modality_dropout"):
        if key in cfg:
            tc = replace(tc, **{key: float(cfg[key])})
    overrides = {
        "stage1_epochs": args.stage1_epochs,
        "stage3_epochs": args.stage3_epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "freeze_fraction": args.freeze_fraction,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            tc = replace(tc, **{key: value})
    return tc.validate()


def _load_cfg(args):
    return read_config_file(args.config) if args.config else {}


def _prepare_out(out_dir, force):
    out = Path(out_dir)
    if (out / COMPLETE_MARKER).exists() and not force:
        raise AesthgazeError(
            f"{out} holds a completed run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    marker = out / COMPLETE_MARKER
    if marker.exists():
        marker.unlink()
    return out


def _mark_complete(out):
    (Path(out) / COMPLETE_MARKER).write_text("ok\n")


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args):
    cfg = _load_cfg(args)
    stim = build_stim_config(cfg)
    out = _prepare_out(args.out, args.force)
    gen_dataset(args.participants, args.videos, args.seed, out, stim,
                videos_per_participant=args.videos_per_participant)
    (out / "stim.json").write_text(json.dumps(stim.to_dict(), sort_keys=True))
    _mark_complete(out)
    print(f"synth: wrote dataset for {args.participants} participants x "
          f"{args.videos} videos to {out}")
    return 0


def cmd_preprocess(args):
    data = Path(args.data)
    stim_path = data / "stim.json"
    if stim_path.exists():
        stim = StimulusConfig.from_dict(json.loads(stim_path.read_text()))
    else:
        stim = build_stim_config(_load_cfg(args))
    manifest = load_manifest(data / "manifest.txt")
    out = _prepare_out(args.out, args.force)

    # Ratings normalize per participant over all of that participant's trials.
    class _RatingsOnly:
        def __init__(self, ref):
            self.participant_id = ref.participant_id
            self.video_id = ref.video_id
            self.ratings = ref.ratings

    table = normalize_and_binarize([_RatingsOnly(r) for r in manifest.records])

    from .arrayio import read_array
    from .records import GazeTrace, SequenceRecord

    cache = {}     # one video's frame stack resident at a time
    for ref in sorted(manifest.records, key=lambda r: (r.video_id, r.participant_id)):
        if ref.video_id not in cache:
            cache.clear()
            cache[ref.video_id] = read_array(manifest.root / ref.frames_path,
                                             dtype=np.uint8)
        record = SequenceRecord(
            ref.participant_id, ref.video_id, cache[ref.video_id],
            GazeTrace.load_csv(manifest.root / ref.gaze_path), dict(ref.ratings))
        labels = table.binary[(ref.participant_id, ref.video_id)]
        sample = preprocess_record(record, labels, stim)
        save_aligned(sample, out / f"{ref.participant_id}_{ref.video_id}")
    (out / "stim.json").write_text(json.dumps(stim.to_dict(), sort_keys=True))
    _mark_complete(out)
    print(f"preprocess: wrote {len(manifest.records)} aligned samples to {out}")
    return 0


def _stim_from_aligned(aligned_dir, args):
    stim_path = Path(aligned_dir) / "stim.json"
    if stim_path.exists():
        return StimulusConfig.from_dict(json.loads(stim_path.read_text()))
    return build_stim_config(_load_cfg(args))


def _split_data(aligned_dir, seed, use_pupil=True, use_attn=True):
    data = load_dataset(aligned_dir, use_pupil=use_pupil, use_attn=use_attn)
    split = split_by_participant(sorted(set(data.participant_ids)), seed=seed)
    parts = {s: set(split.participants(s)) for s in (TRAIN, VAL, TEST)}
    subsets = {}
    for name, members in parts.items():
        idx = [i for i, p in enumerate(data.participant_ids) if p in members]
        subsets[name] = data.subset(idx)
    return subsets, split


def cmd_train(args):
    cfg = _load_cfg(args)
    stim = _stim_from_aligned(args.aligned, args)
    model_cfg = build_model_config(cfg, stim)
    train_cfg = build_train_config(cfg, args)
    out = _prepare_out(args.out, args.force)

    subsets, split = _split_data(args.aligned, train_cfg.seed)
    (out / "split.json").write_text(json.dumps(split.assignment, sort_keys=True))
    (out / "train_config.json").write_text(
        json.dumps({"model": model_cfg.to_dict(),
                    "train": {k: v for k, v in vars(train_cfg).items()},
                    "stim": stim.to_dict()},
                   sort_keys=True, default=list))

    model = init_model(model_cfg, train_cfg.seed)
    history = list(stage1_pretrain(model, subsets[TRAIN], subsets[VAL], train_cfg))
    save_checkpoint(out / "stage1.ckpt", model, metadata={"stage": 1})
    freeze_mask = stage2_transfer(model, train_cfg)
    history += stage3_joint_finetune(model, freeze_mask, subsets[TRAIN],
                                     subsets[VAL], train_cfg)
    stats = compute_modality_stats(subsets[TRAIN])
    save_checkpoint(out / "final.ckpt", model, stats=stats,
                    metadata={"stage": 3, "seed": train_cfg.seed})
    write_history_csv(out / "history.csv", history)
    report = evaluate(model, subsets[TEST], FULL_MULTIMODAL, stats,
                      batch_size=train_cfg.batch_size)
    (out / "report_full.txt").write_text(report.to_text())
    _mark_complete(out)
    print(report.to_text(), end="")
    return 0


def cmd_evaluate(args):
    run = Path(args.run)
    mode = MODE_FLAGS[args.mode]
    model, stats, _ = load_checkpoint(run / "final.ckpt")
    split = json.loads((run / "split.json").read_text())
    members = {p for p, s in split.items() if s == args.split}
    data = load_dataset(args.aligned, participants=members)
    report = evaluate(model, data, mode, stats)
    name = f"report_{args.mode.replace('-', '_')}.txt"
    (run / name).write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    stim = _stim_from_aligned(args.aligned, args)
    model_cfg = build_model_config(cfg, stim)
    train_cfg = build_train_config(cfg, args)
    out = _prepare_out(args.out, args.force)

    variants = VARIANTS if args.variant == "grid" else (args.variant,)
    grid = {}
    for variant in variants:
        use_pupil = variant not in ("no_pupil", "neither")
        use_attn = variant not in ("no_attention", "neither")
        subsets, _ = _split_data(args.aligned, train_cfg.seed,
                                 use_pupil=use_pupil, use_attn=use_attn)
        sub_grid = ablation_grid(model_cfg, train_cfg, subsets[TRAIN],
                                 subsets[VAL], subsets[TEST],
                                 variants=(variant,))
        grid.update(sub_grid)
    table = format_ablation_table(grid)
    (out / "ablation.txt").write_text(table)
    _mark_complete(out)
    print(table, end="")
    return 0


def cmd_explain(args):
    from .explain import grad_cam, save_saliency, temporal_saliency
    from .preprocess import load_aligned

    run = Path(args.run)
    model, _, _ = load_checkpoint(run / "final.ckpt")
    sample = load_aligned(Path(args.aligned) / args.sample)
    task = dims.by_name(args.task)
    if task.excluded:
        raise AesthgazeError(f"dimension {args.task!r} is excluded")
    cam = grad_cam(model, sample, task.id, layer=args.layer)
    temp = temporal_saliency(model, sample, task.id)
    out = Path(args.out or (run / "saliency" / f"{args.sample}_{args.task}"))
    save_saliency(out, sample, cam, temp)
    print(f"explain: wrote saliency for {args.sample}/{args.task} to {out}")
    return 0


def _parse_report(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def cmd_report(args):
    """Render accuracy tables from files produced by earlier commands."""
    run = Path(args.run)
    lines = []
    for rep in sorted(run.glob("report_*.txt")):
        values = _parse_report(rep)
        mode = values.get("mode", "?")
        lines.append(f"== accuracy ({mode}) ==")
        obj_names = [d.name for d in dims.objective_dimensions()]
        subj_names = [d.name for d in dims.subjective_dimensions()]
        lines.append("objective:  overall " + values["aggregate.objective"])
        for n in obj_names:
            lines.append(f"  {n:<16} {values['accuracy.' + n]}")
        lines.append("subjective: overall " + values["aggregate.subjective"])
        for n in subj_names:
            lines.append(f"  {n:<16} {values['accuracy.' + n]}")
        lines.append("")
    ablation = run / "ablation.txt"
    if ablation.exists():
        lines.append("== ablation ==")
        lines.append(ablation.read_text().rstrip())
        lines.append("")
    if not lines:
        raise AesthgazeError(f"no report inputs found under {run}")
    text = "\n".join(lines)
    (run / "report.txt").write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aesthgaze",
        description="Aesthetic evaluation from walkthrough video and eye tracking")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true",
                       help="overwrite a completed output directory")
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--participants", type=int, required=True)
    p.add_argument("--videos", type=int, required=True)
    p.add_argument("--videos-per-participant", type=int, default=8)
    p.set_defaults(fn=cmd_synth, seed=0)

    p = sub.add_parser("preprocess", help="manifest -> aligned samples")
    common(p)
    p.add_argument("--data", required=True, help="dataset dir with manifest.txt")
    p.set_defaults(fn=cmd_preprocess)

    def train_flags(p):
        p.add_argument("--stage1-epochs", type=int, default=None)
        p.add_argument("--stage3-epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--freeze-fraction", type=float, default=None)

    p = sub.add_parser("train", help="three-stage training")
    common(p)
    p.add_argument("--aligned", required=True)
    train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained run")
    common(p, out=False)
    p.add_argument("--run", required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default="full")
    p.add_argument("--split", choices=(TRAIN, VAL, TEST), default=TEST)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="modality ablation grid")
    common(p)
    p.add_argument("--aligned", required=True)
    p.add_argument("--variant", choices=VARIANTS + ("grid",), default="grid")
    train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("explain", help="Grad-CAM and temporal saliency")
    common(p, out=False)
    p.add_argument("--run", required=True)
    p.add_argument("--aligned", required=True)
    p.add_argument("--sample", required=True, help="sample id, e.g. P000_V001")
    p.add_argument("--task", required=True, help="dimension name")
    p.add_argument("--layer", default="spatial.video_taskconv",
                   choices=("spatial.video_taskconv", "temporal.video_taskconv"))
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("report", help="render tables from a finished run")
    common(p, out=False)
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except AesthgazeError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # pipeline failure with stage name
        print(f"error: {args.command}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
