"""Command-line interface: synth, train, propagate, eval, gradcheck, bench.

Exit codes: 0 success, 1 check/eval failure, 2 usage or input error. Every
JSON artifact embeds the resolved run configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import davis_palette, gen_synthetic, load_sequence, load_spec, save_sequence
from .errors import FormatError, InputError, TrainingError, UsageError
from .gradcheck import micro_config, model_gradcheck
from .metrics import evaluate_sequence
from .model import ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint
from .pipeline import AblationFlags, bench, bench_table, propagate, train_toy


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))


def _run_config(args: argparse.Namespace, command: str) -> dict:
    skip = {"func"}
    return {"command": command, **{k: v for k, v in sorted(vars(args).items()) if k not in skip}}


def cmd_synth(args) -> int:
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec["seed"] = args.seed
    seq = gen_synthetic(spec)
    save_sequence(seq, args.out_dir)
    _write_json(Path(args.out_dir) / f"{seq.name}_run_config.json", _run_config(args, "synth"))
    print(f"wrote {len(seq)} frames of '{seq.name}' to {args.out_dir}")
    return 0


def _model_config_from_args(args) -> ModelConfig:
    return ModelConfig(
        embed_dim=args.embed_dim, heads=args.heads, n_offsets=args.n_offsets,
        window_base=args.window_base,
        backbone_widths=tuple(int(x) for x in args.backbone_widths.split(",")),
        max_hw=tuple(int(x) for x in args.max_hw.split(",")),
        memorize_every=args.mem_every, memory_capacity=args.mem_cap, seed=args.seed,
    )


def cmd_train(args) -> int:
    if args.spec:
        spec = load_spec(args.spec)
        sequences = [gen_synthetic(spec)]
    else:
        sequences = [load_sequence(args.data, args.sequence)]
    model = SegmentationModel(_model_config_from_args(args))
    losses = train_toy(model, sequences, steps=args.steps, lr=args.lr, seed=args.seed,
                       log_every=args.log_every)
    save_checkpoint(args.checkpoint, model)
    payload = _run_config(args, "train")
    payload["final_loss"] = float(np.mean(losses[-10:])) if losses else None
    _write_json(Path(args.checkpoint).with_suffix(".json"), payload)
    print(f"saved checkpoint to {args.checkpoint}")
    return 0


def cmd_propagate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    seq = load_sequence(args.sequence_dir, args.sequence)
    model.config.memorize_every = args.mem_every
    model.config.memory_capacity = args.mem_cap
    flags = AblationFlags.from_disabled(args.disable.split(",") if args.disable else [])
    trace = propagate(model, seq, flow_mode=args.flow, flags=flags, seed=args.seed)

    out = Path(args.out)
    mask_dir = out / seq.name
    mask_dir.mkdir(parents=True, exist_ok=True)
    palette = davis_palette()
    for t, mask in sorted(trace.masks.items()):
        img = Image.fromarray(mask.labels, mode="P")
        img.putpalette(palette)
        img.save(mask_dir / f"{t:05d}.png")

    run_config = _run_config(args, "propagate")
    run_config["ablation"] = flags.to_dict()
    payload = {
        "sequence": seq.name,
        "frames": len(seq),
        "bank_sizes": trace.bank_sizes,
        "frame_times": trace.frame_times,
        "run_config": run_config,
    }
    gt = {t: seq.annotations[t] for t in trace.masks if t in seq.annotations}
    if gt:
        report = evaluate_sequence(trace.masks, gt, sequence=seq.name,
                                   threads=args.threads, run_config=run_config)
        payload["metrics"] = report.to_dict()
        print(report.to_table())
    _write_json(out / f"{seq.name}_report.json", payload)
    print(f"wrote masks and report to {out}")
    return 0


def cmd_eval(args) -> int:
    seq = load_sequence(args.sequence_dir, args.sequence)
    pred_dir = Path(args.predictions)
    pred = {}
    from .dataio import _frame_index, _read_mask

    candidates = sorted(pred_dir.glob("*.png")) or sorted((pred_dir / seq.name).glob("*.png"))
    for p in candidates:
        pred[_frame_index(p)] = _read_mask(p)
    if not pred:
        raise InputError(f"no predicted masks under {pred_dir}")
    gt = {t: m for t, m in seq.annotations.items() if t in pred}
    if not gt:
        raise InputError("no overlapping annotated frames to score")
    report = evaluate_sequence(pred, gt, sequence=seq.name, threads=args.threads,
                               run_config=_run_config(args, "eval"))
    print(report.to_table())
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    return 0


def cmd_gradcheck(args) -> int:
    config = micro_config(args.seed)
    config.embed_dim = args.embed_dim
    config.heads = args.heads
    config.n_offsets = args.n_offsets
    report = model_gradcheck(config=config, samples_per_group=args.samples,
                             tolerance=args.tolerance, seed=args.seed)
    print(report.to_table())
    print(f"{'PASS' if report.passed else 'FAIL'}: {len(report.per_group)} parameter groups, "
          f"tolerance {report.tolerance}")
    return 0 if report.passed else 1


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    results = bench(sizes=sizes, reps=args.reps, seed=args.seed)
    results["run_config"] = _run_config(args, "bench")
    print(bench_table(results))
    if args.out:
        _write_json(Path(args.out), results)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowvos",
                                     description="Flow-guided deformable video segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic DAVIS-layout sequence")
    p.add_argument("spec", help="JSON scene description")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a sequence")
    p.add_argument("checkpoint", help="output checkpoint path")
    p.add_argument("--spec", help="synthetic scene JSON to train on")
    p.add_argument("--data", help="DAVIS-layout directory to train on")
    p.add_argument("--sequence", default=None)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--n-offsets", type=int, default=4)
    p.add_argument("--window-base", type=float, default=4.0)
    p.add_argument("--backbone-widths", default="16,32,64,64,64")
    p.add_argument("--max-hw", default="64,96")
    p.add_argument("--mem-every", type=int, default=5)
    p.add_argument("--mem-cap", type=int, default=16)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("propagate", help="propagate the frame-0 mask through a sequence")
    p.add_argument("checkpoint")
    p.add_argument("sequence_dir")
    p.add_argument("--sequence", default=None)
    p.add_argument("--out", default="predictions")
    p.add_argument("--flow", default="oracle",
                   help="oracle | files | noisy:SIGMA")
    p.add_argument("--mem-every", type=int, default=5)
    p.add_argument("--mem-cap", type=int, default=16)
    p.add_argument("--disable", default="",
                   help="comma list of flow-offsets,qk-flow,long-term,multi-scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("eval", help="score predicted masks against annotations")
    p.add_argument("predictions", help="directory of predicted indexed PNGs")
    p.add_argument("sequence_dir", help="DAVIS-layout directory with ground truth")
    p.add_argument("--sequence", default=None)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the micro model")
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--n-offsets", type=int, default=2)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="scaling of deformable vs dense matching")
    p.add_argument("--sizes", default="64,128,256")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FormatError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed at step {exc.step}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
