"""Command-line harness: synth | train | sample | eval | experiment | report.

Exit codes: 0 success, 2 usage error, 3 stage failure, 4 a direction/acceptance
check in an experiment summary failed. SYNCLAB_THREADS caps per-clip eval
parallelism.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .diffcore import write_sptn
from .experiments import (
    EXPERIMENT_NAMES,
    StageError,
    model_config_from,
    resolve_config,
    run_experiment,
    synth_from_config,
)
from .reporting import emit_plot, write_text
from .sampler import (
    GuidanceConfig,
    SampleRequest,
    sample_offsync,
    sample_with_trace,
    skip_block_divergence,
    skip_block_probe,
    skip_divergence_csv,
)
from .sync_metrics import delay_sweep, make_backend
from .synth_world import load_manifest
from .toy_model import load_checkpoint, save_checkpoint, train


def _load_config(args) -> dict:
    file_cfg = None
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for flag, path in (
        ("w_audio", ("guidance", "w_audio")),
        ("w_text", ("guidance", "w_text")),
        ("steps", ("guidance", "steps")),
        ("delta_ms", ("metrics", "delta_ms")),
        ("mode", ("metrics", "mode")),
        ("backend", ("metrics", "backend")),
        ("n_clips", ("dataset", "n_clips")),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.setdefault(path[0], {})[path[1]] = val
    return resolve_config(file_cfg, overrides)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    manifest = synth_from_config(cfg, args.out, cfg["seed"])
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    loss_csv = os.path.splitext(args.out)[0] + ".loss.csv"
    model = train(
        model_config_from(cfg),
        args.data,
        steps=args.train_steps if args.train_steps is not None else cfg["train"]["steps"],
        lr=cfg["train"]["lr"],
        batch=cfg["train"]["batch"],
        lam=args.lam if args.lam is not None else cfg["train"]["lambda"],
        seed=cfg["seed"],
        loss_csv_path=loss_csv,
    )
    save_checkpoint(model, args.out)
    print(args.out)
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.ckpt)
    records = load_manifest(args.data)
    by_id = {r.clip_id: r for r in records}
    rec = by_id.get(args.clip, records[int(args.clip)] if args.clip.isdigit() else None)
    if rec is None:
        print(f"sample: unknown clip {args.clip!r}", file=sys.stderr)
        return 2
    g = GuidanceConfig(
        w_audio=cfg["guidance"]["w_audio"],
        w_text=cfg["guidance"]["w_text"],
        w_text_first=cfg["guidance"]["w_text_first"],
        steps=cfg["guidance"]["steps"],
    )
    req = SampleRequest(
        model=model,
        init_latent=rec.load_latents().latents[0],
        audio=rec.load_features(),
        class_id=rec.script.events[0].class_id if rec.script.events else 0,
        seed=cfg["seed"],
        guidance=g,
        skip_blocks=frozenset({args.skip_block} if args.skip_block is not None else ()),
    )
    if args.probe_blocks:
        rows, lat = skip_block_divergence(req)
        os.makedirs(args.out, exist_ok=True)
        csv_path = os.path.join(args.out, f"{rec.clip_id}.skip_divergence.csv")
        write_text(csv_path, skip_divergence_csv(rows))
        trace = {"mode": "probe_blocks", "seed": req.seed, "steps": g.steps, "csv": csv_path}
    elif args.offsync:
        lat = sample_offsync(req)
        trace = {"mode": "offsync", "seed": req.seed, "steps": g.steps}
    elif args.skip_block is not None:
        lat = skip_block_probe(req, args.skip_block)
        trace = {"mode": f"skip_block_{args.skip_block}", "seed": req.seed, "steps": g.steps}
    else:
        lat, trace = sample_with_trace(req)
    os.makedirs(args.out, exist_ok=True)
    sptn = os.path.join(args.out, f"{rec.clip_id}.sample.sptn")
    write_sptn(sptn, lat.latents)
    with open(os.path.join(args.out, f"{rec.clip_id}.sample.json"), "w") as fh:
        json.dump({"clip": rec.clip_id, **trace}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(sptn)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    records = load_manifest(args.data)
    backend = make_backend(cfg["metrics"]["backend"])
    delays = tuple(args.delays) if args.delays else (0.0,)
    report = delay_sweep(
        records,
        backend,
        delays=delays,
        delta_s=cfg["metrics"]["delta_ms"] / 1000.0,
        av_delta_s=cfg["metrics"]["av_delta_ms"] / 1000.0,
        mode=cfg["metrics"]["mode"],
        window_start_s=args.window_start,
        threads=int(os.environ.get("SYNCLAB_THREADS", "1")),
    )
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sync_report.csv")
    write_text(csv_path, report.to_csv())
    with open(os.path.join(args.out, "sync_aggregate.json"), "w") as fh:
        json.dump(report.aggregates, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(csv_path)
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    try:
        ok = run_experiment(args.name, cfg, args.out)
    except KeyError as exc:
        print(f"experiment: {exc.args[0]}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"experiment: {exc} (partial artifacts kept in {args.out})", file=sys.stderr)
        return 3
    print(os.path.join(args.out, "reports", "summary.md"))
    return 0 if ok else 4


def cmd_report(args) -> int:
    with open(args.aggregate) as fh:
        aggregates = json.load(fh)
    metrics = sorted({a["metric"] for a in aggregates})
    series = []
    for metric in metrics:
        rows = sorted((a for a in aggregates if a["metric"] == metric), key=lambda a: a["delay_s"])
        base = rows[0]["mean"] or 1.0
        series.append(
            {"label": metric, "x": [a["delay_s"] for a in rows], "y": [100.0 * a["mean"] / base for a in rows]}
        )
    emit_plot(series, args.out, title="relative sync score vs delay",
              xlabel="delay (s)", ylabel="% of perfect-sync score")
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synclab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file (flags override it)")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-clips", dest="n_clips", type=int, default=None)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train the toy model on a dataset manifest")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset manifest.jsonl")
    sp.add_argument("--out", required=True, help="checkpoint path (.sckp)")
    sp.add_argument("--train-steps", dest="train_steps", type=int, default=None)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="sample latents for one clip")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--clip", default="0", help="clip id or index")
    sp.add_argument("--out", required=True)
    sp.add_argument("--w-audio", dest="w_audio", type=float, default=None)
    sp.add_argument("--w-text", dest="w_text", type=float, default=None)
    sp.add_argument("--steps", dest="steps", type=int, default=None)
    sp.add_argument("--skip-block", dest="skip_block", type=int, default=None)
    sp.add_argument("--offsync", action="store_true")
    sp.add_argument("--probe-blocks", dest="probe_blocks", action="store_true",
                    help="skip each block in turn and emit a divergence CSV")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="evaluate sync metrics / delay sweep over a manifest")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--delays", type=float, nargs="*", default=None)
    sp.add_argument("--window-start", dest="window_start", type=float, default=0.0)
    sp.add_argument("--delta-ms", dest="delta_ms", type=float, default=None)
    sp.add_argument("--mode", choices=("f1", "paper"), default=None)
    sp.add_argument("--backend", default=None, help="oracle | external:<command>")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("experiment", help="run a named experiment bundle")
    common(sp)
    sp.add_argument("--name", required=True, help=f"one of: {', '.join(EXPERIMENT_NAMES)}")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_experiment)

    sp = sub.add_parser("report", help="re-render plots from an aggregate JSON")
    sp.add_argument("--aggregate", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"synclab: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"synclab: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
