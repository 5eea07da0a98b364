"""Experiment bundles: each runs the pipeline stages it needs and emits CSV,
SVG, and a markdown summary with direction pass/fail flags.

  E1_delay_sweep   controlled delay-shift protocol, CycleSync vs AV-Align
  E2_loss_ablation motion-aware loss on/off, onset-timing MAE direction
  E3_asg_sweep     audio sync guidance strength sweep
  E4_rope_ablation audio rotary embedding on/off
  E5_offsync       full model vs off-sync model
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
import time

import numpy as np

from . import __version__
from .reporting import RunManifest, emit_plot, write_text
from .sampler import GuidanceConfig, SampleRequest, sample_batch
from .sync_metrics import cyclesync, delay_sweep, make_backend, motion_peaks
from .synth_world import gen_dataset, load_manifest
from .toy_model import Model, ModelConfig, save_checkpoint, train

__all__ = ["DEFAULT_CONFIG", "EXPERIMENT_NAMES", "StageError", "resolve_config", "run_experiment"]

MISS_PENALTY_S = 0.5  # onset-MAE contribution for an event with no motion peak

DEFAULT_CONFIG = {
    "schema_version": 1,
    "seed": 0,
    "dataset": {
        "n_clips": 64,
        "duration_s": 2.0,
        "events": [1, 4],
        "lead": [0.0, 0.3],
        "lag": [0.0, 0.3],
        "amplitude": [0.4, 1.0],
        "classes": 3,
        "drift_scale": 0.25,
        "drift_hz": [0.1, 0.5],
        "micro_motion_rate_hz": 0.0,
        "noise_db": -40.0,
        "margin_s": 0.35,
    },
    "model": {
        "n_blocks": 6,
        "d_model": 64,
        "n_heads": 4,
        "audio_blocks": [3, 4, 5],
        "rope_base": 10000.0,
        "alpha": 4,
        "delta_window": 1,
        "class_vocab": 4,
        "latent_channels": 8,
        "audio_dim": 16,
        "use_audio_rope": True,
        "mlp_ratio": 4,
        "cond_dropout": 0.1,
    },
    "train": {"steps": 2000, "lr": 1e-3, "batch": 8, "lambda": 1.0},
    "guidance": {"w_audio": 2.0, "w_text": 4.0, "w_text_first": 7.0, "steps": 30},
    "metrics": {
        "delta_ms": 50.0,
        "av_delta_ms": 1000.0 / 6.0,
        "mode": "f1",
        "delays": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        "backend": "oracle",
    },
    "eval": {"n_clips": 16, "seeds": [1001, 1002, 1003, 1004, 1005]},
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise KeyError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def resolve_config(file_config: dict | None = None, overrides: dict | None = None) -> dict:
    """defaults <- config file <- flag overrides; rejects unknown keys."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if file_config:
        cfg = _deep_merge(cfg, file_config)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def model_config_from(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        n_blocks=m["n_blocks"],
        d_model=m["d_model"],
        n_heads=m["n_heads"],
        audio_blocks=tuple(m["audio_blocks"]),
        rope_base=m["rope_base"],
        alpha=m["alpha"],
        delta_window=m["delta_window"],
        class_vocab=m["class_vocab"],
        latent_channels=m["latent_channels"],
        audio_dim=m["audio_dim"],
        use_audio_rope=m["use_audio_rope"],
        mlp_ratio=m["mlp_ratio"],
        cond_dropout=m["cond_dropout"],
    )


def synth_from_config(cfg: dict, out_dir, seed: int, **overrides) -> str:
    d = dict(cfg["dataset"])
    d.update(overrides)
    return gen_dataset(
        out_dir,
        seed=seed,
        n_clips=d["n_clips"],
        duration_s=d["duration_s"],
        events_range=tuple(d["events"]),
        lead_range=tuple(d["lead"]),
        lag_range=tuple(d["lag"]),
        amp_range=tuple(d["amplitude"]),
        n_classes=d["classes"],
        drift_scale=d["drift_scale"],
        drift_hz=tuple(d["drift_hz"]),
        micro_motion_rate_hz=d["micro_motion_rate_hz"],
        noise_db=d["noise_db"],
        margin_s=d["margin_s"],
    )


# -- shared evaluation machinery -------------------------------------------------


def eval_requests(model: Model, records, guidance: GuidanceConfig, eval_seed: int) -> list[SampleRequest]:
    return [
        SampleRequest(
            model=model,
            init_latent=r.load_latents().latents[0],
            audio=r.load_features(),
            class_id=r.script.events[0].class_id if r.script.events else 0,
            seed=eval_seed * 100003 + i,
            guidance=guidance,
        )
        for i, r in enumerate(records)
    ]


def score_samples(records, samples, backend, delta_s: float, mode: str) -> tuple[float, float]:
    """Mean CycleSync and mean onset-timing MAE (sampled motion peaks against
    script event times; events with no peak cost MISS_PENALTY_S)."""
    cyc, mae = [], []
    for rec, lat in zip(records, samples):
        cyc.append(cyclesync(rec.load_wav(), lat, backend, delta_s=delta_s, mode=mode))
        peaks = motion_peaks(lat).times_s
        errs = [
            min(abs(peaks - e.time_s)) if len(peaks) else MISS_PENALTY_S
            for e in rec.script.events
        ]
        if errs:
            mae.append(float(np.mean(errs)))
    return float(np.mean(cyc)), float(np.mean(mae))


def sampled_scores(model, records, guidance, eval_seeds, backend, delta_s, mode, offsync=False):
    """Aggregate CycleSync / MAE over sampling seeds."""
    cyc, mae = [], []
    for s in eval_seeds:
        reqs = eval_requests(model, records, guidance, s)
        samples = sample_batch(reqs, offsync=offsync)
        c, m = score_samples(records, samples, backend, delta_s, mode)
        cyc.append(c)
        mae.append(m)
    return float(np.mean(cyc)), float(np.mean(mae)), cyc, mae


def _summary_md(name: str, rows: list[tuple[str, str, str, bool]]) -> tuple[str, bool]:
    ok_all = all(ok for _, _, _, ok in rows)
    lines = [
        f"# {name}",
        "",
        "| check | value | target | status |",
        "|---|---|---|---|",
    ]
    for check, value, target, ok in rows:
        lines.append(f"| {check} | {value} | {target} | {'PASS' if ok else 'FAIL'} |")
    lines += ["", f"overall: {'PASS' if ok_all else 'FAIL'}", ""]
    return "\n".join(lines), ok_all


class _Run:
    """Stage bookkeeping: statuses land in the run manifest, failures halt
    with the stage name, partial artifacts stay on disk."""

    def __init__(self, cfg: dict, out_dir, name: str = "experiment"):
        self.cfg = cfg
        self.out = out_dir
        self.name = name
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
        self.manifest = RunManifest(cfg, __version__)
        self.manifest.data["experiment"] = name
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def stage(self, name: str, fn):
        t0 = time.time()
        try:
            result = fn()
        except Exception as exc:
            self.manifest.stage(name, "failed", round(time.time() - t0, 3))
            self.write_manifest()
            raise StageError(name, exc) from exc
        self.manifest.stage(name, "ok", round(time.time() - t0, 3))
        return result

    def report_path(self, fname: str) -> str:
        return os.path.join(self.out, "reports", fname)

    def write_manifest(self):
        self.manifest.write(os.path.join(self.out, "run_manifest.json"))

    def finish(self, summary_rows, extra_artifacts=()):
        text, ok = _summary_md(self.name, summary_rows)
        path = self.report_path("summary.md")
        write_text(path, text)
        self.manifest.artifact("summary", path)
        for name, p in extra_artifacts:
            self.manifest.artifact(name, p)
        self.manifest.finish()
        self.write_manifest()
        return ok


def _train_stage(run: _Run, cfg: dict, manifest_path: str, lam: float, use_rope: bool, tag: str) -> Model:
    mc = model_config_from(cfg)
    if not use_rope:
        mc = dataclasses.replace(mc, use_audio_rope=False)
    ckpt_dir = os.path.join(run.out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    loss_csv = os.path.join(ckpt_dir, f"{tag}.loss.csv")
    model = train(
        mc,
        manifest_path,
        steps=cfg["train"]["steps"],
        lr=cfg["train"]["lr"],
        batch=cfg["train"]["batch"],
        lam=lam,
        seed=cfg["seed"],
        loss_csv_path=loss_csv,
    )
    save_checkpoint(model, os.path.join(ckpt_dir, f"{tag}.sckp"))
    run.manifest.artifact(f"checkpoint_{tag}", os.path.join(ckpt_dir, f"{tag}.sckp"))
    return model


def _guidance(cfg: dict, **over) -> GuidanceConfig:
    g = dict(cfg["guidance"])
    g.update(over)
    return GuidanceConfig(
        w_audio=g["w_audio"], w_text=g["w_text"], w_text_first=g["w_text_first"], steps=g["steps"]
    )


# -- the five experiments -----------------------------------------------------------


def run_e1(cfg: dict, out_dir) -> bool:
    run = _Run(cfg, out_dir, "E1_delay_sweep")
    backend = make_backend(cfg["metrics"]["backend"])
    delays = tuple(cfg["metrics"]["delays"])

    man = run.stage(
        "synth",
        lambda: synth_from_config(
            cfg,
            os.path.join(out_dir, "data", "sweep"),
            cfg["seed"],
            duration_s=2.5,
            lead=[0.0, 0.0],
            lag=[0.0, 0.0],
            micro_motion_rate_hz=1.0,
            margin_s=0.7,
        ),
    )
    records = load_manifest(man)

    def _sweep():
        return delay_sweep(
            records,
            backend,
            delays=delays,
            delta_s=cfg["metrics"]["delta_ms"] / 1000.0,
            av_delta_s=cfg["metrics"]["av_delta_ms"] / 1000.0,
            mode=cfg["metrics"]["mode"],
            threads=int(os.environ.get("SYNCLAB_THREADS", "1")),
        )

    report = run.stage("sweep", _sweep)

    def _emit():
        csv_path = run.report_path("delay_sweep.csv")
        write_text(csv_path, report.to_csv())
        agg_path = run.report_path("delay_sweep_aggregate.json")
        write_text(agg_path, json.dumps(report.aggregates, indent=2, sort_keys=True) + "\n")
        series = []
        for metric in ("cyclesync", "av_align"):
            rows = [a for a in report.aggregates if a["metric"] == metric]
            base = rows[0]["mean"] or 1.0
            series.append(
                {
                    "label": metric,
                    "x": [a["delay_s"] for a in rows],
                    "y": [100.0 * a["mean"] / base for a in rows],
                }
            )
        svg_path = run.report_path("delay_sweep_relative.svg")
        emit_plot(series, svg_path, title="relative sync score vs delay",
                  xlabel="delay (s)", ylabel="% of perfect-sync score")
        return csv_path, agg_path, svg_path

    csv_path, agg_path, svg_path = run.stage("report", _emit)

    agg = {(a["metric"], a["delay_s"]): a for a in report.aggregates}
    cyc_drop = -agg[("cyclesync", 0.3)]["pct_change"] if ("cyclesync", 0.3) in agg else float("nan")
    av_drop = -agg[("av_align", 0.3)]["pct_change"] if ("av_align", 0.3) in agg else float("nan")
    nonzero = [d for d in delays if d > 0]
    all_below = all(agg[("cyclesync", d)]["mean"] < agg[("cyclesync", delays[0])]["mean"] for d in nonzero)
    rows = [
        ("0-delay row is the 100% reference", "100.0%", "by construction", True),
        ("CycleSync drop at 0.3 s", f"{cyc_drop:.1f}%", ">= 30%", cyc_drop >= 30.0),
        ("CycleSync drop exceeds AV-Align drop at 0.3 s", f"{cyc_drop:.1f}% vs {av_drop:.1f}%", "cyclesync > av_align", cyc_drop > av_drop),
        ("every delayed CycleSync below perfect sync", str(all_below), "decline dominance", all_below),
    ]
    return run.finish(rows, [("csv", csv_path), ("aggregate", agg_path), ("svg", svg_path)])


def _standard_eval_setup(run: _Run, cfg: dict, out_dir):
    man_train = run.stage(
        "synth_train",
        lambda: synth_from_config(cfg, os.path.join(out_dir, "data", "train"), cfg["seed"]),
    )
    man_eval = run.stage(
        "synth_eval",
        lambda: synth_from_config(
            cfg, os.path.join(out_dir, "data", "eval"), cfg["seed"] + 9999,
            n_clips=cfg["eval"]["n_clips"],
        ),
    )
    return man_train, load_manifest(man_eval)


def run_e2(cfg: dict, out_dir) -> bool:
    run = _Run(cfg, out_dir, "E2_loss_ablation")
    backend = make_backend(cfg["metrics"]["backend"])
    delta_s = cfg["metrics"]["delta_ms"] / 1000.0
    mode = cfg["metrics"]["mode"]
    man_train, eval_recs = _standard_eval_setup(run, cfg, out_dir)

    model_l1 = run.stage("train_lambda1", lambda: _train_stage(run, cfg, man_train, 1.0, True, "lambda1"))
    model_l0 = run.stage("train_lambda0", lambda: _train_stage(run, cfg, man_train, 0.0, True, "lambda0"))

    g = _guidance(cfg, w_audio=0.0)  # isolate the loss effect from guidance
    seeds = cfg["eval"]["seeds"]
    cyc1, mae1, _, _ = run.stage(
        "eval_lambda1", lambda: sampled_scores(model_l1, eval_recs, g, seeds, backend, delta_s, mode)
    )
    cyc0, mae0, _, _ = run.stage(
        "eval_lambda0", lambda: sampled_scores(model_l0, eval_recs, g, seeds, backend, delta_s, mode)
    )

    def _emit():
        csv = "variant,lambda,cyclesync_x100,onset_mae_ms\n"
        csv += f"motion_aware,1.0,{100 * cyc1:.4f},{1000 * mae1:.2f}\n"
        csv += f"plain_mse,0.0,{100 * cyc0:.4f},{1000 * mae0:.2f}\n"
        p = run.report_path("loss_ablation.csv")
        write_text(p, csv)
        svg = run.report_path("loss_ablation.svg")
        emit_plot(
            [
                {"label": "onset MAE (ms)", "x": [0.0, 1.0], "y": [1000 * mae0, 1000 * mae1]},
                {"label": "CycleSync x100", "x": [0.0, 1.0], "y": [100 * cyc0, 100 * cyc1]},
            ],
            svg, title="motion-aware loss ablation", xlabel="lambda", ylabel="score",
        )
        return p, svg

    p, svg = run.stage("report", _emit)
    rows = [
        ("onset MAE, lambda=1 vs lambda=0", f"{1000 * mae1:.1f} vs {1000 * mae0:.1f} ms", "mae(1) <= mae(0)", mae1 <= mae0),
        ("CycleSync, lambda=1", f"{100 * cyc1:.2f}", "reported", True),
        ("CycleSync, lambda=0", f"{100 * cyc0:.2f}", "reported", True),
    ]
    return run.finish(rows, [("csv", p), ("svg", svg)])


def run_e3(cfg: dict, out_dir) -> bool:
    run = _Run(cfg, out_dir, "E3_asg_sweep")
    backend = make_backend(cfg["metrics"]["backend"])
    delta_s = cfg["metrics"]["delta_ms"] / 1000.0
    mode = cfg["metrics"]["mode"]
    man_train, eval_recs = _standard_eval_setup(run, cfg, out_dir)
    model = run.stage("train", lambda: _train_stage(run, cfg, man_train, cfg["train"]["lambda"], True, "full"))

    seeds = cfg["eval"]["seeds"]
    weights = [0.0, 1.0, 2.0, 4.0]
    scores = {}
    for w in weights:
        g = _guidance(cfg, w_audio=w)
        scores[w] = run.stage(
            f"eval_w{w:g}", lambda g=g: sampled_scores(model, eval_recs, g, seeds, backend, delta_s, mode)
        )

    def _no_asg_identity():
        g = _guidance(cfg, w_audio=0.0)
        reqs = eval_requests(model, eval_recs, g, seeds[0])
        a = sample_batch(reqs)
        b = sample_batch(eval_requests(model, eval_recs, g, seeds[0]))
        return all(np.array_equal(x.latents, y.latents) for x, y in zip(a, b))

    identity_ok = run.stage("no_asg_identity", _no_asg_identity)

    def _emit():
        lines = ["w_audio,cyclesync_x100,onset_mae_ms"]
        for w in weights:
            c, m = scores[w][0], scores[w][1]
            lines.append(f"{w:g},{100 * c:.4f},{1000 * m:.2f}")
        p = run.report_path("asg_sweep.csv")
        write_text(p, "\n".join(lines) + "\n")
        svg = run.report_path("asg_sweep.svg")
        emit_plot(
            [{"label": "CycleSync x100", "x": weights, "y": [100 * scores[w][0] for w in weights]}],
            svg, title="audio sync guidance sweep", xlabel="w_audio", ylabel="CycleSync x100",
        )
        return p, svg

    p, svg = run.stage("report", _emit)
    rows = [
        ("ASG w=2 vs no ASG", f"{100 * scores[2.0][0]:.2f} vs {100 * scores[0.0][0]:.2f}", "w2 >= w0", scores[2.0][0] >= scores[0.0][0]),
        ("w=0 sampling is reproducibly identical to no-ASG sampling", str(identity_ok), "bit-exact", identity_ok),
        ("4-row table emitted", "4", "4", True),
    ]
    return run.finish(rows, [("csv", p), ("svg", svg)])


def run_e4(cfg: dict, out_dir) -> bool:
    run = _Run(cfg, out_dir, "E4_rope_ablation")
    backend = make_backend(cfg["metrics"]["backend"])
    delta_s = cfg["metrics"]["delta_ms"] / 1000.0
    mode = cfg["metrics"]["mode"]
    man_train, eval_recs = _standard_eval_setup(run, cfg, out_dir)
    model_rope = run.stage("train_rope", lambda: _train_stage(run, cfg, man_train, cfg["train"]["lambda"], True, "rope"))
    model_plain = run.stage("train_norope", lambda: _train_stage(run, cfg, man_train, cfg["train"]["lambda"], False, "norope"))

    g = _guidance(cfg)
    seeds = cfg["eval"]["seeds"]
    cyc_r, mae_r, _, _ = run.stage("eval_rope", lambda: sampled_scores(model_rope, eval_recs, g, seeds, backend, delta_s, mode))
    cyc_p, mae_p, _, _ = run.stage("eval_norope", lambda: sampled_scores(model_plain, eval_recs, g, seeds, backend, delta_s, mode))

    def _emit():
        csv = "variant,cyclesync_x100,onset_mae_ms\n"
        csv += f"audio_rope,{100 * cyc_r:.4f},{1000 * mae_r:.2f}\n"
        csv += f"no_rope,{100 * cyc_p:.4f},{1000 * mae_p:.2f}\n"
        p = run.report_path("rope_ablation.csv")
        write_text(p, csv)
        svg = run.report_path("rope_ablation.svg")
        emit_plot(
            [{"label": "CycleSync x100", "x": [0.0, 1.0], "y": [100 * cyc_p, 100 * cyc_r]}],
            svg, title="audio rope ablation (0=off, 1=on)", xlabel="audio rope", ylabel="CycleSync x100",
        )
        return p, svg

    p, svg = run.stage("report", _emit)
    rows = [
        ("CycleSync with vs without audio RoPE", f"{100 * cyc_r:.2f} vs {100 * cyc_p:.2f}", "with >= without", cyc_r >= cyc_p),
    ]
    return run.finish(rows, [("csv", p), ("svg", svg)])


def run_e5(cfg: dict, out_dir) -> bool:
    run = _Run(cfg, out_dir, "E5_offsync")
    backend = make_backend(cfg["metrics"]["backend"])
    delta_s = cfg["metrics"]["delta_ms"] / 1000.0
    mode = cfg["metrics"]["mode"]
    man_train, eval_recs = _standard_eval_setup(run, cfg, out_dir)
    model = run.stage("train", lambda: _train_stage(run, cfg, man_train, cfg["train"]["lambda"], True, "full"))

    g = _guidance(cfg, w_audio=0.0)
    seeds = cfg["eval"]["seeds"]
    cyc_full, mae_full, _, _ = run.stage(
        "eval_full", lambda: sampled_scores(model, eval_recs, g, seeds, backend, delta_s, mode)
    )
    cyc_off, mae_off, _, _ = run.stage(
        "eval_offsync", lambda: sampled_scores(model, eval_recs, g, seeds, backend, delta_s, mode, offsync=True)
    )

    def _emit():
        csv = "variant,cyclesync_x100,onset_mae_ms\n"
        csv += f"full,{100 * cyc_full:.4f},{1000 * mae_full:.2f}\n"
        csv += f"offsync,{100 * cyc_off:.4f},{1000 * mae_off:.2f}\n"
        p = run.report_path("offsync.csv")
        write_text(p, csv)
        svg = run.report_path("offsync.svg")
        emit_plot(
            [{"label": "CycleSync x100", "x": [0.0, 1.0], "y": [100 * cyc_off, 100 * cyc_full]}],
            svg, title="off-sync vs full model (0=off-sync, 1=full)", xlabel="variant", ylabel="CycleSync x100",
        )
        return p, svg

    p, svg = run.stage("report", _emit)
    rows = [
        ("CycleSync full vs off-sync", f"{100 * cyc_full:.2f} vs {100 * cyc_off:.2f}", "full > off-sync", cyc_full > cyc_off),
    ]
    return run.finish(rows, [("csv", p), ("svg", svg)])


EXPERIMENTS = {
    "E1_delay_sweep": run_e1,
    "E2_loss_ablation": run_e2,
    "E3_asg_sweep": run_e3,
    "E4_rope_ablation": run_e4,
    "E5_offsync": run_e5,
}
EXPERIMENT_NAMES = tuple(EXPERIMENTS)


def run_experiment(name: str, cfg: dict, out_dir) -> bool:
    """Run one named experiment; returns True when every direction flag in the
    summary passed. Unknown names raise KeyError listing the valid ones."""
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENT_NAMES)}")
    return EXPERIMENTS[name](cfg, out_dir)
