"""Command-line surface tying the package together.

Commands: train, train-adadiff, sample, profile-exits, bench, fid.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
DUODIFF_THREADS caps internal parallelism (1 = strict deterministic mode).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import artifacts
from .adadiff import write_exit_traces_csv
from .bench import (FeatureExtractor, exit_trend_profile, fid_proxy,
                    latency_bench)
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, config_hash, parse_config
from .data import DataError, SyntheticDataset, load_image_dir
from .diffusion import SamplerSpec, make_schedule
from .duo import DuoDiffSampler, sample, train_adadiff, train_backbone
from .tensor import NumericsError, apply_thread_limit
from .uvit import UVitModel


def _schedule(cfg: RunConfig):
    return make_schedule(cfg.schedule.T, cfg.schedule.beta_start,
                         cfg.schedule.beta_end)


def _meta(cfg: RunConfig) -> dict:
    return artifacts.run_meta(config_hash(cfg), cfg.seed)


def _outdir(cfg: RunConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _load_backbone(path, cfg: RunConfig, expect_layers: int | None = None):
    from dataclasses import asdict

    model, meta, extra = load_model(path)
    if not isinstance(model, UVitModel):
        raise ConfigError(f"{path} is not a backbone checkpoint")
    got = asdict(model.config)
    want = asdict(cfg.model_full)
    got.pop("num_layers")  # depth legitimately differs between roles
    want.pop("num_layers")
    if got != want:
        diff = {k for k in got if got[k] != want[k]}
        raise ConfigError(f"{path}: architecture does not match the run "
                          f"config (fields: {sorted(diff)})")
    if expect_layers is not None and model.config.num_layers != expect_layers:
        raise ConfigError(f"{path}: expected {expect_layers} layers, "
                          f"found {model.config.num_layers}")
    return model, meta, extra


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.set)
    sched = _schedule(cfg)
    out = _outdir(cfg)
    meta = _meta(cfg)
    role = args.role
    dcfg = cfg.model_full if role == "full" else cfg.model_shallow
    dataset = SyntheticDataset(cfg.data)
    tc = cfg.train
    model = opt = None
    start_step = 0
    if args.resume:
        model, ck_meta, extra = _load_backbone(args.resume, cfg)
        start_step = int(ck_meta.get("step", 0))
        from .optim import AdamWState
        opt = AdamWState(lr=tc.lr, weight_decay=tc.weight_decay, beta1=tc.beta1,
                         beta2=tc.beta2, warmup_steps=tc.warmup_steps,
                         step_count=start_step)
        for k, v in extra.items():
            kind, _, name = k.partition(":")
            if kind == "m":
                opt.first_moment[name] = v.copy()
            elif kind == "v":
                opt.second_moment[name] = v.copy()
        dcfg = model.config

    def ckpt_cb(step, mdl, opt_state):
        extra = {f"m:{k}": v for k, v in opt_state.first_moment.items()}
        extra.update({f"v:{k}": v for k, v in opt_state.second_moment.items()})
        save_model(os.path.join(out, f"{role}_step{step}.ckpt"), mdl,
                   meta={**meta, "step": step, "role": role}, extra=extra)

    model, opt, log = train_backbone(dcfg, dataset, tc, sched,
                                     checkpoint_cb=ckpt_cb,
                                     start_step=start_step, model=model,
                                     opt=opt)
    save_model(os.path.join(out, f"{role}.ckpt"), model,
               meta={**meta, "step": tc.steps, "role": role})
    artifacts.write_csv(os.path.join(out, f"train_{role}_loss.csv"),
                        ["step", "loss"], log, meta)
    print(f"trained {role} backbone for {tc.steps} steps; final loss "
          f"{log[-1][1]:.5f}" if log else "trained (no steps run)")
    return 0


def cmd_train_adadiff(args) -> int:
    cfg = parse_config(args.config, args.set)
    sched = _schedule(cfg)
    out = _outdir(cfg)
    meta = _meta(cfg)
    backbone, _, _ = _load_backbone(args.backbone, cfg)
    dataset = SyntheticDataset(cfg.data)
    model, opt, log = train_adadiff(backbone, dataset, cfg.adadiff, sched)
    save_model(os.path.join(out, "adadiff.ckpt"), model,
               meta={**meta, "step": cfg.adadiff.steps})
    artifacts.write_csv(os.path.join(out, "train_adadiff_loss.csv"),
                        ["step", "total", "simple", "u", "ual"], log, meta)
    print(f"trained adadiff heads/UEMs for {cfg.adadiff.steps} steps; "
          f"final total loss {log[-1][1]:.5f}")
    return 0


def _make_sampler(cfg: RunConfig, full_path, shallow_path) -> DuoDiffSampler:
    sched = _schedule(cfg)
    full, _, _ = _load_backbone(full_path, cfg)
    shallow = None
    if shallow_path:
        shallow, _, _ = _load_backbone(shallow_path, cfg)
    return DuoDiffSampler(full=full, shallow=shallow, spec=cfg.sampler,
                          sched=sched)


def _sample_labels(cfg: RunConfig, n: int):
    if cfg.model_full.num_classes <= 0:
        return None
    rng = np.random.default_rng([cfg.sampler.seed, 7])
    return rng.integers(0, cfg.model_full.num_classes, n)


def cmd_sample(args) -> int:
    cfg = parse_config(args.config, args.set)
    out = _outdir(cfg)
    meta = _meta(cfg)
    sampler = _make_sampler(cfg, args.full, args.shallow)
    labels = _sample_labels(cfg, args.n)
    result = sample(sampler, args.n, class_labels=labels,
                    batch_size=args.batch_size)
    artifacts.write_png_grid(os.path.join(out, "samples.png"),
                             result.images, meta)
    artifacts.write_json(os.path.join(out, "timing.json"),
                         result.timing_record(cfg.sampler, sampler.sched.T),
                         meta)
    print(f"wrote {args.n} samples to {out}/samples.png "
          f"({result.total_seconds:.2f}s total)")
    return 0


def cmd_profile_exits(args) -> int:
    cfg = parse_config(args.config, args.set)
    sched = _schedule(cfg)
    out = _outdir(cfg)
    meta = _meta(cfg)
    model, _, _ = load_model(args.adadiff)
    from .adadiff import AdaDiffModel
    if not isinstance(model, AdaDiffModel):
        raise ConfigError(f"{args.adadiff} is not an adadiff checkpoint")
    thetas = [float(x) for x in args.thetas.split(",")]
    labels = _sample_labels(cfg, args.n)
    for theta in thetas:
        profile, traces = exit_trend_profile(model, theta, args.n, sched,
                                             seed=cfg.seed, labels=labels)
        tag = f"theta{theta:g}".replace(".", "p")
        artifacts.write_csv(
            os.path.join(out, f"trend_{tag}.csv"),
            ["t", "mean_exit", "std_exit"],
            [(int(t), f"{m:.4f}", f"{s:.4f}") for t, m, s in
             zip(profile.t, profile.mean_exit, profile.std_exit)], meta)
        svg = artifacts.render_line_svg(
            profile.t, {f"mean exit (theta={theta:g})": profile.mean_exit,
                        "+1 std": profile.mean_exit + profile.std_exit,
                        "-1 std": profile.mean_exit - profile.std_exit},
            title=f"Exit depth over reverse steps (theta={theta:g}, "
                  f"n={args.n})",
            xlabel="t", ylabel="exit layer", meta=meta)
        artifacts.write_svg(os.path.join(out, f"trend_{tag}.svg"), svg)
        write_exit_traces_csv(os.path.join(out, f"traces_{tag}.csv"), traces,
                              meta_line=artifacts.meta_comment(meta))
        print(f"theta={theta:g}: mean exit {profile.mean_exit.mean():.2f} "
              f"(start {profile.mean_exit[-1]:.2f}, end {profile.mean_exit[0]:.2f})")
    return 0


def cmd_bench(args) -> int:
    cfg = parse_config(args.config, args.set)
    sched = _schedule(cfg)
    out = _outdir(cfg)
    meta = _meta(cfg)
    full, _, _ = _load_backbone(args.full, cfg)
    shallow = None
    if args.shallow:
        shallow, _, _ = _load_backbone(args.shallow, cfg)
    ts_list = ([int(float(x) * sched.T) if 0 < float(x) < 1 else int(x)
                for x in args.ts_list.split(",")] if args.ts_list
               else [0, int(0.3 * sched.T), int(0.4 * sched.T),
                     int(0.5 * sched.T)])
    labels = _sample_labels(cfg, args.batch_size)
    rows = []

    def run_config(run_id: str, spec: SamplerSpec, sh):
        sampler = DuoDiffSampler(full=full, shallow=sh, spec=spec, sched=sched)

        def fn(batch):
            return sample(sampler, batch,
                          class_labels=labels[:batch] if labels is not None else None,
                          batch_size=batch)
        res = latency_bench(fn, n_runs=args.runs, batch=args.batch_size,
                            warmup_runs=1)
        rows.append((run_id, f"{res.median_seconds_per_sample:.6f}"))
        print(f"{run_id}: {res.median_seconds_per_sample:.4f} s/sample "
              f"(IQR {res.iqr_seconds_per_sample:.4f})")

    base = cfg.sampler
    for t_s in ts_list:
        spec = SamplerSpec(kind=base.kind, eta=base.eta, n_steps=base.n_steps,
                           t_s=t_s, seed=base.seed)
        sh = shallow if t_s > 0 else None
        if t_s > 0 and shallow is None:
            raise ConfigError("bench with t_s > 0 requires --shallow")
        run_config(f"duodiff_ts{t_s}" if t_s else "baseline_full", spec, sh)

    if args.adadiff:
        from .adadiff import AdaDiffModel, estimate_latency, simulate_batch_early_exit
        model, _, _ = load_model(args.adadiff)
        if not isinstance(model, AdaDiffModel):
            raise ConfigError(f"{args.adadiff} is not an adadiff checkpoint")
        theta = args.theta
        # measured: run the simulated-batch early-exit sampler end to end
        import time as _time
        from .diffusion import ddpm_step

        def adadiff_run(batch):
            rng = np.random.default_rng(base.seed)
            x = rng.standard_normal((batch, full.config.in_channels,
                                     full.config.image_size,
                                     full.config.image_size)).astype(np.float32)
            exits = []
            lab = labels[:batch] if labels is not None else None
            for t in range(sched.T - 1, -1, -1):
                eps, ex, _ = simulate_batch_early_exit(model, x, t, theta, lab)
                exits.extend(ex.tolist())
                z = rng.standard_normal(x.shape).astype(np.float32) if t else None
                x = ddpm_step(x, eps, t, sched, z)
            return exits

        t0 = _time.perf_counter()
        exits = adadiff_run(args.batch_size)
        measured = (_time.perf_counter() - t0) / args.batch_size
        rows.append((f"adadiff_theta{theta:g}_measured", f"{measured:.6f}"))
        full_time = next((float(sec) for rid, sec in rows
                          if rid == "baseline_full"), measured)
        interp = estimate_latency(exits, full_time, model.num_layers)
        rows.append((f"adadiff_theta{theta:g}_simulated", f"{interp:.6f}"))
        print(f"adadiff theta={theta:g}: measured {measured:.4f} s/sample, "
              f"interpolated {interp:.4f} s/sample")

    artifacts.write_csv(os.path.join(out, "bench.csv"),
                        ["run_id", "seconds_per_sample"], rows, meta)
    return 0


def cmd_fid(args) -> int:
    cfg = parse_config(args.config, args.set)
    out = _outdir(cfg)
    meta = _meta(cfg)
    samples = load_image_dir(args.samples, cfg.data.image_size)
    if args.reference:
        reference = load_image_dir(args.reference, cfg.data.image_size)
    else:
        reference = SyntheticDataset(cfg.data).images
    extractor = FeatureExtractor(samples.shape[1:], seed=cfg.seed)
    value = fid_proxy(samples, reference, extractor)
    artifacts.write_json(os.path.join(out, "fid.json"),
                         {"fid_proxy": value, "n_samples": len(samples),
                          "n_reference": len(reference)}, meta)
    print(f"fid_proxy = {value:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duodiff",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key-value config file")
        sp.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key (repeatable)")

    sp = sub.add_parser("train", help="train one backbone")
    common(sp)
    sp.add_argument("--role", choices=["full", "shallow"], default="full")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("train-adadiff",
                        help="train exit heads + UEMs on a frozen backbone")
    common(sp)
    sp.add_argument("--backbone", required=True)
    sp.set_defaults(fn=cmd_train_adadiff)

    sp = sub.add_parser("sample", help="generate an image grid")
    common(sp)
    sp.add_argument("--full", required=True)
    sp.add_argument("--shallow", default=None)
    sp.add_argument("-n", type=int, default=64)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("profile-exits", help="exit-trend CSV + SVG per theta")
    common(sp)
    sp.add_argument("--adadiff", required=True)
    sp.add_argument("--thetas", default="0.05,0.07,0.09")
    sp.add_argument("-n", type=int, default=64)
    sp.set_defaults(fn=cmd_profile_exits)

    sp = sub.add_parser("bench", help="latency comparison table")
    common(sp)
    sp.add_argument("--full", required=True)
    sp.add_argument("--shallow", default=None)
    sp.add_argument("--adadiff", default=None)
    sp.add_argument("--theta", type=float, default=0.07)
    sp.add_argument("--ts-list", default=None,
                    help="comma list of t_s values (fractions of T or steps)")
    sp.add_argument("--runs", type=int, default=3)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("fid", help="FID proxy between sample and reference sets")
    common(sp)
    sp.add_argument("--samples", required=True, help="directory of PNG images")
    sp.add_argument("--reference", default=None,
                    help="directory of PNGs (default: the synthetic dataset)")
    sp.set_defaults(fn=cmd_fid)
    return p


def main(argv=None) -> int:
    apply_thread_limit()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericsError,) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
