"""Command line: train / infer / eval / group-vis / bench / params.

Every architecture hyperparameter is flag-settable; a key=value config
file can seed the flags (explicit flags win). Exit codes are stable for
scripting: 0 ok, 1 usage, 2 I/O, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from . import attention, data, network
from .autograd import constant
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .data import ImageError
from .network import CATANet, ModelConfig
from .ops import DimensionError, check_finite
from .token_agg import StateError, build_grouping
from .training import DivergenceError, train_loop


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _field_type(name: str):
    return float if _CONFIG_FIELDS[name].type in ("float", float) else int


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(network.PRESETS), help="L/M/S size tier")
    p.add_argument("--model-config", metavar="FILE",
                   help="key=value file with ModelConfig fields; flags override it")
    for name in _CONFIG_FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", type=_field_type(name), default=None)


def build_config(args) -> ModelConfig:
    base = ModelConfig.preset(args.preset) if args.preset else ModelConfig()
    vals = base.to_dict()
    if args.model_config:
        try:
            with open(args.model_config) as f:
                lines = f.read().splitlines()
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from e
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep or key not in _CONFIG_FIELDS:
                raise UsageError(f"bad config line {line!r}")
            vals[key] = _field_type(key)(raw.strip())
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name)
        if flag is not None:
            vals[name] = flag
    try:
        return ModelConfig(**vals)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _check_scale_conflict(args, model: CATANet) -> None:
    if getattr(args, "scale", None) is not None and args.scale != model.config.scale:
        raise UsageError(
            f"--scale {args.scale} conflicts with checkpoint scale {model.config.scale}"
        )


def _list_pngs(directory) -> list[str]:
    try:
        names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    except OSError as e:
        raise UsageError(f"cannot list {directory}: {e}") from e
    if not names:
        raise UsageError(f"no PNG files in {directory}")
    return names


# ---------------------------------------------------------------------------


def cmd_train(args) -> None:
    config = build_config(args)
    names = _list_pngs(args.data)
    images = [data.load_image(os.path.join(args.data, n)) for n in names]
    model = CATANet(config, seed=args.seed)
    csv_path = args.loss_csv or args.out + ".loss.csv"
    trace = train_loop(model, images, steps=args.steps, lr=args.lr, seed=args.seed,
                       batch=args.batch, patch=args.patch, csv_path=csv_path,
                       log_every=args.log_every)
    checkpoint_save(model, args.out)
    first = np.mean([t[1] for t in trace[: max(1, len(trace) // 10)]])
    last = np.mean([t[1] for t in trace[-max(1, len(trace) // 10) :]])
    print(f"trained {args.steps} steps on {len(images)} images: "
          f"loss {first:.5f} -> {last:.5f}")
    print(f"checkpoint: {args.out}")
    print(f"loss trace: {csv_path}")


def cmd_infer(args) -> None:
    model = checkpoint_load(args.checkpoint)
    _check_scale_conflict(args, model)
    img = data.load_image(args.input)
    t0 = time.perf_counter()
    if args.self_ensemble:
        out = data.self_ensemble(model, img)
    else:
        out = network.forward(img, model, training=False).value
    dt_ms = (time.perf_counter() - t0) * 1000.0
    check_finite(out, "super-resolved output")
    data.save_image(out, args.output)
    print(f"{args.input} -> {args.output}  x{model.config.scale}  {dt_ms:.1f} ms")


def cmd_eval(args) -> None:
    model = checkpoint_load(args.checkpoint)
    _check_scale_conflict(args, model)
    r = model.config.scale
    names = _list_pngs(args.hr_dir)

    def one(name: str):
        hr = data.load_image(os.path.join(args.hr_dir, name))
        _, h, w = hr.shape
        hr = hr[:, : (h // r) * r, : (w // r) * r]
        lr = data.degrade_bicubic(hr, r)
        if args.self_ensemble:
            sr = data.self_ensemble(model, lr)
        else:
            sr = network.forward(lr, model, training=False).value
        check_finite(sr, f"super-resolved {name}")
        return name, data.psnr_y(hr, sr, crop=r), data.ssim_y(hr, sr, crop=r)

    workers = int(os.environ.get("CATANET_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, names))
    else:
        rows = [one(n) for n in names]
    rows.sort(key=lambda row: row[0])
    mean_psnr, mean_ssim = data.write_metrics_csv(args.csv, rows)
    for name, p, s in rows:
        print(f"{name}: psnr={data.format_metric(p)} ssim={data.format_metric(s)}")
    print(f"mean: psnr={data.format_metric(mean_psnr)} ssim={data.format_metric(mean_ssim)}")
    print(f"csv: {args.csv}")


def cmd_group_vis(args) -> None:
    model = checkpoint_load(args.checkpoint)
    if not (0 <= args.rg < len(model.rgs)):
        raise UsageError(f"--rg {args.rg} out of range for {len(model.rgs)} groups")
    img = data.load_image(args.input)
    x = network.shallow_extract(constant(img), model)
    for j in range(args.rg):
        x = network.residual_group(x, model.rgs[j], model.banks[j], model.config,
                                   training=False)
    grouping = attention.tab_grouping(x.value, model.rgs[args.rg].tab,
                                      model.banks[args.rg], model.config.subgroup_size)
    _, h, w = x.value.shape
    label_map = grouping.labels.reshape(h, w)
    os.makedirs(args.out_dir, exist_ok=True)
    written = 0
    for group_id in np.unique(label_map):
        mask = (label_map == group_id).astype(np.uint8) * 255
        Image.fromarray(mask, mode="L").save(
            os.path.join(args.out_dir, f"group_{int(group_id):03d}.png")
        )
        written += 1
    print(f"wrote {written} group masks ({h}x{w} tokens) to {args.out_dir}")


def cmd_bench(args) -> None:
    config = build_config(args)
    h, w = args.size
    n = h * w
    d = config.dim
    rng = np.random.default_rng(args.seed)
    tokens = rng.standard_normal((n, d)).astype(np.float32)
    # skewed distribution: one group hoards most tokens, the rest spread out
    labels = np.where(
        rng.random(n) < args.skew,
        0,
        rng.integers(1, max(2, config.n_centers), size=n),
    ).astype(np.int64)
    grouping = build_grouping(labels, config.subgroup_size)
    weights = attention.AttentionWeights(
        w_q=constant(rng.normal(0, 0.02, (d, d)).astype(np.float32)),
        w_k=constant(rng.normal(0, 0.02, (d, d)).astype(np.float32)),
        w_v=constant(rng.normal(0, 0.02, (d, d)).astype(np.float32)),
        w_out=constant(rng.normal(0, 0.02, (d, d)).astype(np.float32)),
        heads=config.heads,
    )

    runs = {
        "subgrouped": lambda: attention.iasa(tokens, grouping, weights).value,
        "naive-groups": lambda: attention.iasa_looped(tokens, grouping, weights),
    }
    out_a = runs["subgrouped"]()
    out_b = runs["naive-groups"]()
    cross = float(np.max(np.abs(out_a - out_b)))

    fn = runs[args.mode]
    for _ in range(args.warmup):
        fn()
    samples = []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1000.0)
    report = {
        "mode": args.mode,
        "size": [h, w],
        "tokens": n,
        "subgroups": grouping.n_subgroups,
        "subgroup_size": config.subgroup_size,
        "reps": args.reps,
        "warmup": args.warmup,
        "mean_ms": float(np.mean(samples)),
        "min_ms": float(np.min(samples)),
        "max_ms": float(np.max(samples)),
        "cross_max_abs_diff": cross,
        "samples_ms": samples,
    }
    print(f"mode={args.mode} tokens={n} subgroups={grouping.n_subgroups} "
          f"mean={report['mean_ms']:.3f}ms min={report['min_ms']:.3f}ms "
          f"max={report['max_ms']:.3f}ms cross_max_abs_diff={cross:.2e}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(report, f, indent=1)
        print(f"json: {args.json}")


def cmd_params(args) -> None:
    config = build_config(args)
    model = CATANet(config, init="zeros")
    h, w = args.size
    print(f"params={network.param_count(model)}")
    print(f"buffers={network.buffer_count(model)}")
    print(f"multi_adds[{h}x{w}]={network.multi_adds(config, h, w)}")


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="catanet", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train on a directory of HR PNGs")
    p.add_argument("--data", required=True, help="directory of HR PNG images")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--patch", type=int, default=None, help="HR crop size (default 8*scale)")
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--log-every", type=int, default=0)
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one PNG")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--self-ensemble", action="store_true")
    p.add_argument("--scale", type=int, default=None,
                   help="must match the checkpoint scale if given")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="degrade->infer->PSNR/SSIM over a HR directory")
    p.add_argument("checkpoint")
    p.add_argument("hr_dir")
    p.add_argument("--csv", default="metrics.csv")
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--self-ensemble", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("group-vis", help="dump binary token-group masks")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("out_dir")
    p.add_argument("--rg", type=int, default=0, help="residual group index")
    p.set_defaults(func=cmd_group_vis)

    p = sub.add_parser("bench", help="time the intra-group attention schedules")
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    p.add_argument("--mode", choices=["subgrouped", "naive-groups"], default="subgrouped")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skew", type=float, default=0.8,
                   help="fraction of tokens forced into one group")
    p.add_argument("--json", default=None, help="write the full report here")
    add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", help="parameter / buffer / multiply-add counters")
    p.add_argument("--size", type=int, nargs=2, default=[256, 256], metavar=("H", "W"))
    add_config_flags(p)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            return 1
        args.func(args)
        return 0
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (StateError, ValueError, DimensionError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ImageError, CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    except (DivergenceError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
