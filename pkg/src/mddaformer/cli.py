"""Command-line entry point: make-data, train, infer, eval, bench.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import statistics
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .complexity import FLOP_CONVENTION, tally
from .data import DegradeSpec, make_pairs
from .errors import ConfigError, MddaError
from .imageio import list_images, load_image, save_image
from .metrics import EvalReport
from .network import ModelConfig, build_model, restore
from .train import OptState, Schedule, train_loop, write_trace_csv

log = logging.getLogger("mddaformer")

DEFAULTS = {
    "command": None,
    "seed": 0,
    "threads": 1,
    "model": {"preset": "tiny"},
    "schedule": {"lr_init": 2e-4, "lr_min": 1e-6},
    "train": {"steps": 500, "batch": 4, "eval_every": 100, "ckpt_every": 100,
              "weight_decay": 0.02, "resume": None},
    "degrade": DegradeSpec().to_dict(),
    "data": {"clean_dir": None, "pairs_dir": None, "patch_size": 32, "patches_per_image": 4},
    "paths": {"run_dir": "run", "checkpoint": None, "input_dir": None, "output_dir": None,
              "restored_dir": None, "eval_csv": None},
    "eval": {"y_channel": False},
    "bench": {"res": 256, "runs": 10, "warmup": 3, "latency": True},
}

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed", "threads": "threads",
    "preset": "model.preset", "stage_types": "model.stage_types",
    "lr": "schedule.lr_init", "lr_min": "schedule.lr_min",
    "steps": "train.steps", "batch": "train.batch", "eval_every": "train.eval_every",
    "ckpt_every": "train.ckpt_every", "resume": "train.resume",
    "kind": "degrade.kind", "sigma": "degrade.sigma", "rain_count": "degrade.count",
    "rain_length": "degrade.length", "rain_angle": "degrade.angle",
    "rain_intensity": "degrade.intensity", "haze_beta": "degrade.beta",
    "airlight": "degrade.airlight", "depth_mode": "degrade.depth_mode",
    "ll_gamma": "degrade.gamma", "ll_gain": "degrade.gain", "degrade_seed": "degrade.seed",
    "clean_dir": "data.clean_dir", "pairs_dir": "data.pairs_dir", "patch_size": "data.patch_size",
    "patches_per_image": "data.patches_per_image",
    "run_dir": "paths.run_dir", "checkpoint": "paths.checkpoint", "input_dir": "paths.input_dir",
    "output_dir": "paths.output_dir", "restored_dir": "paths.restored_dir", "out": "paths.eval_csv",
    "y_channel": "eval.y_channel",
    "res": "bench.res", "runs": "bench.runs", "warmup": "bench.warmup",
}

MODEL_KEYS = {"preset"} | set(ModelConfig.__dataclass_fields__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{where}{k}"
        if where == "model." and k in MODEL_KEYS:
            out[k] = v
            continue
        if k not in base:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{key}' must be a table")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _set(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[p]
    if parts[-1] not in node and not (parts[0] == "model" and parts[-1] in MODEL_KEYS):
        raise ConfigError(f"unknown config key '{dotted}'")
    node[parts[-1]] = value


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = _merge(cfg, file_cfg)
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            _set(cfg, key, v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            v = json.loads(v)
        except json.JSONDecodeError:
            pass
        _set(cfg, k, v)
    if cfg["command"] not in (None, args.command):
        raise ConfigError(f"config was written for '{cfg['command']}', not '{args.command}'")
    cfg["command"] = args.command
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    preset = m.pop("preset", None)
    return ModelConfig.preset(preset, **m) if preset else ModelConfig(**m)


def _write_effective(cfg: dict) -> Path:
    run = Path(cfg["paths"]["run_dir"])
    run.mkdir(parents=True, exist_ok=True)
    # train owns the run; other commands echo beside it without clobbering it
    name = "effective-config.json" if cfg["command"] == "train" else f"effective-config.{cfg['command']}.json"
    p = run / name
    p.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return p


def _need(cfg: dict, dotted: str):
    sec, key = dotted.split(".")
    v = cfg[sec][key]
    if v in (None, ""):
        raise UsageError(f"missing required setting '{dotted}' (flag or config file)")
    return v


# ---------------------------------------------------------------------------
# commands

def cmd_make_data(cfg: dict) -> int:
    clean_dir = Path(_need(cfg, "data.clean_dir"))
    out = Path(_need(cfg, "paths.output_dir"))
    spec = DegradeSpec.from_dict(cfg["degrade"])
    spec.validate()
    files = list_images(clean_dir)
    if not files:
        raise ConfigError(f"{clean_dir}: no PNG/PPM images found")
    imgs = [load_image(f) for f in files]
    pairs = make_pairs(imgs, spec, cfg["data"]["patch_size"], cfg["data"]["patches_per_image"], cfg["seed"])
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, p in enumerate(pairs):
        name = f"{k:05d}.png"
        save_image(p["degraded"], out / "degraded" / name)
        save_image(p["clean"], out / "clean" / name)
        entries.append({"name": name, "source": files[p["source"]].name, "top": p["top"],
                        "left": p["left"], "size": cfg["data"]["patch_size"], "seed": p["seed"]})
    manifest = {"seed": cfg["seed"], "spec": spec.to_dict(), "patches": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(entries)} pairs to {out}")
    return 0


def _load_pair_dir(d: Path) -> list:
    deg = {p.name: p for p in list_images(d / "degraded")}
    clean = {p.name: p for p in list_images(d / "clean")}
    names = sorted(set(deg) & set(clean))
    if not names:
        raise ConfigError(f"{d}: no matching degraded/clean pairs")
    return [{"name": n, "degraded": load_image(deg[n]), "clean": load_image(clean[n])} for n in names]


def cmd_train(cfg: dict) -> int:
    run = Path(cfg["paths"]["run_dir"])
    tr = cfg["train"]
    if cfg["data"]["pairs_dir"]:
        pairs = _load_pair_dir(Path(cfg["data"]["pairs_dir"]))
    elif cfg["data"]["clean_dir"]:
        spec = DegradeSpec.from_dict(cfg["degrade"])
        imgs = [load_image(f) for f in list_images(cfg["data"]["clean_dir"])]
        pairs = make_pairs(imgs, spec, cfg["data"]["patch_size"], cfg["data"]["patches_per_image"], cfg["seed"])
        for i, p in enumerate(pairs):
            p["name"] = f"{i:05d}"
    else:
        raise UsageError("train needs data.pairs_dir or data.clean_dir")
    sch = Schedule(cfg["schedule"]["lr_init"], cfg["schedule"]["lr_min"], tr["steps"])
    if tr["resume"]:
        model, opt = load_checkpoint(tr["resume"])
        opt = opt or OptState(weight_decay=tr["weight_decay"])
        remaining = max(tr["steps"] - opt.step, 0)
    else:
        model = build_model(model_config(cfg), cfg["seed"])
        opt = OptState(weight_decay=tr["weight_decay"])
        remaining = tr["steps"]
    ckpt_dir = run / "checkpoints"

    def report(row):
        if row.eval_psnr is not None:
            log.info("step %d lr %.3g loss %.4f eval_psnr %.3f", row.step, row.lr, row.loss, row.eval_psnr)

    res = train_loop(model, pairs, remaining, tr["batch"], cfg["seed"], schedule=sch, opt=opt,
                     eval_every=tr["eval_every"], ckpt_every=tr["ckpt_every"], ckpt_dir=ckpt_dir,
                     on_step=report)
    write_trace_csv(res.trace, run / "loss.csv", append=bool(tr["resume"]))
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, res.opt, ckpt_dir / "final.ckpt")
    report_ = EvalReport("y" if cfg["eval"]["y_channel"] else "rgb")
    with T.no_grad():
        for p in pairs:
            out = np.clip(restore(model, p["degraded"]).data, 0.0, 1.0)
            report_.add(p["name"], out, p["clean"])
    report_.write_csv(run / "eval.csv")
    final = res.trace[-1].loss if res.trace else float("nan")
    print(f"trained {len(res.trace)} steps; final loss {final:.4f}; "
          f"mean PSNR {report_.mean_psnr:.3f} dB on {len(pairs)} training pairs")
    return 0


def cmd_infer(cfg: dict) -> int:
    model, _ = load_checkpoint(_need(cfg, "paths.checkpoint"))
    files = list_images(_need(cfg, "paths.input_dir"))
    out = Path(cfg["paths"]["output_dir"] or Path(cfg["paths"]["run_dir"]) / "outputs")
    if not files:
        log.warning("no PNG/PPM images in %s; nothing to do", cfg["paths"]["input_dir"])
        return 0
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        for f in files:
            restored = restore(model, load_image(f))
            save_image(np.clip(restored.data, 0.0, 1.0), out / f.name)
    print(f"restored {len(files)} images into {out}")
    return 0


def cmd_eval(cfg: dict) -> int:
    rdir, cdir = Path(_need(cfg, "paths.restored_dir")), Path(_need(cfg, "data.clean_dir"))
    clean = {p.name: p for p in list_images(cdir)}
    report = EvalReport("y" if cfg["eval"]["y_channel"] else "rgb")
    for p in list_images(rdir):
        if p.name not in clean:
            log.warning("%s has no clean counterpart; skipped", p.name)
            continue
        report.add(p.name, load_image(p), load_image(clean[p.name]))
    out = Path(cfg["paths"]["eval_csv"] or Path(cfg["paths"]["run_dir"]) / "eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    print(f"{len(report.rows)} pairs ({report.channel_mode}): mean PSNR {report.mean_psnr:.4f} dB, "
          f"mean SSIM {report.mean_ssim:.4f}; written to {out}")
    return 0


def cmd_bench(cfg: dict) -> int:
    mcfg = model_config(cfg)
    b = cfg["bench"]
    res = int(b["res"])
    t = tally(mcfg, res, res)
    print(f"params: {t.params} ({t.params / 1e6:.2f} M)")
    print(f"FLOPs @ {res}x{res}: {t.flops} ({t.flops / 1e9:.2f} G)  [{FLOP_CONVENTION}]")
    print(f"  conv {t.conv / 1e9:.3f} G, linear {t.linear / 1e9:.6f} G, attention {t.attention / 1e9:.3f} G")
    if b["latency"]:
        model = build_model(mcfg, cfg["seed"], validate=False)
        x = T.Tensor(np.random.default_rng(cfg["seed"]).uniform(0, 1, (1, 3, res, res)).astype(np.float32))
        times = []
        with T.no_grad():
            for i in range(int(b["warmup"]) + int(b["runs"])):
                t0 = time.perf_counter()
                restore(model, x)
                if i >= int(b["warmup"]):
                    times.append((time.perf_counter() - t0) * 1e3)
        print(f"latency (CPU, informational, threads={cfg['threads']}): median {statistics.median(times):.1f} ms, "
              f"min {min(times):.1f} ms, max {max(times):.1f} ms over {len(times)} runs "
              f"after {b['warmup']} warm-ups")
    return 0


COMMANDS = {"make-data": cmd_make_data, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mddaformer", description="Hybrid CNN/transformer image restoration toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; flags override its keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any dotted config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="BLAS thread count (1 = deterministic)")
        sp.add_argument("--run-dir")
        sp.add_argument("-v", "--verbose", action="store_true")

    def degrade_flags(sp):
        sp.add_argument("--kind", choices=["gaussian_noise", "rain_streaks", "haze", "low_light"])
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--rain-count", type=int)
        sp.add_argument("--rain-length", type=float)
        sp.add_argument("--rain-angle", type=float)
        sp.add_argument("--rain-intensity", type=float)
        sp.add_argument("--haze-beta", type=float)
        sp.add_argument("--airlight", type=float)
        sp.add_argument("--depth-mode", choices=["linear-gradient", "radial"])
        sp.add_argument("--ll-gamma", type=float)
        sp.add_argument("--ll-gain", type=float)
        sp.add_argument("--degrade-seed", type=int)
        sp.add_argument("--patch-size", type=int)
        sp.add_argument("--patches-per-image", type=int)

    sp = sub.add_parser("make-data", help="build degraded/clean patch pairs from clean images")
    common(sp)
    degrade_flags(sp)
    sp.add_argument("--clean-dir")
    sp.add_argument("--out-dir", dest="output_dir")

    sp = sub.add_parser("train", help="train a model on patch pairs")
    common(sp)
    degrade_flags(sp)
    sp.add_argument("--pairs-dir")
    sp.add_argument("--clean-dir")
    sp.add_argument("--preset", choices=["tiny", "small", "full"])
    sp.add_argument("--stage-types")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lr-min", type=float)
    sp.add_argument("--eval-every", type=int)
    sp.add_argument("--ckpt-every", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--y-channel", action="store_true", default=None)

    sp = sub.add_parser("infer", help="restore every image in a directory")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--input-dir")
    sp.add_argument("--output-dir")

    sp = sub.add_parser("eval", help="PSNR/SSIM of restored vs clean images (matched by file name)")
    common(sp)
    sp.add_argument("--restored-dir")
    sp.add_argument("--clean-dir")
    sp.add_argument("--y-channel", action="store_true", default=None)
    sp.add_argument("--out", help="CSV report path")

    sp = sub.add_parser("bench", help="parameter / FLOP counts and CPU latency")
    common(sp)
    sp.add_argument("--preset", choices=["tiny", "small", "full"])
    sp.add_argument("--stage-types")
    sp.add_argument("--res", type=int)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--no-latency", dest="latency", action="store_false", default=None)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        cfg = resolve_config(args)
        if getattr(args, "latency", None) is False:
            cfg["bench"]["latency"] = False
    except UsageError as exc:
        print(f"mddaformer: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"mddaformer: config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from threadpoolctl import threadpool_limits
    try:
        _write_effective(cfg)
        with threadpool_limits(limits=int(cfg["threads"])):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"mddaformer: error: {exc}", file=sys.stderr)
        return 1
    except (MddaError, OSError) as exc:
        print(f"mddaformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
