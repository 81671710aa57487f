"""Command-line entry point: train / sample / verify / bench / eval.

Exit codes: 0 success, 1 runtime failure (e.g. a divergence halt or a
failing identity check), 2 usage or config errors.  The environment
variable ``DMF_SEED`` overrides whatever seed a config or flag supplies.

Run directories are self-describing: a manifest, the fully-resolved
config, per-epoch metrics CSV and the final checkpoints always land next
to each other.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import os
import subprocess
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .evalsuite import (
    bench_objectives,
    energy_distance,
    mode_coverage,
    sample_n_step,
    verify_identities,
    write_bench_report,
    write_verify_report,
)
from .network import load_checkpoint
from .paths import make_sampler
from .trainer import (
    ConfigError,
    DivergenceError,
    experiment_from_config,
    load_config,
    resolve_config,
    run_curriculum,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def code_version() -> str:
    """git-describe when running from a checkout, package version otherwise."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "-C", str(here), "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve_config_arg(spec: str) -> Path:
    """A filesystem path, or a shipped preset name (with or without the
    ``presets/`` prefix and ``.json`` suffix)."""
    p = Path(spec)
    if p.is_file():
        return p
    name = p.name
    if not name.endswith(".json"):
        name += ".json"
    packaged = importlib.resources.files("dmflow").joinpath("presets", name)
    if packaged.is_file():
        return Path(str(packaged))
    raise ConfigError(f"config {spec!r} not found (no such file or shipped preset)")


def list_presets() -> list:
    root = importlib.resources.files("dmflow").joinpath("presets")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def _apply_seed_env(cfg: dict) -> dict:
    env = os.environ.get("DMF_SEED")
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError as err:
            raise ConfigError(f"DMF_SEED must be an integer, got {env!r}") from err
    return cfg


def _prepare_out_dir(path: str, resume: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not resume:
        raise ConfigError(f"output directory {out} is not empty (pass --resume to reuse it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg_path = resolve_config_arg(args.config)
    raw = json.loads(cfg_path.read_text())
    for key, val in (
        ("dataset", args.dataset),
        ("seed", args.seed),
        ("epochs", args.epochs),
        ("steps_per_epoch", args.steps_per_epoch),
        ("batch_size", args.batch_size),
    ):
        if val is not None:
            raw[key] = val
    if args.epochs is not None and "epochs_per_stage" in raw:
        raw.pop("epochs_per_stage")  # re-derive for the overridden budget
    cfg = _apply_seed_env(resolve_config(raw))
    out = _prepare_out_dir(args.out, args.resume)

    sampler = make_sampler(cfg["dataset"], d=cfg["data_dim"])
    train_cfg, schedule, loss_cfg = experiment_from_config(cfg)

    manifest = {
        "name": args.name or out.name,
        "config": str(cfg_path),
        "dataset": cfg["dataset"],
        "schedule_preset": f"{cfg['schedule_kind']}:K{cfg['stages_K']}:q{cfg['decay_q']}",
        "out_dir": str(out),
        "code_version": code_version(),
        "init_from": args.init_from,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    result = run_curriculum(
        train_cfg,
        schedule,
        sampler,
        loss_cfg=loss_cfg,
        init_from=args.init_from,
        out_dir=out,
        hidden_dims=tuple(cfg["hidden_dims"]),
        n_freq=cfg["n_freq"],
    )
    last = result.metrics_rows[-1]
    print(
        f"trained {cfg['epochs']} epochs on {cfg['dataset']} "
        f"(final stage {last['stage']}, loss {last['loss']:.6g}); artifacts in {out}"
    )
    return EXIT_OK


def _dataset_for_checkpoint(args) -> str:
    if args.dataset:
        return args.dataset
    manifest = Path(args.ckpt).parent / "manifest.json"
    if manifest.is_file():
        return json.loads(manifest.read_text())["dataset"]
    raise ConfigError("pass --dataset (no manifest.json found next to the checkpoint)")


def _load_net(args):
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    params, meta = load_checkpoint(ckpt)
    return params, meta


def _seed_of(args) -> int:
    env = os.environ.get("DMF_SEED")
    if env is not None:
        return int(env)
    return args.seed


def cmd_sample(args) -> int:
    params, _ = _load_net(args)
    dataset = _dataset_for_checkpoint(args)
    seed = _seed_of(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    samples = sample_n_step(params, args.n, args.steps, rng)
    np.savetxt(out / "samples.csv", samples, delimiter=",")

    sampler = make_sampler(dataset, d=params.data_dim)
    held_out = sampler.sample(args.n, np.random.default_rng(seed + 1))
    metrics = {
        "energy_distance": energy_distance(samples, held_out),
        "n": args.n,
        "steps": args.steps,
        "seed": seed,
        "dataset": dataset,
    }
    if dataset == "gmm-ring":
        frac, hit = mode_coverage(samples)
        metrics["mode_fraction"] = frac
        metrics["modes_hit"] = hit
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(held_out[:, 0], held_out[:, 1], s=4, alpha=0.3, label="data")
    ax.scatter(samples[:, 0], samples[:, 1], s=4, alpha=0.3, label=f"{args.steps}-step samples")
    ax.legend()
    ax.set_title(f"{dataset}: energy distance {metrics['energy_distance']:.4f}")
    fig.savefig(out / "samples.png", dpi=120)
    plt.close(fig)

    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _ = _load_net(args)
    dataset = _dataset_for_checkpoint(args)
    seed = _seed_of(args)
    rng = np.random.default_rng(seed)
    samples = sample_n_step(params, args.n, args.steps, rng)
    held_out = make_sampler(dataset, d=params.data_dim).sample(
        args.n, np.random.default_rng(seed + 1)
    )
    metrics = {
        "energy_distance": energy_distance(samples, held_out),
        "n": args.n,
        "steps": args.steps,
        "seed": seed,
        "dataset": dataset,
    }
    if dataset == "gmm-ring":
        frac, hit = mode_coverage(samples)
        metrics["mode_fraction"] = frac
        metrics["modes_hit"] = hit
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify_identities(seed=args.seed, strict=args.strict)
    write_verify_report(report, args.report)
    for row in report.rows:
        status = "PASS" if row["passed"] else "FAIL"
        print(f"{status}  {row['check']}: value={row['value']:.6g} "
              f"bounds=[{row['lo']:.6g}, {row['hi']:.6g}]")
    if not report.passed:
        print(f"failing identities: {', '.join(report.failing())}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all identities verified; report at {args.report}")
    return EXIT_OK


def cmd_bench(args) -> int:
    hidden = tuple(int(h) for h in args.hidden.split(","))
    result = bench_objectives(
        hidden_dims=hidden, batch=args.batch, trials=args.trials, seed=args.seed
    )
    write_bench_report(result, args.report)
    print(
        f"forward {result['fwd_sec_per_batch']*1e3:.3f} ms | "
        f"jvp target {result['mf_sec_per_batch']*1e3:.3f} ms | "
        f"discrete target {result['dmf_sec_per_batch']*1e3:.3f} ms | "
        f"ratio {result['ratio']:.3f} ({args.trials} trials, report {args.report})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmflow",
        description="Train, sample and verify one-step mean-flow models at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a staged training curriculum from a config")
    p.add_argument("--config", required=True,
                   help="config JSON path or shipped preset name "
                        f"(presets: {', '.join(list_presets()) if _presets_available() else '...'})")
    p.add_argument("--out", required=True, help="run directory (created; must be empty)")
    p.add_argument("--dataset", help="override the config's dataset")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--epochs", type=int, help="override the epoch budget")
    p.add_argument("--steps-per-epoch", type=int, dest="steps_per_epoch")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--init-from", dest="init_from", help="checkpoint to initialise from")
    p.add_argument("--name", help="experiment name for the manifest")
    p.add_argument("--resume", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint and score them")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", help="held-out dataset (default: from the run manifest)")
    p.add_argument("--metric", choices=["energy"], default="energy")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint without writing samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset")
    p.add_argument("--out", help="optional metrics JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="check every identity against the Gaussian oracle")
    p.add_argument("--report", default="verify_report.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true",
                   help="tighten tolerances tenfold (diagnostics mode; may fail)")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="time JVP vs discrete target construction")
    p.add_argument("--hidden", default="256,256,256")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="bench_report.csv")
    p.set_defaults(fn=cmd_bench)

    return parser


def _presets_available() -> bool:
    try:
        list_presets()
        return True
    except (ModuleNotFoundError, FileNotFoundError):
        return False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as err:
        print(f"runtime halt: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
