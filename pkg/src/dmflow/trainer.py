"""End-to-end curriculum training loop.

One step: draw a batch on the interpolation path with logit-normal times,
build the stage target on a detached snapshot of the current parameters,
regress the live model onto it with Adam, then update the EMA shadow.
Metrics aggregate per epoch into a CSV; checkpoints are written at stage
boundaries.  Runs are bit-reproducible from the config seed.

Divergence policy: a step whose loss, gradients or updated parameters are
non-finite is aborted (parameters restored from the snapshot); three
consecutive aborted steps halt the run with a stage-tagged
:class:`DivergenceError`.  Checkpoints are only ever written from finite
parameters.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .curriculum import CurriculumSchedule, ObjectiveKind, build_target, stage_of
from .losses import LossConfig, loss_and_grad
from .network import (
    ModelParams,
    backward,
    forward_with_cache,
    grad_norm,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .paths import T_MIN, DatasetSampler, interpolate, make_sampler, stable_target_velocity
from .tensor import NonFiniteError

METRICS_HEADER = (
    "epoch,step,stage,objective_kind_fm_frac,loss,grad_norm,delta_mean,ema_rate,seed"
)


class DivergenceError(RuntimeError):
    """Raised after three consecutive aborted optimisation steps."""

    def __init__(self, stage: int, step: int, reason: str):
        self.stage = stage
        self.step = step
        super().__init__(
            f"training diverged at stage {stage} (global step {step}): {reason}"
        )


class ConfigError(ValueError):
    """Invalid or missing experiment-config field."""


@dataclass
class TrainConfig:
    batch_size: int = 256
    total_epochs: int = 10
    steps_per_epoch: int = 100
    optimizer: str = "adam"
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    ema_rate: float = 0.999
    p_mean: float = -2.0
    p_std: float = 2.0
    p_t_eq_r: float = 0.25
    dropout: float = 0.0  # kept for config parity; the MLP has no dropout layers
    stable_bsub: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_t_eq_r <= 1.0:
            raise ValueError("p_t_eq_r must lie in [0, 1]")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ValueError("ema_rate must lie in [0, 1)")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError("optimizer must be adam or adamw")


def logit_normal(n: int, p_mean: float, p_std: float, rng: np.random.Generator):
    """Sigmoid of a normal draw; the standard heavy-middle time distribution."""
    return expit(rng.normal(p_mean, p_std, size=n))


def sample_times(B: int, p_mean: float, p_std: float, p_t_eq_r: float, rng: np.random.Generator):
    """Draw (t, r) pairs: two logit-normal values per row, ordered, with an
    optional per-row collapse to the diagonal, clamped to [T_MIN, 1 - T_MIN]."""
    a = logit_normal(B, p_mean, p_std, rng)
    b = logit_normal(B, p_mean, p_std, rng)
    t = np.maximum(a, b)
    r = np.minimum(a, b)
    if p_t_eq_r > 0.0:
        collapse = rng.random(B) < p_t_eq_r
        r = np.where(collapse, t, r)
    t = np.clip(t, T_MIN, 1.0 - T_MIN)
    r = np.clip(r, T_MIN, 1.0 - T_MIN)
    return t, r


@dataclass
class EmaState:
    """Exponential moving average of the parameters, updated once per step."""

    shadow: ModelParams
    rate: float

    @classmethod
    def init(cls, params: ModelParams, rate: float) -> "EmaState":
        return cls(shadow=params.copy(), rate=rate)

    def update(self, params: ModelParams) -> None:
        for s, p in zip(self.shadow.arrays(), params.arrays()):
            s *= self.rate
            s += (1.0 - self.rate) * p
        self.shadow.param_version = params.param_version


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in params.arrays()],
                   v=[np.zeros_like(a) for a in params.arrays()])


def adam_update(params: ModelParams, grads: list, opt: AdamState, cfg: TrainConfig) -> None:
    opt.t += 1
    bc1 = 1.0 - cfg.beta1**opt.t
    bc2 = 1.0 - cfg.beta2**opt.t
    for p, g, m, v in zip(params.arrays(), grads, opt.m, opt.v):
        if cfg.optimizer == "adamw" and cfg.weight_decay > 0.0:
            p *= 1.0 - cfg.lr * cfg.weight_decay
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


@dataclass
class TrainerState:
    params: ModelParams
    ema: EmaState
    opt: AdamState
    config: TrainConfig
    schedule: CurriculumSchedule
    loss_cfg: LossConfig
    global_step: int = 0
    consecutive_bad: int = 0


def init_state(
    params: ModelParams,
    config: TrainConfig,
    schedule: CurriculumSchedule,
    loss_cfg: LossConfig | None = None,
) -> TrainerState:
    return TrainerState(
        params=params,
        ema=EmaState.init(params, config.ema_rate),
        opt=AdamState.init(params),
        config=config,
        schedule=schedule,
        loss_cfg=loss_cfg or LossConfig(),
    )


def make_batch(sampler: DatasetSampler, config: TrainConfig, rng: np.random.Generator):
    """Draw one training batch; substitutes the stable-target velocity when
    ``stable_bsub > 0`` (own z0 as reference row 0 plus fresh draws)."""
    B = config.batch_size
    z0 = sampler.sample(B, rng)
    eps = rng.standard_normal(z0.shape)
    t, r = sample_times(B, config.p_mean, config.p_std, config.p_t_eq_r, rng)
    sample = interpolate(z0, eps, t, r)
    if config.stable_bsub > 0:
        extra = sampler.sample(B * config.stable_bsub, rng).reshape(B, config.stable_bsub, -1)
        refs = np.concatenate([z0[:, None, :], extra], axis=1)
        sample = dataclasses.replace(
            sample, vt=stable_target_velocity(sample.zt, sample.t, refs)
        )
    return sample


def train_step(state: TrainerState, batch, stage: int) -> dict:
    """One optimisation step; returns metrics, aborting on non-finite values."""
    cfg = state.config
    state.global_step += 1
    snapshot = state.params.copy()  # detached target-side evaluation copy

    def aborted(reason: str) -> dict:
        state.consecutive_bad += 1
        if state.consecutive_bad >= 3:
            raise DivergenceError(stage, state.global_step, reason)
        return {
            "ok": False, "loss": float("nan"), "grad_norm": float("nan"),
            "stage": stage, "delta_mean": 0.0, "fm_frac": 0.0, "n_dmf": 0,
        }

    try:
        target = build_target(snapshot, batch, batch.vt, stage, state.schedule)
        pred, cache = forward_with_cache(state.params, batch.zt, batch.r, batch.t)
        scalar, _, grad_pred = loss_and_grad(pred, target.u_target, state.loss_cfg)
    except NonFiniteError as err:
        return aborted(str(err))

    dws, dbs = backward(state.params, cache, grad_pred)
    gnorm = grad_norm(dws, dbs)
    if not np.isfinite(scalar) or not np.isfinite(gnorm):
        return aborted(f"non-finite loss/gradient (loss={scalar!r}, grad_norm={gnorm!r})")

    grads = []
    for dw, db in zip(dws, dbs):
        grads.append(dw)
        grads.append(db)
    adam_update(state.params, grads, state.opt, cfg)
    if not state.params.all_finite():
        # roll back to the pre-update snapshot; the update overflowed
        for p, s in zip(state.params.arrays(), snapshot.arrays()):
            p[:] = s
        state.opt.t -= 1
        return aborted("parameter update produced non-finite values")

    state.params.param_version += 1
    state.ema.update(state.params)
    state.consecutive_bad = 0

    dmf_rows = target.kind == ObjectiveKind.DMF
    n_dmf = int(dmf_rows.sum())
    return {
        "ok": True,
        "loss": scalar,
        "grad_norm": gnorm,
        "stage": stage,
        "delta_mean": float(target.delta_used[dmf_rows].mean()) if n_dmf else 0.0,
        "fm_frac": float((target.kind == ObjectiveKind.FM).mean()),
        "n_dmf": n_dmf,
    }


@dataclass
class RunResult:
    params: ModelParams
    ema: ModelParams
    metrics_rows: list
    out_dir: Path | None
    checkpoints: dict = field(default_factory=dict)


def _fmt(x: float) -> str:
    return repr(float(x))


def run_curriculum(
    config: TrainConfig,
    schedule: CurriculumSchedule,
    dataset,
    *,
    loss_cfg: LossConfig | None = None,
    net: ModelParams | None = None,
    init_from: str | None = None,
    out_dir=None,
    hidden_dims=(256, 256, 256),
    n_freq: int = 16,
) -> RunResult:
    """Run the full staged budget over ``dataset`` (a name or sampler).

    ``init_from`` loads a checkpoint (dimensions are validated against the
    dataset before any training happens); otherwise ``net`` or a fresh
    seeded initialisation is used.  With ``out_dir`` set, per-epoch metrics
    and per-stage checkpoints are written there.
    """
    sampler = make_sampler(dataset) if isinstance(dataset, str) else dataset
    rng = np.random.default_rng(config.seed)

    if init_from is not None:
        params, _meta = load_checkpoint(init_from)
        if params.data_dim != sampler.dim:
            raise ConfigError(
                f"checkpoint dimension {params.data_dim} does not match "
                f"dataset {sampler.name!r} dimension {sampler.dim}"
            )
    elif net is not None:
        params = net
        if params.data_dim != sampler.dim:
            raise ConfigError("model dimension does not match dataset dimension")
    else:
        params = init_params(sampler.dim, hidden_dims=hidden_dims, n_freq=n_freq, rng=rng)

    state = init_state(params, config, schedule, loss_cfg)
    out_path = Path(out_dir) if out_dir is not None else None
    checkpoints: dict = {}
    rows: list = []
    fh = writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        fh = open(out_path / "metrics.csv", "w", newline="")
        fh.write(METRICS_HEADER + "\n")
        writer = csv.writer(fh)

    try:
        for epoch in range(config.total_epochs):
            stage = stage_of(epoch, schedule)
            losses, gnorms, deltas, fm_fracs, n_ok = [], [], [], [], 0
            for _ in range(config.steps_per_epoch):
                batch = make_batch(sampler, config, rng)
                metrics = train_step(state, batch, stage)
                if metrics["ok"]:
                    n_ok += 1
                    losses.append(metrics["loss"])
                    gnorms.append(metrics["grad_norm"])
                    deltas.append(metrics["delta_mean"])
                    fm_fracs.append(metrics["fm_frac"])
            row = {
                "epoch": epoch,
                "step": state.global_step,
                "stage": stage,
                "objective_kind_fm_frac": float(np.mean(fm_fracs)) if n_ok else 1.0,
                "loss": float(np.mean(losses)) if n_ok else float("nan"),
                "grad_norm": float(np.mean(gnorms)) if n_ok else float("nan"),
                "delta_mean": float(np.mean(deltas)) if n_ok else 0.0,
                "ema_rate": config.ema_rate,
                "seed": config.seed,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow(
                    [row["epoch"], row["step"], row["stage"],
                     _fmt(row["objective_kind_fm_frac"]), _fmt(row["loss"]),
                     _fmt(row["grad_norm"]), _fmt(row["delta_mean"]),
                     _fmt(row["ema_rate"]), row["seed"]]
                )
                fh.flush()
            stage_done = epoch + 1 == config.total_epochs or stage_of(epoch + 1, schedule) != stage
            if out_path is not None and stage_done:
                ckpt = out_path / f"stage_{stage}.ckpt"
                save_checkpoint(state.params, ckpt, seed=config.seed)
                checkpoints[f"stage_{stage}"] = ckpt
    finally:
        if fh is not None:
            fh.close()

    if out_path is not None:
        save_checkpoint(state.params, out_path / "final.ckpt", seed=config.seed)
        save_checkpoint(state.ema.shadow, out_path / "final_ema.ckpt", seed=config.seed)
        checkpoints["final"] = out_path / "final.ckpt"
        checkpoints["final_ema"] = out_path / "final_ema.ckpt"
    return RunResult(
        params=state.params, ema=state.ema.shadow, metrics_rows=rows,
        out_dir=out_path, checkpoints=checkpoints,
    )


# ---------------------------------------------------------------------------
# experiment-config schema (JSON): every run directory stores the resolved
# form with all defaults materialised
# ---------------------------------------------------------------------------

CONFIG_DEFAULTS = {
    "batch_size": 256,
    "epochs": 10,
    "optimizer": "adam",
    "lr": 6e-4,
    "ema_rate": 0.999,
    "dropout": 0.0,
    "stages_K": 2,
    "decay_q": 2.0,
    "eps_t": 1e-6,
    "loss": "adaptive",
    "norm_p": 0.75,
    "robust_c": 0.001,
    "p_mean": -2.0,
    "p_std": 2.0,
    "prob_t_eq_r": 0.0,
    "schedule_kind": "ve",
    "dataset": "gauss",
    "seed": 0,
    # implementation knobs beyond the core schema
    "steps_per_epoch": 100,
    "epochs_per_stage": None,  # default: epochs / stages_K
    "weight_decay": 0.0,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "hidden_dims": [256, 256, 256],
    "data_dim": 2,
    "n_freq": 16,
    "stable_bsub": 0,
}


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError` naming the field."""
    unknown = set(raw) - set(CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    cfg = dict(CONFIG_DEFAULTS)
    cfg.update(raw)
    if cfg["epochs_per_stage"] is None:
        if cfg["epochs"] % cfg["stages_K"] != 0:
            raise ConfigError(
                "epochs must divide evenly into stages_K "
                f"({cfg['epochs']} % {cfg['stages_K']} != 0); "
                "set epochs_per_stage explicitly to override"
            )
        cfg["epochs_per_stage"] = cfg["epochs"] // cfg["stages_K"]
    for key in ("batch_size", "epochs", "stages_K", "epochs_per_stage", "steps_per_epoch"):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise ConfigError(f"{key} must be a positive integer, got {cfg[key]!r}")
    if not cfg["dataset"]:
        raise ConfigError("dataset name is required")
    try:
        experiment_from_config(cfg, build=False)
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def experiment_from_config(cfg: dict, build: bool = True):
    """Map a resolved config to (TrainConfig, CurriculumSchedule, LossConfig)."""
    train = TrainConfig(
        batch_size=cfg["batch_size"],
        total_epochs=cfg["epochs"],
        steps_per_epoch=cfg["steps_per_epoch"],
        optimizer=cfg["optimizer"],
        lr=cfg["lr"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        adam_eps=cfg["adam_eps"],
        weight_decay=cfg["weight_decay"],
        ema_rate=cfg["ema_rate"],
        p_mean=cfg["p_mean"],
        p_std=cfg["p_std"],
        p_t_eq_r=cfg["prob_t_eq_r"],
        dropout=cfg["dropout"],
        stable_bsub=cfg["stable_bsub"],
        seed=cfg["seed"],
    )
    schedule = CurriculumSchedule(
        stages=cfg["stages_K"],
        decay=cfg["decay_q"],
        kind=cfg["schedule_kind"],
        eps_t=cfg["eps_t"],
        epochs_per_stage=cfg["epochs_per_stage"],
    )
    loss_cfg = LossConfig(kind=cfg["loss"], p=cfg["norm_p"], c=cfg["robust_c"])
    if not build:
        return None
    return train, schedule, loss_cfg


def load_config(path) -> dict:
    """Read and resolve a JSON experiment config."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return resolve_config(raw)
