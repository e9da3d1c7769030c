"""Optimizer, schedule, and the training/evaluation loop.

AdamW applies decoupled weight decay (norm gains, biases, positional
embeddings, and history pseudo-queries are exempt); the learning rate decays
exponentially per epoch. All randomness flows from labeled streams derived
from the run seed, and the optimizer+RNG state round-trips through
checkpoints so a resumed run is bit-identical to an uninterrupted one.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as hd
from . import tensor as ht
from .errors import ConfigError, NumericError
from .metrics import EvalReport, evaluate_pairs
from .model import ModelConfig, PoseLifter, load_checkpoint, save_checkpoint
from .rng import derive_rng
from .tensor import Tensor

BASE_LR = 5e-4
LR_DECAY = 0.99


def lr_at(epoch: int, base_lr: float = BASE_LR, decay: float = LR_DECAY) -> float:
    """Learning rate used during ``epoch`` (0-based): base * decay^epoch."""
    return base_lr * decay ** epoch


def is_decay_exempt(name: str) -> bool:
    """Norm gains, biases, positional embeddings, pseudo-queries skip decay."""
    leaf = name.rsplit(".", 1)[-1]
    return (leaf.startswith("b") or "gain" in leaf or leaf.startswith("pos_")
            or leaf == "pseudo_query")


@dataclass
class AdamWState:
    step: int
    m: dict
    v: dict

    @classmethod
    def init(cls, named_params) -> "AdamWState":
        return cls(step=0,
                   m={name: np.zeros_like(p.data) for name, p in named_params},
                   v={name: np.zeros_like(p.data) for name, p in named_params})


def adamw_step(named_params, state: AdamWState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One bias-corrected AdamW update; rejects the whole step on bad grads."""
    for name, p in named_params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        if weight_decay != 0.0 and not is_decay_exempt(name):
            p.data = p.data * (1.0 - lr * weight_decay)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so the global norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    total = float(np.sqrt(total))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return float(total)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# -- run configuration --------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 90
    batch_size: int = 4
    base_lr: float = BASE_LR
    lr_decay: float = LR_DECAY
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    flip_prob: float = 0.5
    test_time_flip: bool = True
    grad_clip: float = 5.0
    eval_fraction: float = 0.1
    checkpoint_every: int = 10
    dtype: str = "float64"

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown train config field(s): {', '.join(unknown)}")
        cfg = cls(**raw)
        if cfg.epochs < 0 or cfg.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= cfg.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")
        if not 0.0 <= cfg.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must be in [0, 1)")
        if cfg.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {cfg.dtype!r}")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = sorted(set(raw) - {"model", "train"})
        if unknown:
            raise ConfigError(f"unknown run config section(s): {', '.join(unknown)}")
        return cls(model=ModelConfig.from_dict(raw.get("model", {})),
                   train=TrainConfig.from_dict(raw.get("train", {})))

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}


# -- batching helpers ------------------------------------------------------------------


def _flip_batch(batch, pairs):
    """Mirror (B, T, J, 3) sequences; same semantics as data.flip per sample."""
    out = batch.copy()
    out[..., 0] = -out[..., 0]
    for left, right in pairs:
        out[:, :, [left, right]] = out[:, :, [right, left]]
    return out


def prepare_clips(clips, skeleton: hd.Skeleton):
    """Stack clip inputs/targets: (N, T, J, 3) each plus per-clip actions."""
    frames = clips[0].gt3d.shape[0]
    for clip in clips:
        if clip.gt3d.shape[0] != frames:
            raise ConfigError("all clips must share one frame count")
    inputs = np.stack([clip.pose2d for clip in clips])
    targets = np.stack([hd.root_relative(clip.gt3d, skeleton) for clip in clips])
    actions = np.array([clip.action for clip in clips])
    return inputs, targets, actions


def predict(model: PoseLifter, inputs, pairs, flip_average: bool = True,
            batch_size: int = 32) -> np.ndarray:
    """Root-relative predictions, optionally averaged with the flipped view."""
    preds = []
    with ht.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            chunk = inputs[start:start + batch_size]
            pred, _ = model.forward(chunk)
            pred = pred.data
            if flip_average:
                flipped_in = _flip_batch(chunk, pairs)
                mirror, _ = model.forward(flipped_in)
                pred = 0.5 * (pred + _flip_batch(mirror.data, pairs))
            preds.append(pred)
    return np.concatenate(preds, axis=0)


def evaluate_model(model: PoseLifter, inputs, targets, pairs, actions=None,
                   flip_average: bool = True, batch_size: int = 32) -> EvalReport:
    preds = predict(model, inputs, pairs, flip_average, batch_size)
    n, frames = preds.shape[0], preds.shape[1]
    flat_pred = preds.reshape(n * frames, *preds.shape[2:])
    flat_gt = targets.reshape(n * frames, *targets.shape[2:])
    frame_actions = None
    if actions is not None:
        frame_actions = np.repeat(np.asarray(actions), frames)
    return evaluate_pairs(flat_pred, flat_gt, frame_actions)


def flip_averaging_gain(model: PoseLifter, inputs, targets, pairs,
                        batch_size: int = 32) -> float:
    """Soft diagnostic: MPJPE(plain) - MPJPE(flip-averaged), positive = gain."""
    with_avg = evaluate_model(model, inputs, targets, pairs, flip_average=True,
                              batch_size=batch_size)
    plain = evaluate_model(model, inputs, targets, pairs, flip_average=False,
                           batch_size=batch_size)
    return plain.mpjpe_mm - with_avg.mpjpe_mm


# -- training loop ----------------------------------------------------------------------


HISTORY_FIELDS = ("epoch", "lr", "train_loss", "eval_mpjpe", "eval_pmpjpe")


def history_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for row in rows:
        writer.writerow([row["epoch"],
                         repr(row["lr"]),
                         "" if row["train_loss"] is None else repr(row["train_loss"]),
                         repr(row["eval_mpjpe"]),
                         repr(row["eval_pmpjpe"])])
    return buf.getvalue()


@dataclass
class TrainResult:
    model: PoseLifter
    history: list
    aborted: bool = False
    checkpoint_path: str | None = None


def _split_indices(count: int, eval_fraction: float, seed: int):
    n_eval = max(1, int(round(count * eval_fraction))) if eval_fraction > 0 else 0
    order = derive_rng(seed, "split").permutation(count)
    return np.sort(order[n_eval:]), np.sort(order[:n_eval])


def train(run: RunConfig, clips, seed: int, skeleton: hd.Skeleton | None = None,
          out_dir=None, resume_from=None, log=None) -> TrainResult:
    """Train a model on clips; deterministic given (config, clips, seed)."""
    if not clips:
        raise ConfigError("dataset is empty")
    skeleton = skeleton or hd.Skeleton.default_human()
    cfg = run.train
    model_cfg = run.model.resolved()

    inputs, targets, actions = prepare_clips(clips, skeleton)
    train_idx, eval_idx = _split_indices(len(clips), cfg.eval_fraction, seed)
    if len(train_idx) == 0:
        raise ConfigError("eval split left no training clips")
    eval_inputs, eval_targets = inputs[eval_idx], targets[eval_idx]
    pairs = skeleton.flip_pairs

    model = PoseLifter(model_cfg, seed=seed, dtype=np.dtype(cfg.dtype))
    named = model.named_parameters()
    params = [p for _, p in named]
    opt_state = AdamWState.init(named)
    rng = derive_rng(seed, "train")
    history = []
    start_epoch = 0

    if resume_from is not None:
        model, meta, extras = load_checkpoint(resume_from)
        if model.config.to_dict() != model_cfg.to_dict():
            raise ConfigError("checkpoint model config does not match run config")
        saved = meta.get("train_state")
        if saved is None:
            raise ConfigError("checkpoint has no training state to resume from")
        named = model.named_parameters()
        params = [p for _, p in named]
        opt_state = AdamWState.init(named)
        opt_state.step = int(saved["step"])
        for name, _ in named:
            opt_state.m[name] = extras[f"opt.m.{name}"]
            opt_state.v[name] = extras[f"opt.v.{name}"]
        rng.bit_generator.state = saved["rng_state"]
        start_epoch = int(saved["epoch"])
        history = list(saved["history"])

    def eval_now() -> EvalReport:
        if len(eval_idx) == 0:
            return EvalReport(float("nan"), float("nan"), float("nan"), float("nan"))
        return evaluate_model(model, eval_inputs, eval_targets, pairs,
                              flip_average=cfg.test_time_flip)

    def save(epoch: int, tag: str) -> str:
        state = {
            "step": opt_state.step,
            "epoch": epoch,
            "rng_state": rng.bit_generator.state,
            "history": history,
        }
        extras = {}
        for name, _ in named:
            extras[f"opt.m.{name}"] = opt_state.m[name]
            extras[f"opt.v.{name}"] = opt_state.v[name]
        path = str(out_dir / f"checkpoint_{tag}.hpkc")
        save_checkpoint(path, model, meta={"train_state": state, "seed": seed,
                                           "train_config": cfg.to_dict()},
                        extra_tensors=extras)
        return path

    if start_epoch == 0:
        report = eval_now()
        history.append({"epoch": 0, "lr": lr_at(0, cfg.base_lr, cfg.lr_decay),
                        "train_loss": None, "eval_mpjpe": report.mpjpe_mm,
                        "eval_pmpjpe": report.p_mpjpe_mm})

    checkpoint_path = None
    aborted = False
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg.base_lr, cfg.lr_decay)
        order = rng.permutation(len(train_idx))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chosen = train_idx[order[start:start + cfg.batch_size]]
            batch_in = inputs[chosen].copy()
            batch_gt = targets[chosen].copy()
            coins = rng.random(len(chosen)) < cfg.flip_prob
            if coins.any():
                batch_in[coins] = _flip_batch(batch_in[coins], pairs)
                batch_gt[coins] = _flip_batch(batch_gt[coins], pairs)

            pred, _ = model.forward(batch_in, train_mode=True, rng=rng)
            loss = model.loss(pred, Tensor(batch_gt))
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                aborted = True
                break
            zero_grads(params)
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            adamw_step(named, opt_state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                       cfg.weight_decay)
            losses.append(loss_value)
        if aborted:
            break

        report = eval_now()
        history.append({"epoch": epoch + 1, "lr": lr,
                        "train_loss": float(np.mean(losses)) if losses else None,
                        "eval_mpjpe": report.mpjpe_mm,
                        "eval_pmpjpe": report.p_mpjpe_mm})
        if log is not None:
            log(history[-1])
        if out_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0
                                    or epoch + 1 == cfg.epochs):
            checkpoint_path = save(epoch + 1, f"epoch{epoch + 1:04d}")

    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(history_to_csv(history))
        if checkpoint_path is None and not aborted:
            checkpoint_path = save(start_epoch, "final")
    return TrainResult(model=model, history=history, aborted=aborted,
                       checkpoint_path=checkpoint_path)
