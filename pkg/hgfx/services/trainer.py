"""Adam with linear warm-up, the epoch loop, evaluation and the experiment drivers."""

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hgfx.checkpoint import save_checkpoint
from hgfx.config import ABLATION_PRESETS, ModelConfig, OptimConfig, RunConfig, save_run_config
from hgfx.errors import ConfigError, DataError, GradError, NumericError
from hgfx.models import AblationRow, EpochRecord, SweepRecord
from hgfx.services.datasets import ImageDataset
from hgfx.services.graph_reason import HeteroGraphNet
from hgfx.tensor import GradTape, Tensor, cross_entropy

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "best.hgfx"
CONFIG_FILE = "config.json"
SWEEP_PARAMS = ("k", "dropout", "dilation")


# --- Optimizer ---


def lr_at(step: int, base_lr: float, warmup_ratio: float = 1e-4, warmup_steps: int = 0) -> float:
    """Linear ramp from ``base_lr * warmup_ratio`` at step 0 to ``base_lr`` at ``warmup_steps``."""
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    start = base_lr * warmup_ratio
    return start + (base_lr - start) * step / warmup_steps


@dataclass
class OptimState:
    base_lr: float = 1.25e-4
    warmup_ratio: float = 1e-4
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimConfig, total_steps: int) -> "OptimState":
        warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(round(cfg.warmup_fraction * total_steps))
        return cls(
            base_lr=cfg.lr,
            warmup_ratio=cfg.warmup_ratio,
            warmup_steps=warmup,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
        )

    @property
    def lr(self) -> float:
        return lr_at(self.step, self.base_lr, self.warmup_ratio, self.warmup_steps)


def adam_step(params: Sequence[tuple[str, Tensor]], state: OptimState, lr: float | None = None):
    """One bias-corrected Adam update, no weight decay. Every parameter needs a grad."""
    missing = [name for name, p in params if p.grad is None]
    if missing:
        raise GradError(f"no gradient for {', '.join(missing)}")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params:
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if lr == 0.0:
            continue
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    state.step = t


def clip_grad_norm(params: Sequence[tuple[str, Tensor]], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for _, p in params if p.grad is not None))
    if not math.isfinite(total):
        raise NumericError("gradient norm is not finite")
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# --- Evaluation ---


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if labels.size == 0:
        raise DataError("accuracy of an empty set is undefined")
    if predictions.shape != labels.shape:
        raise DataError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    return float(np.mean(predictions == labels))


def predict_proba(model: HeteroGraphNet, pixels: np.ndarray) -> np.ndarray:
    """Class probabilities (B, classes) with dropout disabled."""
    logits = model(pixels.astype(model.cfg.np_dtype), training=False).data.astype(np.float64)
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def predict(model: HeteroGraphNet, dataset: ImageDataset, batch_size: int = 64) -> np.ndarray:
    if len(dataset) == 0:
        raise DataError("cannot predict on an empty dataset")
    model.eval()
    preds = [np.argmax(model(pixels.astype(model.cfg.np_dtype)).data, axis=-1) for pixels, _ in dataset.batches(batch_size)]
    return np.concatenate(preds)


def evaluate(model: HeteroGraphNet, dataset: ImageDataset, batch_size: int = 64) -> float:
    """Top-1 accuracy with dropout disabled."""
    return accuracy(predict(model, dataset, batch_size), dataset.labels)


# --- Training loop ---


def _write_jsonl(path: Path, record: dict):
    try:
        with path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write metrics to {path}: {exc}") from exc


def train(
    model: HeteroGraphNet,
    train_set: ImageDataset,
    val_set: ImageDataset | None,
    optim_cfg: OptimConfig,
    output_dir: str | Path | None = None,
    run_config: RunConfig | None = None,
    metrics_name: str = METRICS_FILE,
    checkpoint_name: str | None = CHECKPOINT_FILE,
    config_name: str = CONFIG_FILE,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> list[EpochRecord]:
    """Run ``optim_cfg.epochs`` epochs and return one record per epoch.

    Shuffling and dropout masks come from one generator seeded with
    ``optim_cfg.seed``. With ``output_dir`` set, records are appended to
    ``metrics_name`` and the parameters with the best validation accuracy
    (train accuracy when there is no validation set) go to
    ``checkpoint_name``.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / metrics_name).write_text("")
        except OSError as exc:
            raise DataError(f"cannot prepare output directory {out}: {exc}") from exc
        if run_config is not None:
            save_run_config(run_config, out / config_name)

    steps_per_epoch = math.ceil(len(train_set) / optim_cfg.batch_size)
    state = OptimState.from_config(optim_cfg, optim_cfg.epochs * steps_per_epoch)
    rng = np.random.default_rng(optim_cfg.seed)
    params = model.active_named_parameters()
    dtype = model.cfg.np_dtype
    logger.info(
        "training %s: %d parameters (%.3f MB), %d steps/epoch, warm-up %d steps",
        model.cfg.ablation, model.parameter_count(), model.parameter_megabytes(), steps_per_epoch, state.warmup_steps,
    )

    history: list[EpochRecord] = []
    best = -1.0
    for epoch in range(1, optim_cfg.epochs + 1):
        model.train()
        loss_sum, correct, seen, lr = 0.0, 0, 0, state.lr
        for pixels, labels in train_set.batches(optim_cfg.batch_size, rng):
            model.zero_grad()
            with GradTape() as tape:
                logits = model(pixels.astype(dtype), training=True, rng=rng)
                loss = cross_entropy(logits, labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(f"loss became {loss_value} at epoch {epoch}, step {state.step}")
            tape.backward(loss)
            clip_grad_norm(params, optim_cfg.grad_clip)
            lr = state.lr
            adam_step(params, state, lr)
            if (a_bar := model.check_stability()) >= 1.0:
                raise NumericError(f"discretized state transition reached |A_bar| = {a_bar} at step {state.step}")
            loss_sum += loss_value * len(labels)
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == labels))
            seen += len(labels)

        val_acc = evaluate(model, val_set, optim_cfg.batch_size) if val_set is not None and len(val_set) else None
        record = EpochRecord(epoch=epoch, train_loss=loss_sum / seen, train_acc=correct / seen, val_acc=val_acc, lr=lr)
        history.append(record)
        logger.info(
            "epoch %d: loss %.4f train_acc %.3f val_acc %s lr %.3g",
            epoch, record.train_loss, record.train_acc, "n/a" if val_acc is None else f"{val_acc:.3f}", lr,
        )
        if out is not None:
            _write_jsonl(out / metrics_name, record.model_dump())
            score = val_acc if val_acc is not None else record.train_acc
            if checkpoint_name is not None and score > best:
                best = score
                save_checkpoint(out / checkpoint_name, model.state_dict())
        if on_epoch is not None:
            on_epoch(record)
    return history


# --- Experiment drivers ---


def _final_val(history: list[EpochRecord]) -> float:
    last = history[-1]
    return last.val_acc if last.val_acc is not None else last.train_acc


def run_ablation(
    run_cfg: RunConfig,
    train_set: ImageDataset,
    val_set: ImageDataset | None,
    presets: Sequence[str] = tuple(ABLATION_PRESETS),
    seeds: Sequence[int] = (0,),
    threads: int = 1,
) -> list[AblationRow]:
    """Train every preset for every seed; rows carry mean final accuracy and the delta against ``base``."""
    unknown = [p for p in presets if p not in ABLATION_PRESETS]
    if unknown:
        raise ConfigError(f"unknown ablation preset(s): {', '.join(unknown)}")
    out = Path(run_cfg.output_dir)
    means: dict[str, float] = {}
    for preset in presets:
        cfg = run_cfg.model.with_ablation(preset)
        scores = []
        for seed in seeds:
            tag = preset if len(seeds) == 1 else f"{preset}-s{seed}"
            model = HeteroGraphNet(cfg, seed=seed, threads=threads)
            history = train(
                model, train_set, val_set, run_cfg.optim.model_copy(update={"seed": seed}), out,
                run_config=run_cfg.model_copy(update={"model": cfg}),
                metrics_name=f"metrics-{tag}.jsonl", checkpoint_name=f"best-{tag}.hgfx",
                config_name=f"config-{tag}.json",
            )
            scores.append(_final_val(history))
        means[preset] = float(np.mean(scores))
        logger.info("ablation %s: mean accuracy %.3f over %d seed(s)", preset, means[preset], len(seeds))

    reference = means.get("base")
    rows = []
    for preset in presets:
        hg, scan, hgl = ABLATION_PRESETS[preset]
        rows.append(AblationRow(
            preset=preset, hetero_graph=hg, adaptive_scan=scan, hetero_learning=hgl,
            val_acc=means[preset], delta=0.0 if reference is None else means[preset] - reference,
        ))
    try:
        (out / "ablation.json").write_text(json.dumps([r.model_dump() for r in rows], indent=2) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write ablation table to {out}: {exc}") from exc
    return rows


def run_sweep(
    run_cfg: RunConfig,
    train_set: ImageDataset,
    val_set: ImageDataset | None,
    param: str,
    values: Sequence[float],
    seeds: Sequence[int] = (0,),
    threads: int = 1,
) -> list[SweepRecord]:
    """Train ``full`` and ``base`` at every value of one hyperparameter; appends to ``sweep-<param>.jsonl``."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose one of {', '.join(SWEEP_PARAMS)}")
    out = Path(run_cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"sweep-{param}.jsonl").write_text("")
    except OSError as exc:
        raise DataError(f"cannot prepare output directory {out}: {exc}") from exc

    records = []
    for value in values:
        typed = float(value) if param == "dropout" else int(value)
        try:
            base_cfg = ModelConfig.model_validate(run_cfg.model.model_dump() | {param: typed})
        except ValueError as exc:
            raise ConfigError(f"{param}={value}: {exc}") from exc
        for preset in ("full", "base"):
            cfg = base_cfg.with_ablation(preset)
            for seed in seeds:
                model = HeteroGraphNet(cfg, seed=seed, threads=threads)
                history = train(model, train_set, val_set, run_cfg.optim.model_copy(update={"seed": seed}))
                record = SweepRecord(param=param, value=float(typed), preset=preset, seed=seed, val_acc=_final_val(history))
                _write_jsonl(out / f"sweep-{param}.jsonl", record.model_dump())
                records.append(record)
                logger.info("sweep %s=%s %s seed %d: %.3f", param, typed, preset, seed, record.val_acc)
    return records
