"""Training loop, metrics and the ablation harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .data import Dataset, SplitSpec
from .model import (ModelConfig, Sample, collate, forward, init_params, save_checkpoint)

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """R^2 is undefined for constant targets."""


class TrainingError(RuntimeError):
    """Training hit a non-finite value."""

    def __init__(self, epoch: int, batch: int, op: str, message: str):
        self.epoch, self.batch, self.op = epoch, batch, op
        super().__init__(f"epoch {epoch}, batch {batch}, op {op}: {message}")


@dataclass
class TrainConfig:
    epochs: int = 128
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 1
    eval_batch_size: int = 100

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------

def mse_loss(pred: tg.Tensor, target: tg.Tensor) -> tg.Tensor:
    if pred.shape != target.shape:
        raise tg.ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = tg.sub(pred, target)
    return tg.mean(tg.mul(diff, diff))


def r2(preds, targets) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    y_hat = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"r2: {y_hat.shape} predictions vs {y.shape} targets")
    if y.size < 2:
        raise UndefinedMetricError("r2 needs at least two samples")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("r2 is undefined for constant targets")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


@dataclass
class MetricsReport:
    outcomes: list[str]
    r2: list[float]
    split: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.r2))

    @property
    def std(self) -> float:
        return float(np.std(self.r2))

    def to_dict(self) -> dict:
        return {"split": self.split, "r2": dict(zip(self.outcomes, self.r2)),
                "mean": self.mean, "std": self.std}

    def format(self) -> str:
        lines = [f"{name}: R2 = {v:.4f}" for name, v in zip(self.outcomes, self.r2)]
        lines.append(f"mean: {self.mean:.4f} +/- {self.std:.4f}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, tg.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update in place (decoupled weight decay)."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay:
            update = update + config.learning_rate * config.weight_decay * p.data
        p.data = p.data - update
    return state


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _targets(samples: Sequence[Sample], outcome: int | None) -> np.ndarray:
    t = np.stack([s.targets for s in samples])
    return t if outcome is None else t[:, [outcome]]


def predict_samples(samples: Sequence[Sample], config: ModelConfig, params, batch_size: int = 100) -> np.ndarray:
    out = [forward(collate(samples[i:i + batch_size]), config, params)[0].data
           for i in range(0, len(samples), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(samples: Sequence[Sample], config: ModelConfig, params, outcome_names: Sequence[str],
             outcome: int | None = None, split_name: str = "", batch_size: int = 100) -> MetricsReport:
    preds = predict_samples(samples, config, params, batch_size)
    targets = _targets(samples, outcome)
    names = list(outcome_names) if outcome is None else [outcome_names[outcome]]
    return MetricsReport(names, [r2(preds[:, j], targets[:, j]) for j in range(targets.shape[1])], split_name)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    config: ModelConfig
    params: dict[str, tg.Tensor]
    history: list[dict]
    best_epoch: int
    metrics: dict[str, MetricsReport]
    outcome_names: list[str]


def train(dataset: Dataset, split: SplitSpec, model_config: ModelConfig, train_config: TrainConfig,
          outcome: int | None = None, out_dir: str | Path | None = None) -> TrainResult:
    """Fit ``model_config`` on the train split, keep the best mean-validation-R^2 parameters.

    ``outcome`` restricts training to a single outcome column. With ``out_dir``
    the best checkpoint and the JSON-lines history are written there.
    """
    train_s = dataset.subset(split.ids("train"))
    val_s = dataset.subset(split.ids("val"))
    test_s = dataset.subset(split.ids("test"))
    if not train_s:
        raise ValueError("train split is empty")
    names = list(dataset.outcome_names) if outcome is None else [dataset.outcome_names[outcome]]
    y_train = _targets(train_s, outcome)
    config = replace(model_config, n_outcomes=len(names),
                     target_shift=y_train.mean(axis=0).tolist(),
                     target_scale=np.maximum(y_train.std(axis=0), 1.0).tolist())
    params = init_params(config, train_config.seed)
    state = AdamState()
    rng = np.random.default_rng(train_config.seed)
    history: list[dict] = []
    best = (-math.inf, 0, {k: v.data.copy() for k, v in params.items()})
    bs = train_config.batch_size

    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_s))
        losses = []
        for b, start in enumerate(range(0, len(order), bs)):
            batch = collate([train_s[i] for i in order[start:start + bs]])
            try:
                pred, _ = forward(batch, config, params)
                loss = mse_loss(pred, tg.Tensor(_targets_batch(batch, outcome)))
            except tg.NumericalError as exc:
                raise TrainingError(epoch, b, exc.op, str(exc)) from exc
            for p in params.values():
                p.grad = None
            tg.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, train_config)
            bad = [k for k, p in params.items() if not np.isfinite(p.data).all()]
            if bad:
                raise TrainingError(epoch, b, "adam_step", f"non-finite parameters {bad[:3]}")
            losses.append(loss.item())
        # wall time goes to the log only, so history files stay reproducible
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if epoch % train_config.eval_every == 0 or epoch == train_config.epochs:
            if len(val_s) >= 2:
                val = evaluate(val_s, config, params, dataset.outcome_names, outcome, "val",
                               train_config.eval_batch_size)
                record["val"] = val.to_dict()
                if val.mean > best[0]:
                    best = (val.mean, epoch, {k: v.data.copy() for k, v in params.items()})
            else:
                best = (-math.inf, epoch, {k: v.data.copy() for k, v in params.items()})
        history.append(record)
        logger.info("epoch %d loss %.4f%s (%.1fs)", epoch, record["train_loss"],
                    f" val R2 {record['val']['mean']:.4f}" if "val" in record else "",
                    time.perf_counter() - t0)

    best_epoch = best[1]
    for k, arr in best[2].items():
        params[k] = tg.Tensor(arr, requires_grad=True)
    metrics = {}
    for split_name, samples in (("train", train_s), ("val", val_s), ("test", test_s)):
        if len(samples) >= 2:
            metrics[split_name] = evaluate(samples, config, params, dataset.outcome_names, outcome,
                                           split_name, train_config.eval_batch_size)
    result = TrainResult(config, params, history, best_epoch, metrics, names)
    if out_dir is not None:
        write_run(result, split, train_config, outcome, Path(out_dir))
    return result


def _targets_batch(batch, outcome: int | None) -> np.ndarray:
    return batch.targets if outcome is None else batch.targets[:, [outcome]]


def write_run(result: TrainResult, split: SplitSpec, train_config: TrainConfig,
              outcome: int | None, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = {"outcome_names": result.outcome_names, "outcome_index": outcome,
             "best_epoch": result.best_epoch, "train_config": asdict(train_config),
             "split": split.to_dict(), "metrics": {k: m.to_dict() for k, m in result.metrics.items()}}
    save_checkpoint(out_dir / "checkpoint.npz", result.config, result.params, extra)
    with open(out_dir / "history.jsonl", "w") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec) + "\n")
    (out_dir / "metrics.json").write_text(json.dumps(extra["metrics"], indent=1))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationSetting:
    name: str
    overrides: dict
    outcomes: list[str] | None = None  # None: every outcome


def default_settings(category_names: Sequence[str], restricted: Sequence[str] | None = None) -> list[AblationSetting]:
    keep = list(restricted) if restricted else [category_names[0]]
    return [
        AblationSetting("GCGVT-A", {"variant": "A"}),
        AblationSetting("GCGVT-G", {"variant": "G"}),
        AblationSetting("GCGVT-L", {"variant": "L"}),
        AblationSetting("ViT", {"variant": "vit"}),
        AblationSetting("Geo only", {"variant": "A", "zero_image": True}),
        AblationSetting(f"GCGVT-A [{'+'.join(keep)}]", {"variant": "A", "active_categories": keep}),
    ]


@dataclass
class AblationTable:
    outcome_names: list[str]
    # setting name -> outcome name -> per-seed test R^2
    scores: dict[str, dict[str, list[float]]]

    def cell(self, setting: str, outcome: str) -> tuple[float, float]:
        vals = self.scores[setting][outcome]
        return float(np.mean(vals)), float(np.std(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting"] + [f"{o}_{s}" for o in self.outcome_names for s in ("mean", "std")])
        for setting, per in self.scores.items():
            row = [setting]
            for o in self.outcome_names:
                if o in per:
                    m, s = self.cell(setting, o)
                    row += [f"{m:.6f}", f"{s:.6f}"]
                else:
                    row += ["", ""]
            w.writerow(row)
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| setting | " + " | ".join(self.outcome_names) + " |",
                 "|---|" + "---|" * len(self.outcome_names)]
        for setting, per in self.scores.items():
            cells = []
            for o in self.outcome_names:
                if o in per:
                    m, s = self.cell(setting, o)
                    cells.append(f"{m:.2f} ± {s:.2f}")
                else:
                    cells.append("n/a")
            lines.append(f"| {setting} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def ablation_suite(dataset: Dataset, split: SplitSpec, base_config: ModelConfig,
                   train_config: TrainConfig, seeds: Sequence[int] = (0, 1, 2),
                   settings: Sequence[AblationSetting] | None = None,
                   single_outcome: bool = True, out_dir: str | Path | None = None) -> AblationTable:
    """Test R^2 (per seed) for each setting and outcome.

    With ``single_outcome`` every (setting, outcome, seed) gets its own model;
    otherwise one multi-outcome model per (setting, seed).
    """
    settings = list(settings) if settings is not None else default_settings(base_config.category_names)
    names = list(dataset.outcome_names)
    scores: dict[str, dict[str, list[float]]] = {}
    for setting in settings:
        wanted = setting.outcomes or names
        per: dict[str, list[float]] = {o: [] for o in wanted}
        cfg = replace(base_config, **setting.overrides)
        for seed in seeds:
            tc = replace(train_config, seed=seed)
            mc = replace(cfg, seed=seed)
            if single_outcome:
                for o in wanted:
                    res = train(dataset, split, mc, tc, outcome=names.index(o))
                    per[o].append(res.metrics["test"].r2[0])
                    logger.info("%s / %s / seed %d: test R2 %.4f", setting.name, o, seed, per[o][-1])
            else:
                res = train(dataset, split, mc, tc)
                for o in wanted:
                    per[o].append(res.metrics["test"].r2[names.index(o)])
        scores[setting.name] = per
    table = AblationTable(names, scores)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(table.to_csv())
        (out / "ablation.md").write_text(table.to_markdown())
    return table
