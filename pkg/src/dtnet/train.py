"""Loss, optimizer, training loop and the threshold/ablation harnesses."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dtnet import metrics, model as model_mod
from dtnet.dataio import dataset_digest
from dtnet.mdic import ThresholdSpec
from dtnet.model import DtNetConfig, Model, build, count_params
from dtnet.tensor import Tape, Tensor, as_tensor, record

log = logging.getLogger(__name__)

Dataset = tuple[np.ndarray, np.ndarray]  # images (N, C, S, S) float32, masks (N, S, S) uint8


# ---------------------------------------------------------------------------
# loss


def softmax_xent(logits, truth) -> Tensor:
    """Mean pixel cross-entropy of softmax(logits) against integer labels.

    ``logits`` is (N, C, H, W), ``truth`` is (N, H, W) with labels in [0, C).
    """
    logits = as_tensor(logits)
    truth = np.asarray(truth)
    n, c, h, w = logits.shape
    if truth.shape != (n, h, w):
        raise ValueError(f"labels must have shape {(n, h, w)}, got {truth.shape}")
    if truth.size and (truth.min() < 0 or truth.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    lab = truth.astype(np.int64)[:, None]
    picked = np.take_along_axis(z, lab, axis=1)
    count = n * h * w
    loss = (np.log(s) - picked).sum() / count

    def backward(g):
        grad = e / s
        np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=1) - 1, axis=1)
        return ((g / count) * grad,)

    return record(Tensor(np.asarray(loss, dtype=logits.dtype)), (logits,), backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> None:
    """One bias-corrected Adam update; parameters get fresh arrays, old ones are left intact."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {params[i].shape}")
        if not np.isfinite(g).all():
            label = names[i] if names else f"#{i}"
            raise FloatingPointError(f"non-finite gradient for parameter {label}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.m[i] + (1 - b1) * g
        v = b2 * state.v[i] + (1 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_dice: float
    test_loss: float
    test_dice: float
    test_summary: metrics.Summary | None = field(default=None, repr=False, compare=False)


@dataclass
class TrainRun:
    config: DtNetConfig
    seed: int
    epochs: int
    batch_size: int
    lr: float
    train_digest: str
    test_digest: str
    records: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    params_digest: str = ""

    def curve_rows(self) -> list[tuple[int, str, float, float]]:
        rows = []
        for r in self.records:
            rows.append((r.epoch, "train", r.train_loss, r.train_dice))
            rows.append((r.epoch, "test", r.test_loss, r.test_dice))
        return rows


@dataclass
class EvalResult:
    loss: float
    summary: metrics.Summary
    predictions: np.ndarray
    mode: str = "infer"


def evaluate(
    model: Model,
    data: Dataset,
    batch_size: int = 8,
    regions: Sequence[metrics.RegionSpec] = (),
) -> EvalResult:
    """Loss and scores with batch normalization in inference mode."""
    images, masks = data
    total, preds = 0.0, []
    for i in range(0, len(images), batch_size):
        logits = model.forward(images[i : i + batch_size], "infer")
        total += float(softmax_xent(logits, masks[i : i + batch_size]).data) * len(logits.data)
        preds.append(logits.data.argmax(axis=1).astype(np.uint8))
    pred = np.concatenate(preds)
    summary = metrics.evaluate_labels(pred, masks, model.config.num_classes, regions)
    return EvalResult(total / len(images), summary, pred)


def _check_data(config: DtNetConfig, data: Dataset, name: str) -> None:
    images, masks = data
    want = (config.input_channels, config.input_size, config.input_size)
    if len(images) == 0:
        raise ValueError(f"{name} set is empty")
    if images.shape[1:] != want:
        raise ValueError(f"{name} images have shape {images.shape[1:]}, model expects {want}")
    if masks.shape != (len(images), *want[1:]):
        raise ValueError(f"{name} masks have shape {masks.shape}")
    if masks.max() >= config.num_classes:
        raise ValueError(f"{name} masks contain label {masks.max()} >= num_classes")


def train(
    model: Model,
    train_set: Dataset,
    test_set: Dataset,
    epochs: int,
    batch_size: int = 4,
    seed: int = 0,
    lr: float = 1e-3,
    out_dir=None,
    checkpoint_every: int = 0,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainRun:
    """Seeded minibatch Adam on softmax cross-entropy.

    Each epoch shuffles with ``default_rng([seed, epoch])``, trains with batch
    normalization in train mode, then evaluates the test split in infer mode.
    Train-split loss and Dice come from the training forward passes. With
    ``out_dir`` and ``checkpoint_every > 0`` the model is archived under
    ``out_dir/checkpoints/epoch_NNN``.
    """
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    _check_data(model.config, train_set, "train")
    _check_data(model.config, test_set, "test")
    images, masks = train_set
    names = [n for n, _ in model.store.trainable()]
    params = [t for _, t in model.store.trainable()]
    state = AdamState.zeros_like(params, lr=lr)
    k = model.config.num_classes
    run = TrainRun(
        model.config,
        seed,
        epochs,
        batch_size,
        lr,
        dataset_digest(*train_set),
        dataset_digest(*test_set),
    )
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(images))
        loss_sum = 0.0
        train_counts = []
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            with Tape() as tape:
                tape.watch(params)
                logits = model.forward(images[idx], "train")
                loss = softmax_xent(logits, masks[idx])
            grads = tape.gradient(loss, params)
            adam_step(params, grads, state, names)
            loss_sum += float(loss.data) * len(idx)
            pred = logits.data.argmax(axis=1)
            train_counts += [
                metrics.counts_from_matrix(metrics.confusion_matrix(p, t, k))
                for p, t in zip(pred, masks[idx])
            ]
        train_summary = metrics.aggregate(train_counts)
        result = evaluate(model, test_set)
        if result.mode != "infer":
            raise AssertionError("evaluation must run with inference-mode batch normalization")
        rec = EpochRecord(
            epoch,
            loss_sum / len(images),
            train_summary.mean_foreground(),
            result.loss,
            result.summary.mean_foreground(),
            result.summary,
        )
        run.records.append(rec)
        log.info(
            "epoch %d: train loss %.4f dice %.4f | test loss %.4f dice %.4f",
            epoch, rec.train_loss, rec.train_dice, rec.test_loss, rec.test_dice,
        )
        if on_epoch:
            on_epoch(rec)
        if out_dir is not None and checkpoint_every and epoch % checkpoint_every == 0:
            model_mod.save(model, Path(out_dir) / "checkpoints" / f"epoch_{epoch:03d}")
    run.wall_time = time.perf_counter() - start
    run.params_digest = model.store.digest()
    return run


# ---------------------------------------------------------------------------
# report files


def write_curves(run: TrainRun, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "mean_dice"])
        for epoch, split, loss, d in run.curve_rows():
            w.writerow([epoch, split, f"{loss:.8f}", f"{d:.8f}"])


def read_curves(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        r["loss"] = float(r["loss"])
        r["mean_dice"] = float(r["mean_dice"])
    return rows


def write_kv(path, pairs: Sequence[tuple[str, object]]) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in pairs), encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def run_manifest_pairs(run: TrainRun) -> list[tuple[str, object]]:
    return [
        ("seed", run.seed),
        ("epochs", run.epochs),
        ("batch_size", run.batch_size),
        ("lr", repr(run.lr)),
        ("config_digest", run.config.digest()),
        ("train_digest", run.train_digest),
        ("test_digest", run.test_digest),
        ("params_digest", run.params_digest),
        ("wall_time", f"{run.wall_time:.3f}"),
        *((f"config.{k}", v) for k, v in run.config.to_pairs()),
    ]


# ---------------------------------------------------------------------------
# harnesses


def threshold_label(t: float | None, variant: str) -> str:
    return "off" if t is None else f"T{t:g}-{variant}"


@dataclass
class HarnessEntry:
    label: str
    config: DtNetConfig
    params: int
    run: TrainRun

    @property
    def final(self) -> EpochRecord:
        return self.run.records[-1]


def _run_variant(label, config, train_set, test_set, epochs, batch_size, seed, lr, out_dir):
    m = build(config, seed)
    run = train(m, train_set, test_set, epochs, batch_size, seed, lr)
    entry = HarnessEntry(label, config, count_params(m).total, run)
    if out_dir is not None:
        write_curves(run, Path(out_dir) / f"curves_{label}.csv")
    return entry


def threshold_sweep(
    base_config: DtNetConfig,
    thresholds: Sequence[float | None],
    train_set: Dataset,
    test_set: Dataset,
    epochs: int,
    batch_size: int = 4,
    seed: int = 0,
    lr: float = 1e-3,
    variants: Sequence[str] = ("epsilon",),
    out_dir=None,
) -> list[HarnessEntry]:
    """One seeded run per threshold and variant; ``None`` removes the threshold layer."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    for t in thresholds:
        if t is None:
            combos = [(None, base_config.threshold.variant)]
        else:
            combos = [(t, v) for v in variants]
        for value, variant in combos:
            if value is None:
                cfg = replace(base_config, disable_threshold=True)
            else:
                spec = ThresholdSpec(value, variant, base_config.threshold.epsilon)
                cfg = replace(base_config, threshold=spec, disable_threshold=False)
            label = threshold_label(value, variant)
            log.info("threshold sweep: %s", label)
            entries.append(
                _run_variant(label, cfg, train_set, test_set, epochs, batch_size, seed, lr, out_dir)
            )
    if out_dir is not None:
        write_harness_table(entries, Path(out_dir) / "sweep.csv")
    return entries


ABLATIONS = {
    "DT-Net": {},
    "DT-Net-no-1": {"disable_mdic": True},
    "DT-Net-no-2": {"disable_threshold": True},
    "DT-Net-no-3": {"disable_skip": True},
    "DT-Net-no-1-2": {"disable_mdic": True, "disable_threshold": True},
    "DT-Net-*": {"hard": True},
}


def variant_config(base: DtNetConfig, name: str) -> DtNetConfig:
    flags = dict(ABLATIONS[name])
    cfg = replace(base, disable_mdic=False, disable_threshold=False, disable_skip=False)
    if flags.pop("hard", False):
        cfg = replace(cfg, threshold=replace(cfg.threshold, variant="hard"))
    return replace(cfg, **flags)


def ablation_suite(
    base_config: DtNetConfig,
    train_set: Dataset,
    test_set: Dataset,
    epochs: int,
    batch_size: int = 4,
    seed: int = 0,
    lr: float = 1e-3,
    names: Sequence[str] = tuple(ABLATIONS),
    out_dir=None,
) -> list[HarnessEntry]:
    """Train each strategy variant with a shared seed."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    for name in names:
        log.info("ablation: %s", name)
        cfg = variant_config(base_config, name)
        entries.append(_run_variant(name, cfg, train_set, test_set, epochs, batch_size, seed, lr, out_dir))
    if out_dir is not None:
        write_harness_table(entries, Path(out_dir) / "ablation.csv")
    return entries


def write_harness_table(entries: Sequence[HarnessEntry], path) -> None:
    k = entries[0].config.num_classes if entries else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["variant", "params", "threshold", "threshold_variant", "final_train_loss",
             "final_test_loss", "final_test_dice", "best_test_dice"]
            + [f"dice_class{c}" for c in range(1, k)]
        )
        for e in entries:
            th = e.config.effective_threshold
            summary = e.final.test_summary
            per_class = summary.macro["dice"][1:] if summary else []
            w.writerow(
                [e.label, e.params, "-" if th is None else f"{th.T:g}",
                 "-" if th is None else th.variant, f"{e.final.train_loss:.6f}",
                 f"{e.final.test_loss:.6f}", f"{e.final.test_dice:.6f}",
                 f"{max(r.test_dice for r in e.run.records):.6f}"]
                + [f"{d:.6f}" for d in per_class]
            )
