"""Training loop, early stopping, checkpointing, and the paired
consistency-ablation harness.

Each training step runs both decoders on the same batch through the
shared encoder and minimizes ``supervised + alpha * consistency`` with
Adam; when consistency is disabled, the step reduces exactly to the
supervised-only objective (the auxiliary branch is not even evaluated, so
parameter trajectories are bit-identical to a plain supervised loop given
the same seed and data order). Validation computes the supervised loss
only and never mutates parameters or normalization buffers.
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .backbone import BackboneConfig
from .data import augment, preprocess, sample_rng, split_corpus
from .decoders import ModelConfig, PlutoNet, count_parameters
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .losses import LossConfig, consistency_loss, supervised_loss, total_loss
from .metrics import MetricsReport, confusion, dice, evaluate
from .optim import Adam

log = logging.getLogger(__name__)

MIN_IMPROVEMENT = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 30
    batch_size: int = 8
    early_stop_patience: int = 5
    early_stopping_enabled: bool = True
    consistency_enabled: bool = True
    validate_with_consistency: bool = False
    seed: int = 17
    checkpoint_dir: Optional[str] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochRecord:
    epoch: int
    train_l_s: float
    train_l_c: float
    train_total: float
    val_total: float
    val_dice: float
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    def to_dict(self):
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            epochs=[EpochRecord(**e) for e in payload["epochs"]],
            best_epoch=payload["best_epoch"],
            stop_reason=payload["stop_reason"],
        )


def early_stop_check(history, patience, min_improvement=MIN_IMPROVEMENT):
    """True when the best validation total has not improved (by more than
    min_improvement) for `patience` consecutive epochs."""
    values = [e.val_total for e in history.epochs] if isinstance(history, TrainHistory) else list(history)
    best = np.inf
    last_improvement = -1
    for idx, v in enumerate(values):
        if v < best - min_improvement:
            best = v
            last_improvement = idx
    return len(values) - 1 - last_improvement >= patience


def preload_pairs(samples, standardize=False):
    """Decode and resize a split once; training re-augments per epoch."""
    return [(s.id, *preprocess(s, standardize=standardize)) for s in samples]


def epoch_batches(pairs, cfg, epoch, augment_cfg=None):
    """Deterministic shuffled minibatches with per-sample augmentation
    streams keyed by (seed, epoch, sample id)."""
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
    for start in range(0, len(pairs), cfg.batch_size):
        chunk = [pairs[i] for i in order[start : start + cfg.batch_size]]
        images, masks = [], []
        for sid, image, mask in chunk:
            if augment_cfg is not None:
                image, mask = augment((image, mask), augment_cfg, sample_rng(cfg.seed, epoch, sid))
            images.append(image)
            masks.append(mask)
        yield np.stack(images), np.stack(masks)


def _validation_metrics(model, val_pairs, cfg, eval_threshold):
    """Supervised loss pooled over the whole split, plus mean dice."""
    overlap = energy = 0.0
    aux_overlap = aux_energy = 0.0
    dices = []
    with ag.no_grad():
        for start in range(0, len(val_pairs), cfg.batch_size):
            chunk = val_pairs[start : start + cfg.batch_size]
            images = np.stack([p[0] for p in chunk])
            gts = np.stack([p[1] for p in chunk])
            main, aux = model.forward(
                images, training=False, with_aux=cfg.validate_with_consistency
            )
            pm = main.data
            overlap += float((pm * gts).sum())
            energy += float((pm * pm).sum() + (gts * gts).sum())
            if aux is not None:
                pa = aux.data
                aux_overlap += float((pm * pa).sum())
                aux_energy += float((pm * pm).sum() + (pa * pa).sum())
            for i in range(len(chunk)):
                dices.append(dice(confusion(pm[i], gts[i], eval_threshold)))
    val_total = 2.0 * (1.0 - overlap / (energy + cfg.loss.epsilon))
    if cfg.validate_with_consistency:
        val_total += cfg.loss.alpha * 2.0 * (1.0 - aux_overlap / (aux_energy + cfg.loss.epsilon))
    return float(val_total), float(np.mean(dices))


def train(
    model,
    train_split,
    val_split,
    cfg,
    augment_cfg=None,
    eval_threshold=0.5,
    standardize=False,
    on_step=None,
    run_config_payload=None,
):
    """Run the full protocol: Adam, per-epoch validation, best-checkpoint
    retention, early stopping within the epoch budget.

    Returns (model, TrainHistory). On a non-finite loss the last written
    checkpoints are preserved, the history records the abort, and
    NumericError propagates to the caller.
    """
    if not train_split or not val_split:
        raise DataError("train/val splits must be nonempty")
    train_pairs = (
        train_split if _is_preloaded(train_split) else preload_pairs(train_split, standardize)
    )
    val_pairs = (
        [p[1:] for p in val_split]
        if _is_preloaded(val_split)
        else [preprocess(s, standardize=standardize) for s in val_split]
    )
    optimizer = Adam(
        model.parameters(), lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
    )
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    step_log = epoch_log = None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        step_log = open(ckpt_dir / "steps.jsonl", "w")
        epoch_log = open(ckpt_dir / "epochs.jsonl", "w")

    history = TrainHistory()
    best_val = np.inf
    step = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            tic = time.perf_counter()
            sums = np.zeros(3)
            n_steps = 0
            for images, gts in epoch_batches(train_pairs, cfg, epoch, augment_cfg):
                p_m, p_a = model.forward(images, training=True, with_aux=cfg.consistency_enabled)
                l_s = supervised_loss(p_m, gts, cfg.loss)
                l_c = consistency_loss(p_m, p_a, cfg.loss) if cfg.consistency_enabled else None
                bundle = total_loss(l_s, l_c, cfg.loss)
                optimizer.zero_grad()
                bundle.total.backward()
                optimizer.step()
                step += 1
                n_steps += 1
                ls_v, lc_v, tot_v = bundle.as_floats()
                sums += (ls_v, lc_v, tot_v)
                if step_log is not None:
                    step_log.write(
                        json.dumps({"step": step, "l_s": ls_v, "l_c": lc_v, "total": tot_v}) + "\n"
                    )
                if on_step is not None:
                    on_step(step, model, bundle)
            val_total, val_dice = _validation_metrics(model, val_pairs, cfg, eval_threshold)
            record = EpochRecord(
                epoch=epoch,
                train_l_s=sums[0] / n_steps,
                train_l_c=sums[1] / n_steps,
                train_total=sums[2] / n_steps,
                val_total=val_total,
                val_dice=val_dice,
                wall_time=time.perf_counter() - tic,
            )
            history.epochs.append(record)
            if epoch_log is not None:
                payload = asdict(record)
                payload.pop("wall_time")
                epoch_log.write(json.dumps(payload) + "\n")
            log.info(
                "epoch %d: train %.4f  val %.4f  val_dice %.4f",
                epoch, record.train_total, val_total, val_dice,
            )
            if val_total < best_val - MIN_IMPROVEMENT:
                best_val = val_total
                history.best_epoch = epoch
                if ckpt_dir is not None:
                    save_checkpoint(
                        model, history, ckpt_dir / "best",
                        epoch=epoch, val_loss=val_total, val_dice=val_dice,
                        run_config_payload=run_config_payload,
                    )
            if ckpt_dir is not None:
                save_checkpoint(
                    model, history, ckpt_dir / "last",
                    epoch=epoch, val_loss=val_total, val_dice=val_dice,
                    run_config_payload=run_config_payload,
                )
            if cfg.early_stopping_enabled and early_stop_check(history, cfg.early_stop_patience):
                history.stop_reason = "early_stopping"
                break
        if not history.stop_reason:
            history.stop_reason = "max_epochs"
    except NumericError:
        history.stop_reason = "aborted_non_finite"
        if ckpt_dir is not None:
            _write_history(history, ckpt_dir)
        raise
    finally:
        if step_log is not None:
            step_log.close()
        if epoch_log is not None:
            epoch_log.close()
    if ckpt_dir is not None:
        _write_history(history, ckpt_dir)
    return model, history


def _is_preloaded(split):
    return bool(split) and isinstance(split[0], tuple)


def _write_history(history, ckpt_dir):
    with open(Path(ckpt_dir) / "history.json", "w") as fh:
        json.dump(history.to_dict(), fh, indent=2, sort_keys=True)


# -- checkpointing --------------------------------------------------------


def _model_config_payload(model):
    return {
        "backbone": asdict(model.backbone_cfg),
        "model": asdict(model.model_cfg),
        "seed": model.init_seed,
    }


def config_hash(payload):
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def save_checkpoint(
    model, history, path, epoch=None, val_loss=None, val_dice=None, run_config_payload=None
):
    """Write model.npz plus a human-readable manifest into `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {k.replace("buffer:", "buf__"): v for k, v in model.state_dict().items()}
    np.savez(path / "model.npz", **arrays)
    payload = _model_config_payload(model)
    manifest = {
        "model_config": payload,
        "config_hash": config_hash(payload),
        "param_counts": count_parameters(model),
        "epoch": epoch,
        "val_loss": val_loss,
        "val_dice": val_dice,
        "best_epoch": history.best_epoch if history is not None else None,
        "run_config": run_config_payload,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path, expected_config_hash=None):
    """Rebuild the model recorded at `path`; returns (model, manifest)."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    model_path = path / "model.npz"
    if not manifest_path.exists() or not model_path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    payload = manifest["model_config"]
    actual_hash = config_hash(payload)
    if actual_hash != manifest.get("config_hash"):
        raise CheckpointError(f"manifest at {path} is corrupt: config hash mismatch")
    if expected_config_hash is not None and actual_hash != expected_config_hash:
        raise CheckpointError(
            f"checkpoint at {path} was built from a different config "
            f"(hash {actual_hash[:12]} != expected {expected_config_hash[:12]})"
        )
    model = PlutoNet(
        backbone_cfg=BackboneConfig(**payload["backbone"]),
        model_cfg=ModelConfig(**payload["model"]),
        seed=payload["seed"],
    )
    with np.load(model_path) as data:
        state = {k.replace("buf__", "buffer:"): data[k] for k in data.files}
    model.load_state_dict(state)
    if payload["backbone"].get("freeze"):
        model.backbone.requires_grad_(False)
    return model, manifest


# -- ablation harness ------------------------------------------------------

ABLATION_ARMS = (("no_consistency", "No Consistency"), ("with_consistency", "With Consistency"))


def run_ablation(
    samples,
    split_spec,
    backbone_cfg,
    model_cfg,
    train_cfg,
    augment_cfg=None,
    eval_threshold=0.5,
    standardize=False,
    output_dir=None,
    dataset_label="synthetic",
    model_seed=None,
):
    """Train the two consistency arms from identical seeds and data order,
    evaluate both on the held-out test split, and return the paired report
    plus per-arm histories."""
    train_split, val_split, test_split = split_corpus(samples, split_spec)
    test_pairs = [preprocess(s, standardize=standardize) for s in test_split]
    out_root = Path(output_dir) if output_dir else None
    rows = []
    histories = {}
    seed = train_cfg.seed if model_seed is None else model_seed
    for arm_key, arm_label in ABLATION_ARMS:
        arm_dir = (out_root / arm_key) if out_root else None
        cfg = replace(
            train_cfg,
            consistency_enabled=(arm_key == "with_consistency"),
            checkpoint_dir=str(arm_dir) if arm_dir else None,
        )
        model = PlutoNet(backbone_cfg=backbone_cfg, model_cfg=model_cfg, seed=seed)
        model, history = train(
            model, train_split, val_split, cfg, augment_cfg,
            eval_threshold=eval_threshold, standardize=standardize,
        )
        histories[arm_key] = history
        if arm_dir is not None and (arm_dir / "best" / "model.npz").exists():
            model, _ = load_checkpoint(arm_dir / "best")
        report = evaluate(
            model,
            test_pairs,
            threshold=eval_threshold,
            label=f"{dataset_label} {arm_label}",
            batch_size=cfg.batch_size,
        )
        rows.extend(report.rows)
    paired = MetricsReport(rows=rows, threshold=eval_threshold, aggregation="both")
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)
        with open(out_root / "ablation_report.json", "w") as fh:
            fh.write(paired.to_json())
        with open(out_root / "ablation_report.txt", "w") as fh:
            fh.write(paired.to_text())
    return paired, histories
