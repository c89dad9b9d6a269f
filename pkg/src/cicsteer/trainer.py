"""Training loop: balanced batches -> branched forward -> loss -> Adam.

The loss is applied to the command-selected output row of each sample. With a
co-learning head the selected row is a mix of all branches, so every branch
receives gradient from every sample; with the head disabled only the selected
branch (and the shared trunk) updates.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe, losses, numerics as nm
from .netarch import (ArchitectureConfig, CMD_INDEX, COMMANDS, DEFAULT_R,
                      Model, N_BRANCHES, decode_output)
from .numerics import AdamState, Tensor, adam_step
from .seeding import substream

LOSSES = ("mse", "cce", "hybrid", "coexist", "sine")
VAL_CAP = 6000  # max rows scored per validation pass
_OUTPUT_MODE = {"mse": "regression", "cce": "classification",
                "hybrid": "classification", "coexist": "classification",
                "sine": "sine"}


class TrainError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    data_root: str = "dataset"
    out_dir: str = "runs/run0"
    loss: str = "mse"
    weight: float = 0.0         # hybrid/coexist W; ignored otherwise
    head: str = "none"          # none | manual | gtu
    relationship: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())
    decode: str = "expected"    # classification decode at drive time
    epochs: int = 40
    batch_size: int = 120
    seed: int = 0
    data_seed: int = 0          # seed the dataset's town was built with
    grad_clip: float = 10.0
    augment: bool = True
    arch: ArchitectureConfig | None = None   # override (tests / experiments)

    def architecture(self) -> ArchitectureConfig:
        if self.loss not in LOSSES:
            raise TrainError(f"unknown loss {self.loss!r}, expected one of {LOSSES}")
        base = self.arch or ArchitectureConfig()
        return ArchitectureConfig(image_shape=base.image_shape,
                                  channels=base.channels,
                                  conv_spec=base.conv_spec,
                                  feature_width=base.feature_width,
                                  branch_hidden=base.branch_hidden,
                                  output_mode=_OUTPUT_MODE[self.loss],
                                  head_mode=self.head,
                                  relationship=self.relationship,
                                  decode=self.decode)


@dataclass
class TrainReport:
    epochs: list
    best_checkpoint: str
    wall_time: float


def selected_output(model: Model, tensors: dict, images: np.ndarray,
                    commands: list[str]) -> Tensor:
    """Forward pass reduced to the command-selected output row per sample."""
    out = model.forward(images, tensors)
    masks = np.zeros((len(commands), N_BRANCHES))
    for i, c in enumerate(commands):
        masks[i, CMD_INDEX[c]] = 1.0
    selected = None
    for b in range(N_BRANCHES):
        term = nm.multiply(Tensor(masks[:, b:b + 1]), out["mixed"][b])
        selected = term if selected is None else nm.add(selected, term)
    return selected


def batch_loss(model: Model, tensors: dict, images: np.ndarray,
               commands: list[str], steering: np.ndarray,
               config: ExperimentConfig) -> Tensor:
    """Graph loss of one batch on the command-selected output rows."""
    return selected_loss(selected_output(model, tensors, images, commands),
                         steering, config)


def selected_loss(selected: Tensor, steering: np.ndarray,
                  config: ExperimentConfig) -> Tensor:
    if config.loss == "mse":
        return losses.mse_loss(selected, steering)
    if config.loss == "sine":
        target = np.stack([losses.sine_encode(y) for y in steering])
        return losses.sine_loss(selected, target)
    scores = nm.softmax(selected)
    if config.loss == "cce":
        classes = [losses.discretize(y) for y in steering]
        return losses.cce_loss(scores, losses.one_hot(classes))
    if config.loss == "hybrid":
        return losses.hybrid_loss(scores, steering, config.weight)
    if config.loss == "coexist":
        classes = [losses.discretize(y) for y in steering]
        mu = losses.coexistence_matrix()
        return losses.coexistence_loss(scores, losses.one_hot(classes),
                                       mu, config.weight)
    raise TrainError(f"unknown loss {config.loss!r}")


def _assemble(rows: list[dict], cache: datapipe.SampleCache,
              config: ExperimentConfig, epoch: int | None) -> tuple:
    imgs = []
    for row in rows:
        img = cache.get(row)
        if epoch is not None and config.augment:
            rng = substream(config.seed, "augment", f"e{epoch}",
                            f"{row['episode']}:{row['frame']}:{row['cam']}")
            img = datapipe.augment(img, rng)
        imgs.append(img)
    images = np.stack(imgs)[:, None, :, :]
    commands = [r["command"] for r in rows]
    steering = np.array([r["steering"] for r in rows])
    return images, commands, steering


def validate(model: Model, val_rows: list[dict], cache: datapipe.SampleCache,
             config: ExperimentConfig, chunk: int = 240) -> dict:
    """Offline metrics on the validation split: loss, MAE, per-command MAE."""
    total_loss = 0.0
    n_chunks = 0
    abs_err: dict[str, list] = {c: [] for c in COMMANDS}
    for start in range(0, len(val_rows), chunk):
        rows = val_rows[start:start + chunk]
        images, commands, steering = _assemble(rows, cache, config, epoch=None)
        selected = selected_output(model, model.bind(), images, commands)
        loss = selected_loss(selected, steering, config)
        total_loss += loss.item()
        n_chunks += 1
        for i, c in enumerate(commands):
            pred = decode_output(selected.data[i], model.config)
            abs_err[c].append(abs(pred - steering[i]))
    per_command = {c: float(np.mean(v)) if v else float("nan")
                   for c, v in abs_err.items()}
    all_err = [e for v in abs_err.values() for e in v]
    return {"loss": total_loss / max(n_chunks, 1),
            "mae": float(np.mean(all_err)) if all_err else float("nan"),
            "per_command_mae": per_command}


def train(config: ExperimentConfig) -> tuple[Model, TrainReport]:
    t0 = time.time()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = datapipe.filter_steering(datapipe.load_index(config.data_root))
    if not rows:
        raise TrainError(f"no trainable samples under {config.data_root}")
    train_rows, val_rows = datapipe.split(rows, seed=config.seed)
    if len(val_rows) > VAL_CAP:
        # Per-epoch metrics only need a stable sample, not the full split;
        # a fixed seeded subset keeps large-dataset epochs cheap.
        pick = substream(config.seed, "valcap").choice(
            len(val_rows), size=VAL_CAP, replace=False)
        val_rows = [val_rows[i] for i in sorted(pick)]
    cache = datapipe.SampleCache(config.data_root)

    model = Model(config.architecture())
    model.init_params(config.seed)
    adam = AdamState(model.params)

    best_path = out_dir / "best.ckpt"
    nm.save_checkpoint(best_path, model.params)
    best_val = float("inf")
    report_rows = []
    report_path = out_dir / "train_report.jsonl"
    report_path.write_text("")

    for epoch in range(config.epochs):
        epoch_losses = []
        batches = datapipe.balanced_batches(train_rows, COMMANDS,
                                            config.batch_size,
                                            seed=config.seed, epoch=epoch)
        for batch in batches:
            images, commands, steering = _assemble(batch, cache, config, epoch)
            tensors = model.bind()
            loss = batch_loss(model, tensors, images, commands, steering, config)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainError(f"non-finite loss at epoch {epoch}: {value}")
            names = {t.node_id: name for name, t in tensors.items()}
            leaf_grads = loss.backward()
            grads = {names[nid]: g for nid, g in leaf_grads.items()}
            norm = nm.global_grad_norm(grads.values())
            if norm > config.grad_clip:
                factor = config.grad_clip / norm
                grads = {k: g * factor for k, g in grads.items()}
            adam_step(model.params, grads, adam)
            for name, p in model.params.items():
                if not np.all(np.isfinite(p)):
                    raise TrainError(f"non-finite parameter {name} at epoch {epoch}")
            epoch_losses.append(value)

        val = validate(model, val_rows, cache, config)
        nm.save_checkpoint(out_dir / f"epoch{epoch:03d}.ckpt", model.params)
        if val["loss"] < best_val:
            best_val = val["loss"]
            nm.save_checkpoint(best_path, model.params)
        row = {"epoch": epoch,
               "train_loss": float(np.mean(epoch_losses)),
               "val_loss": val["loss"],
               "val_mae": val["mae"],
               "wall_time": round(time.time() - t0, 2)}
        report_rows.append(row)
        with open(report_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row) + "\n")

    if config.epochs > 0:
        model.load_params(nm.load_checkpoint(best_path))
    return model, TrainReport(report_rows, str(best_path), time.time() - t0)


def load_model(config: ExperimentConfig, checkpoint) -> Model:
    model = Model(config.architecture())
    model.load_params(nm.load_checkpoint(checkpoint))
    return model
