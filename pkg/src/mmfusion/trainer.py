"""Two-stage training: guidance warm-up, then joint diffusion training.

Warm-up optimizes the non-diffusion loss (BCE plus the two branch
alignment penalties); joint training adds the noise-matching loss and
keeps the guidance terms, selecting the checkpoint with the best
validation accuracy. The published recipe's optimizer settings are the
defaults. All stochastic draws (shuffling, masks, diffusion noise,
augmentation, validation chains) come from per-phase numpy streams
derived from config.seed, so a run is reproducible end to end.
"""

import copy
import dataclasses
import json
import math
import os
import tempfile

import numpy as np
import torch

from .cfd import diffusion_loss, make_noise_schedule
from .cohort import augment_volume
from .errors import CheckpointError, ConfigurationError, TrainingDiverged
from .mmrl import alignment_loss
from .model import Batch, MMFusionModel, ModelSpec, collate, predict_records

CKPT_HEADER = "mmfusion-ckpt-v1"

# per-phase rng stream tags under config.seed
_WARMUP_STREAM = 11
_JOINT_STREAM = 12
_VAL_STREAM = 13


@dataclasses.dataclass
class TrainConfig:
    # optimization (published recipe)
    batch_size: int = 12
    optimizer: str = "adam"
    weight_decay: float = 5e-4
    lr: float = 1e-4
    epochs: int = 100
    scheduler: str = "cosine"
    restart_epoch: int = 80
    min_lr: float = 1e-5
    warmup_epochs: int = 50
    mask_ratio: float = 0.15
    seed: int = 0
    # model shape
    variant: str = "full"
    architecture: str = "resnet_small"
    latent_dim: int = 64
    heads: int = 4
    gnn: str = "gat"
    gnn_layers: int = 1
    activation: str = "elu"
    timesteps: int = 10
    beta_start: float = 0.01
    beta_end: float = 0.95
    sample_chains: int = 100
    reverse_mode: str = "card_posterior"
    # protocol
    folds: int = 3
    split_seed: int = 0
    augment: bool = False
    flip_prob: float = 0.6
    noise_prob: float = 0.4
    noise_sigma: float = 0.05

    def validate(self):
        if self.optimizer != "adam":
            raise ConfigurationError("only the adam optimizer is supported")
        if self.scheduler != "cosine":
            raise ConfigurationError("only the cosine scheduler is supported")
        if int(self.warmup_epochs) > int(self.epochs):
            raise ConfigurationError("warmup_epochs must be <= epochs")
        if float(self.min_lr) > float(self.lr):
            raise ConfigurationError("min_lr must be <= lr")
        if int(self.batch_size) < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if int(self.restart_epoch) < 1:
            raise ConfigurationError("restart_epoch must be >= 1")
        if not (0.0 <= float(self.mask_ratio) < 1.0):
            raise ConfigurationError("mask_ratio must lie in [0, 1)")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(payload) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**payload)
        cfg.validate()
        return cfg

    def model_spec(self, grid_shape, vector_dims):
        return ModelSpec(
            variant=self.variant, architecture=self.architecture,
            grid_shape=tuple(grid_shape), vector_dims=tuple(vector_dims),
            latent_dim=int(self.latent_dim), heads=int(self.heads),
            gnn=self.gnn, gnn_layers=int(self.gnn_layers),
            activation=self.activation, timesteps=int(self.timesteps),
            beta_start=float(self.beta_start), beta_end=float(self.beta_end),
            seed=int(self.seed),
        )


@dataclasses.dataclass
class Checkpoint:
    model: MMFusionModel
    config: TrainConfig
    epoch: int
    history: list
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")


def non_diffusion_loss(y_hat, y0, align_pairs):
    """BCE on the scalar class-1 probability plus both alignment MSEs."""
    y_hat = torch.clamp(torch.as_tensor(y_hat), 1e-7, 1.0 - 1e-7)
    y0 = torch.as_tensor(y0, dtype=y_hat.dtype)
    bce = -(y0 * torch.log(y_hat) + (1.0 - y0) * torch.log(1.0 - y_hat)).mean()
    loss = bce
    for cu, cm in align_pairs.values():
        loss = loss + alignment_loss(cu, cm)
    return loss


def total_loss(non_diff, diff):
    return non_diff + diff


def lr_at(epoch, config):
    """Cosine annealing with a hard restart every restart_epoch epochs."""
    epoch = int(epoch)
    if not (0 <= epoch < int(config.epochs)):
        raise ConfigurationError(f"epoch {epoch} outside [0, {config.epochs})")
    phase = epoch % int(config.restart_epoch)
    lo, hi = float(config.min_lr), float(config.lr)
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * phase / int(config.restart_epoch)))


def _augmenter(config, rng):
    if not config.augment:
        return None
    return lambda vol: augment_volume(vol, config.flip_prob, config.noise_prob,
                                      config.noise_sigma, rng)


def _check_finite(value, term):
    if not torch.isfinite(value):
        raise TrainingDiverged(f"{term} loss became non-finite ({float(value.detach())})")


def _train_epochs(model, train_records, config, epoch_range, rng, with_diffusion,
                  on_epoch_end=None):
    opt = torch.optim.Adam(model.parameters(), lr=float(config.lr),
                           weight_decay=float(config.weight_decay))
    n = len(train_records)
    for epoch in epoch_range:
        lr = lr_at(epoch, config)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, n, int(config.batch_size)):
            chunk = [train_records[i] for i in order[start:start + int(config.batch_size)]]
            batch = collate(chunk, augment=_augmenter(config, rng))
            out = model.guidance_forward(batch, mode="train",
                                         mask_ratio=float(config.mask_ratio), rng=rng)
            y0 = batch.labels.to(out.y_hat.dtype)
            loss = non_diffusion_loss(out.y_hat, y0, out.align_pairs)
            _check_finite(loss, "non-diffusion")
            if with_diffusion and model.spec.variant == "full":
                onehot = torch.nn.functional.one_hot(batch.labels, 2).to(out.probs.dtype)
                diff = diffusion_loss(onehot, out.probs, model.cfd, model.schedule, rng)
                _check_finite(diff, "diffusion")
                loss = total_loss(loss, diff)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            steps += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, lr, epoch_loss / max(steps, 1))


def warmup_guidance(train_records, config) -> Checkpoint:
    """Stage one: train the guidance path on the non-diffusion loss only."""
    config.validate()
    if not train_records:
        raise ConfigurationError("warm-up needs a nonempty training split")
    first = train_records[0]
    spec = config.model_spec(first.tumor_volume.shape, (len(first.clinical),
                             len(first.hematology), len(first.radiomics)))
    model = MMFusionModel(spec)
    history = []
    rng = np.random.default_rng([int(config.seed), _WARMUP_STREAM])
    _train_epochs(model, train_records, config, range(int(config.warmup_epochs)),
                  rng, with_diffusion=False,
                  on_epoch_end=lambda e, lr, loss: history.append(
                      {"epoch": e, "lr": lr, "train_loss": loss, "phase": "warmup"}))
    return Checkpoint(model=model, config=config, epoch=int(config.warmup_epochs),
                      history=history)


def _validation_accuracy(model, val_records, config, epoch):
    rng = np.random.default_rng([int(config.seed), _VAL_STREAM, int(epoch)])
    labels, _ = predict_records(model, val_records, rng=rng,
                                chains=int(config.sample_chains),
                                batch_size=max(int(config.batch_size), 32),
                                reverse_mode=config.reverse_mode)
    truth = np.array([r.label for r in val_records])
    return float((labels == truth).mean())


def train_joint(checkpoint, train_records, val_records, config) -> Checkpoint:
    """Stage two: optimize the total loss, keep the best-validation state."""
    config.validate()
    if not train_records or not val_records:
        raise ConfigurationError("joint training needs nonempty train and val splits")
    model = checkpoint.model
    history = list(checkpoint.history)
    rng = np.random.default_rng([int(config.seed), _JOINT_STREAM])
    best = {"epoch": -1, "accuracy": -1.0, "state": None}

    def consider(epoch, lr, loss):
        acc = _validation_accuracy(model, val_records, config, epoch)
        history.append({"epoch": epoch, "lr": lr, "train_loss": loss,
                        "val_accuracy": acc, "phase": "joint"})
        if acc > best["accuracy"]:
            best.update(epoch=epoch, accuracy=acc,
                        state=copy.deepcopy(model.state_dict()))

    start = int(config.warmup_epochs)
    _train_epochs(model, train_records, config, range(start, int(config.epochs)),
                  rng, with_diffusion=True, on_epoch_end=consider)
    if best["state"] is None:  # no joint epochs configured
        acc = _validation_accuracy(model, val_records, config, start)
        best.update(epoch=start, accuracy=acc, state=copy.deepcopy(model.state_dict()))
    model.load_state_dict(best["state"])
    return Checkpoint(model=model, config=config, epoch=int(config.epochs),
                      history=history, best_epoch=best["epoch"],
                      best_val_accuracy=best["accuracy"])


def train_model(train_records, val_records, config) -> Checkpoint:
    """Warm-up then joint training in one call."""
    return train_joint(warmup_guidance(train_records, config), train_records,
                       val_records, config)


def save_checkpoint(checkpoint, path):
    """Flat npz map: header, JSON meta, named parameter arrays, schedule."""
    model = checkpoint.model
    arrays = {
        "__header__": np.array(CKPT_HEADER),
        "__meta__": np.array(json.dumps({
            "spec": model.spec.to_dict(),
            "config": checkpoint.config.to_dict(),
            "epoch": int(checkpoint.epoch),
            "history": checkpoint.history,
            "best_epoch": int(checkpoint.best_epoch),
            "best_val_accuracy": None if math.isnan(checkpoint.best_val_accuracy)
                                 else float(checkpoint.best_val_accuracy),
        })),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    if hasattr(model, "schedule"):
        arrays["schedule/beta"] = model.schedule.beta
        arrays["schedule/alpha"] = model.schedule.alpha
        arrays["schedule/alpha_bar"] = model.schedule.alpha_bar
    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".ckpt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data or str(data["__header__"]) != CKPT_HEADER:
            raise CheckpointError(f"{path} is not a {CKPT_HEADER} checkpoint")
        meta = json.loads(str(data["__meta__"]))
        spec = ModelSpec.from_dict(meta["spec"])
        config = TrainConfig.from_dict(meta["config"])
        model = MMFusionModel(spec)
        state = {}
        for key in data.files:
            if key.startswith("param/"):
                state[key[len("param/"):]] = torch.as_tensor(np.array(data[key]))
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"parameter map does not fit the architecture: {exc}")
        if hasattr(model, "schedule") and "schedule/beta" in data:
            stored = np.array(data["schedule/beta"])
            if not np.allclose(stored, model.schedule.beta, atol=1e-12):
                raise CheckpointError("stored noise schedule disagrees with config")
    best = meta.get("best_val_accuracy")
    return Checkpoint(model=model, config=config, epoch=int(meta["epoch"]),
                      history=list(meta["history"]),
                      best_epoch=int(meta.get("best_epoch", -1)),
                      best_val_accuracy=float("nan") if best is None else float(best))
