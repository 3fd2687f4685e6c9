"""Model assembly: encoder, relational fusion, modality graph, diffusion.

Four variants build on each other for the ablation study:
  base1  encoders + raw concatenation + feedforward head
  base2  + masked relational fusion between tumor and node tokens
  base3  + modality-graph aggregation over five modality vertices
  full   + guidance-conditioned label diffusion on top of base3

Every variant exposes the same guidance_forward contract (class
probabilities, scalar y_hat, alignment pairs) so the trainer and the
evaluation kit stay variant-agnostic.
"""

import dataclasses

import numpy as np
import torch
from torch import nn

from .cfd import NoisePredictor, make_noise_schedule, sample_prediction
from .encoder import init_encoder
from .errors import ConfigurationError
from .hga import FusionHead, ModalityGraphLayer, build_modality_graph, hga_forward
from .mmrl import MaskedRelationalFusion
from .nnutils import deterministic_init

VARIANTS = ("base1", "base2", "base3", "full")


def _derive_seed(seed, tag):
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


@dataclasses.dataclass
class ModelSpec:
    variant: str = "full"
    architecture: str = "resnet_small"
    grid_shape: tuple = (16, 32, 32)
    vector_dims: tuple = (8, 12, 16)
    latent_dim: int = 64
    heads: int = 4
    gnn: str = "gat"
    gnn_layers: int = 1
    activation: str = "elu"
    timesteps: int = 10
    beta_start: float = 0.01
    beta_end: float = 0.95
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if int(self.latent_dim) % int(self.heads) != 0:
            raise ConfigurationError("latent_dim must be divisible by heads")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        d["vector_dims"] = list(self.vector_dims)
        return d

    @classmethod
    def from_dict(cls, payload):
        spec = cls(**payload)
        spec.grid_shape = tuple(int(s) for s in spec.grid_shape)
        spec.vector_dims = tuple(int(v) for v in spec.vector_dims)
        return spec


@dataclasses.dataclass
class Batch:
    ids: list
    tumor: torch.Tensor       # (B, D, H, W)
    nodes: torch.Tensor       # (B, 3, D, H, W)
    clinical: torch.Tensor    # (B, C)
    hematology: torch.Tensor
    radiomics: torch.Tensor
    labels: torch.Tensor      # (B,) int64

    def __len__(self):
        return len(self.ids)


def collate(records, augment=None):
    """Stack records into tensors; augment (if given) maps volume -> volume."""
    if not records:
        raise ValueError("cannot collate an empty record list")
    aug = augment if augment is not None else (lambda v: v)
    tumor = np.stack([aug(r.tumor_volume) for r in records])
    nodes = np.stack([np.stack([aug(v) for v in r.node_volumes]) for r in records])
    as_f32 = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float32))
    return Batch(
        ids=[r.id for r in records],
        tumor=as_f32(tumor),
        nodes=as_f32(nodes),
        clinical=as_f32(np.stack([r.clinical for r in records])),
        hematology=as_f32(np.stack([r.hematology for r in records])),
        radiomics=as_f32(np.stack([r.radiomics for r in records])),
        labels=torch.as_tensor(np.array([r.label for r in records], dtype=np.int64)),
    )


@dataclasses.dataclass
class GuidanceOutput:
    probs: torch.Tensor       # (B, 2) class probabilities
    y_hat: torch.Tensor       # (B,) probability of class 1
    align_pairs: dict         # branch -> (unmasked, masked), empty outside train


class ConcatClassifier(nn.Module):
    """Feedforward head over concatenated features (base1/base2)."""

    def __init__(self, in_dim, hidden=128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 2))

    def forward(self, x):
        return self.net(x)


class MMFusionModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        d = int(spec.latent_dim)
        c_dim, h_dim, r_dim = (int(v) for v in spec.vector_dims)
        self.encoder = init_encoder(spec.architecture, spec.grid_shape, d,
                                    _derive_seed(spec.seed, 1))
        if spec.variant != "base1":
            with deterministic_init(_derive_seed(spec.seed, 2)):
                self.mmrl = MaskedRelationalFusion(d, int(spec.heads))
        if spec.variant in ("base3", "full"):
            with deterministic_init(_derive_seed(spec.seed, 3)):
                self.hga = ModalityGraphLayer(d, spec.gnn, spec.activation,
                                              int(spec.gnn_layers))
            with deterministic_init(_derive_seed(spec.seed, 4)):
                self.head = FusionHead(d, c_dim, h_dim, r_dim)
        else:
            n_latents = 4 * d if spec.variant == "base1" else 2 * d
            with deterministic_init(_derive_seed(spec.seed, 6)):
                self.head = ConcatClassifier(n_latents + c_dim + h_dim + r_dim)
        if spec.variant == "full":
            with deterministic_init(_derive_seed(spec.seed, 5)):
                self.cfd = NoisePredictor()
            self.schedule = make_noise_schedule(spec.timesteps, spec.beta_start,
                                                spec.beta_end)

    def encode_tokens(self, batch):
        """Run all 4 volumes per record through the shared encoder.

        Returns (tumor_tokens (B, 1, d), node_tokens (B, 3, d)).
        """
        b = len(batch)
        vols = torch.cat([batch.tumor[:, None], batch.nodes], dim=1)  # (B, 4, D, H, W)
        flat = vols.reshape(b * 4, 1, *self.spec.grid_shape)
        z = self.encoder(flat).reshape(b, 4, -1)
        return z[:, :1], z[:, 1:]

    def guidance_forward(self, batch, mode="infer", mask_ratio=0.15, rng=None):
        tumor_tokens, node_tokens = self.encode_tokens(batch)
        variant = self.spec.variant
        align = {}
        if variant == "base1":
            feats = torch.cat([tumor_tokens.flatten(1), node_tokens.flatten(1),
                               batch.clinical, batch.hematology, batch.radiomics], dim=1)
            logits = self.head(feats)
        else:
            z_t, z_n, align = self.mmrl(tumor_tokens, node_tokens, mode=mode,
                                        ratio=mask_ratio, rng=rng)
            if variant == "base2":
                feats = torch.cat([z_t, z_n, batch.clinical, batch.hematology,
                                   batch.radiomics], dim=1)
                logits = self.head(feats)
            else:
                c, hb, r = self.head.embed_tabular(batch.clinical, batch.hematology,
                                                   batch.radiomics)
                graph = build_modality_graph(z_t, z_n, c, hb, r)
                f_phi, y_hat = hga_forward(graph, self.hga, self.head)
                return GuidanceOutput(probs=f_phi, y_hat=y_hat, align_pairs=align)
        probs = torch.softmax(logits, dim=-1)
        return GuidanceOutput(probs=probs, y_hat=probs[..., 1], align_pairs=align)

    def predict_batch(self, batch, rng=None, chains=100, reverse_mode="card_posterior"):
        """Inference labels and probabilities for one batch (no grad)."""
        with torch.no_grad():
            out = self.guidance_forward(batch, mode="infer")
            if self.spec.variant == "full":
                y0_tilde, labels = sample_prediction(out.probs, self.cfd, self.schedule,
                                                     chains=chains, rng=rng,
                                                     mode=reverse_mode)
                return labels.numpy(), out.probs.numpy(), y0_tilde.numpy()
            labels = out.probs.argmax(dim=-1)
            return labels.numpy(), out.probs.numpy(), None


def predict_records(model, records, rng=None, chains=100, batch_size=64,
                    reverse_mode="card_posterior"):
    """Predict labels for records in fixed-size batches; deterministic given rng."""
    if rng is None:
        rng = np.random.default_rng()
    labels = []
    probs = []
    for start in range(0, len(records), batch_size):
        chunk = collate(records[start:start + batch_size])
        lab, prb, _ = model.predict_batch(chunk, rng=rng, chains=chains,
                                          reverse_mode=reverse_mode)
        labels.append(lab)
        probs.append(prb)
    return np.concatenate(labels), np.concatenate(probs)
