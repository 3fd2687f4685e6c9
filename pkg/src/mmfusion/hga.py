"""Modality-graph aggregation over five single-vertex modalities.

The graph is fully connected (self-loops included) over one vertex per
modality in a fixed canonical order. A shared-weight graph layer (GAT
attention or uniform GCN averaging) updates all vertices synchronously;
mean-pooled vertex features feed a small head that emits the class
probability 2-vector f_phi used everywhere downstream as guidance, plus
the scalar probability y_hat = f_phi[1].

On a fully connected graph the GCN update gives every vertex the same
mean; that quirk is inherited by design, since GCN is only here as the
uniform-attention baseline of the layer-swap study.
"""

import dataclasses
import math

import torch
from torch import nn

from .errors import ConfigurationError

MODALITY_ORDER = ("gtvT", "gtvN", "clinical", "hematology", "radiomics")

_ACTIVATIONS = {
    "elu": torch.nn.functional.elu,
    "relu": torch.nn.functional.relu,
    "identity": lambda x: x,
}

LAYER_TYPES = ("gat", "gcn")


@dataclasses.dataclass
class ModalityGraph:
    tags: tuple
    features: torch.Tensor  # (n, d) or (B, n, d), rows ordered like tags

    def __post_init__(self):
        self.tags = tuple(self.tags)
        if len(set(self.tags)) != len(self.tags):
            raise ValueError("duplicate modality tags")
        if self.features.shape[-2] != len(self.tags):
            raise ValueError(
                f"{len(self.tags)} tags but {self.features.shape[-2]} feature rows"
            )

    @property
    def n_vertices(self):
        return len(self.tags)

    @property
    def edges(self):
        """All ordered vertex pairs, self-loops included."""
        n = self.n_vertices
        return [(i, j) for i in range(n) for j in range(n)]


def build_modality_graph(z_T, z_N, clinical_emb, hematology_emb, radiomics_emb):
    """Stack the five embedded modality vectors in canonical vertex order."""
    named = {
        "gtvT": z_T,
        "gtvN": z_N,
        "clinical": clinical_emb,
        "hematology": hematology_emb,
        "radiomics": radiomics_emb,
    }
    for tag in MODALITY_ORDER:
        if named[tag] is None:
            raise ValueError(f"missing modality {tag!r}")
    shapes = {tuple(named[t].shape) for t in MODALITY_ORDER}
    if len(shapes) != 1:
        raise ValueError(f"modality feature shapes differ: {sorted(shapes)}")
    features = torch.stack([named[t] for t in MODALITY_ORDER], dim=-2)
    return ModalityGraph(tags=MODALITY_ORDER, features=features)


class ModalityGraphLayer(nn.Module):
    """Shared-weight graph layer; L repeated applications reuse one (W, a)."""

    def __init__(self, dim, layer_type="gat", activation="elu", layers=1):
        super().__init__()
        if layer_type not in LAYER_TYPES:
            raise ConfigurationError(f"layer_type must be one of {LAYER_TYPES}")
        if activation not in _ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if int(layers) < 1:
            raise ConfigurationError("layers must be >= 1")
        self.dim = dim
        self.layer_type = layer_type
        self.activation = activation
        self.layers = int(layers)
        self.weight = nn.Parameter(torch.empty(dim, dim))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if layer_type == "gat":
            bound = 1.0 / math.sqrt(2 * dim)
            self.attn = nn.Parameter(torch.empty(2 * dim).uniform_(-bound, bound))
        self.leaky = nn.LeakyReLU(0.2)

    def _act(self, x):
        return _ACTIVATIONS[self.activation](x)

    def forward(self, features):
        if self.layer_type == "gat":
            return self._gat(features)
        return self._gcn(features)

    def _gat(self, features):
        h = features @ self.weight.T
        d = self.dim
        s_query = (h * self.attn[:d]).sum(dim=-1)   # contribution of the updated vertex
        s_neigh = (h * self.attn[d:]).sum(dim=-1)   # contribution of the attended vertex
        e = self.leaky(s_query.unsqueeze(-1) + s_neigh.unsqueeze(-2))
        alpha = torch.softmax(e, dim=-1)
        return self._act(alpha @ h), alpha

    def _gcn(self, features):
        h = features @ self.weight.T
        n = features.shape[-2]
        mean = h.mean(dim=-2, keepdim=True).expand_as(h)
        alpha = torch.full(features.shape[:-1] + (n,), 1.0 / n,
                           dtype=features.dtype, device=features.device)
        return self._act(mean), alpha


def gat_layer(graph, params):
    """One synchronous GAT update; returns the new feature matrix."""
    if params.layer_type != "gat":
        raise ConfigurationError("gat_layer needs params with layer_type 'gat'")
    return params(graph.features)[0]


def gcn_layer(graph, params):
    """One synchronous uniform-averaging update."""
    if params.layer_type != "gcn":
        raise ConfigurationError("gcn_layer needs params with layer_type 'gcn'")
    return params(graph.features)[0]


class FusionHead(nn.Module):
    """Tabular embeddings into the graph plus the readout classifier."""

    def __init__(self, dim, clinical_dim, hematology_dim, radiomics_dim):
        super().__init__()
        self.embed_clinical = nn.Linear(clinical_dim, dim)
        self.embed_hematology = nn.Linear(hematology_dim, dim)
        self.embed_radiomics = nn.Linear(radiomics_dim, dim)
        self.readout = nn.Linear(dim, dim)
        self.act = nn.ELU()
        self.classify = nn.Linear(dim, 2)

    def embed_tabular(self, clinical, hematology, radiomics):
        return (self.embed_clinical(clinical),
                self.embed_hematology(hematology),
                self.embed_radiomics(radiomics))

    def forward(self, pooled):
        return self.classify(self.act(self.readout(pooled)))


def hga_forward(graph, gnn_params, head_params):
    """L graph layers, mean-pool, readout. Returns (f_phi, y_hat)."""
    features = graph.features
    for _ in range(gnn_params.layers):
        features = gnn_params(features)[0]
    pooled = features.mean(dim=-2)
    logits = head_params(pooled)
    f_phi = torch.softmax(logits, dim=-1)
    return f_phi, f_phi[..., 1]
