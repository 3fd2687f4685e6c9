"""Modality graph construction and graph-layer math vs loop oracles."""

import numpy as np
import pytest
import torch

from mmfusion.errors import ConfigurationError
from mmfusion.gradcheck import check_gradients
from mmfusion.hga import (
    MODALITY_ORDER,
    FusionHead,
    ModalityGraph,
    ModalityGraphLayer,
    build_modality_graph,
    gat_layer,
    gcn_layer,
    hga_forward,
)
from mmfusion.nnutils import deterministic_init


def _leaky(x, slope=0.2):
    return x if x >= 0 else slope * x


def _gat_oracle(features, W, a):
    """Loop GAT: snapshots inputs, so it is synchronous by construction."""
    n, d = features.shape
    h = np.array([W @ features[i] for i in range(n)])
    out = np.zeros_like(h)
    alphas = np.zeros((n, n))
    for i in range(n):
        e = np.array([_leaky(a[:d] @ h[i] + a[d:] @ h[j]) for j in range(n)])
        e = np.exp(e - e.max())
        alphas[i] = e / e.sum()
        for j in range(n):
            out[i] += alphas[i, j] * h[j]
    return out, alphas


def _graph(features, tags=None):
    feats = torch.as_tensor(features, dtype=torch.float64)
    tags = tags or MODALITY_ORDER[: feats.shape[-2]]
    return ModalityGraph(tags=tags, features=feats)


def _layer(dim, layer_type, activation="identity", seed=0, layers=1):
    with deterministic_init(seed):
        layer = ModalityGraphLayer(dim, layer_type, activation, layers)
    return layer.double()


class TestBuildGraph:
    def test_five_vertices_25_edges(self):
        vecs = {t: torch.randn(6, generator=torch.Generator().manual_seed(i))
                for i, t in enumerate(MODALITY_ORDER)}
        g = build_modality_graph(vecs["gtvT"], vecs["gtvN"], vecs["clinical"],
                                 vecs["hematology"], vecs["radiomics"])
        assert g.n_vertices == 5
        assert len(g.edges) == 25
        assert (0, 0) in g.edges and (4, 2) in g.edges
        assert g.tags == MODALITY_ORDER
        for i, t in enumerate(MODALITY_ORDER):
            assert torch.equal(g.features[i], vecs[t])

    def test_keyword_order_irrelevant(self):
        vecs = [torch.full((4,), float(i)) for i in range(5)]
        a = build_modality_graph(vecs[0], vecs[1], vecs[2], vecs[3], vecs[4])
        b = build_modality_graph(radiomics_emb=vecs[4], clinical_emb=vecs[2],
                                 z_N=vecs[1], hematology_emb=vecs[3], z_T=vecs[0])
        assert torch.equal(a.features, b.features)
        assert a.tags == b.tags

    def test_missing_or_mismatched(self):
        v = torch.zeros(4)
        with pytest.raises(ValueError, match="clinical"):
            build_modality_graph(v, v, None, v, v)
        with pytest.raises(ValueError):
            build_modality_graph(v, v, torch.zeros(5), v, v)

    def test_batched(self):
        v = torch.randn(3, 4)
        g = build_modality_graph(v, v, v, v, v)
        assert g.features.shape == (3, 5, 4)


class TestGatLayer:
    def test_single_vertex_is_sigma_WF(self):
        layer = _layer(6, "gat", "elu", seed=1)
        f = torch.randn(1, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        out = gat_layer(_graph(f, tags=("gtvT",)), layer)
        expected = torch.nn.functional.elu(f @ layer.weight.T)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_identical_features_symmetry(self):
        layer = _layer(5, "gat", "identity", seed=3)
        with torch.no_grad():
            layer.weight.copy_(torch.eye(5, dtype=torch.float64))
        shared = torch.randn(5, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
        f = shared.expand(2, 5).clone()
        out = gat_layer(_graph(f, tags=("gtvT", "gtvN")), layer)
        assert torch.allclose(out[0], shared, atol=1e-12)
        assert torch.allclose(out[1], shared, atol=1e-12)

    def test_loop_oracle_five_vertices(self):
        layer = _layer(7, "gat", "identity", seed=5)
        f = torch.randn(5, 7, dtype=torch.float64, generator=torch.Generator().manual_seed(6))
        out = gat_layer(_graph(f), layer).detach().numpy()
        ref, alphas = _gat_oracle(f.numpy(), layer.weight.detach().numpy(),
                                  layer.attn.detach().numpy())
        np.testing.assert_allclose(out, ref, atol=1e-10)
        _, got_alpha = layer(f)
        np.testing.assert_allclose(got_alpha.detach().numpy(), alphas, atol=1e-10)
        # attention invariants: rows sum to 1, all weights positive
        np.testing.assert_allclose(alphas.sum(axis=1), 1.0, atol=1e-6)
        assert (alphas > 0).all()

    def test_layer_type_guard(self):
        layer = _layer(4, "gcn", seed=7)
        with pytest.raises(ConfigurationError):
            gat_layer(_graph(torch.zeros(5, 4)), layer)


class TestGcnLayer:
    def test_single_vertex(self):
        layer = _layer(6, "gcn", "elu", seed=8)
        f = torch.randn(1, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
        out = gcn_layer(_graph(f, tags=("gtvN",)), layer)
        expected = torch.nn.functional.elu(f @ layer.weight.T)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_identity_weight_gives_mean(self):
        layer = _layer(4, "gcn", "identity", seed=10)
        with torch.no_grad():
            layer.weight.copy_(torch.eye(4, dtype=torch.float64))
        f = torch.randn(5, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(11))
        out = gcn_layer(_graph(f), layer)
        mean = f.mean(dim=0)
        for i in range(5):
            assert torch.allclose(out[i], mean, atol=1e-12)

    def test_loop_oracle(self):
        layer = _layer(6, "gcn", "elu", seed=12)
        f = torch.randn(5, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(13))
        out = gcn_layer(_graph(f), layer).detach().numpy()
        W = layer.weight.detach().numpy()
        h = np.array([W @ f[i].numpy() for i in range(5)])
        ref = np.array([np.mean(h, axis=0) for _ in range(5)])
        ref = np.where(ref > 0, ref, np.expm1(ref))  # elu
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_gat_reduces_to_gcn_when_attention_is_constant(self):
        gat = _layer(6, "gat", "elu", seed=14)
        gcn = _layer(6, "gcn", "elu", seed=15)
        with torch.no_grad():
            gat.attn.zero_()
            gcn.weight.copy_(gat.weight)
        f = torch.randn(5, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(16))
        assert torch.allclose(gat_layer(_graph(f), gat), gcn_layer(_graph(f), gcn), atol=1e-12)


class TestHgaForward:
    def _setup(self, seed=20, dim=6):
        with deterministic_init(seed):
            layer = ModalityGraphLayer(dim, "gat", "elu", 1)
            head = FusionHead(dim, 3, 4, 5)
        return layer.double(), head.double()

    def _graph_from_raw(self, head, dim=6, seed=21, batch=None):
        g = torch.Generator().manual_seed(seed)
        shape = (batch, dim) if batch else (dim,)
        z_t = torch.randn(*shape, dtype=torch.float64, generator=g)
        z_n = torch.randn(*shape, dtype=torch.float64, generator=g)
        raw = [torch.randn(*(shape[:-1] + (k,)), dtype=torch.float64, generator=g)
               for k in (3, 4, 5)]
        c, hb, r = head.embed_tabular(*raw)
        return build_modality_graph(z_t, z_n, c, hb, r)

    def test_simplex_output(self):
        layer, head = self._setup()
        f_phi, y_hat = hga_forward(self._graph_from_raw(head), layer, head)
        assert f_phi.shape == (2,)
        assert torch.all(f_phi >= 0)
        assert abs(float(f_phi.sum().detach()) - 1.0) < 1e-6
        assert float(y_hat.detach()) == pytest.approx(float(f_phi[1].detach()))

    def test_logit_shift_invariance(self):
        layer, head = self._setup(seed=22)
        graph = self._graph_from_raw(head, seed=23)
        before, _ = hga_forward(graph, layer, head)
        with torch.no_grad():
            head.classify.bias += 3.7
        after, _ = hga_forward(graph, layer, head)
        assert torch.allclose(before, after, atol=1e-10)

    def test_composed_oracle(self):
        layer, head = self._setup(seed=24)
        graph = self._graph_from_raw(head, seed=25)
        f_phi, _ = hga_forward(graph, layer, head)
        ref_feats, _ = _gat_oracle(graph.features.detach().numpy(),
                                   layer.weight.detach().numpy(),
                                   layer.attn.detach().numpy())
        ref_feats = np.where(ref_feats > 0, ref_feats, np.expm1(ref_feats))
        pooled = ref_feats.mean(axis=0)
        hid = head.readout.weight.detach().numpy() @ pooled + head.readout.bias.detach().numpy()
        hid = np.where(hid > 0, hid, np.expm1(hid))
        logits = head.classify.weight.detach().numpy() @ hid + head.classify.bias.detach().numpy()
        e = np.exp(logits - logits.max())
        np.testing.assert_allclose(f_phi.detach().numpy(), e / e.sum(), atol=1e-10)

    def test_batched(self):
        layer, head = self._setup(seed=26)
        f_phi, y_hat = hga_forward(self._graph_from_raw(head, batch=4, seed=27), layer, head)
        assert f_phi.shape == (4, 2) and y_hat.shape == (4,)
        np.testing.assert_allclose(f_phi.sum(dim=-1).detach().numpy(), 1.0, atol=1e-6)

    def test_multi_layer_application(self):
        with deterministic_init(28):
            layer = ModalityGraphLayer(6, "gat", "elu", layers=2)
            head = FusionHead(6, 3, 4, 5)
        layer, head = layer.double(), head.double()
        graph = self._graph_from_raw(head, seed=29)
        f_phi, _ = hga_forward(graph, layer, head)
        once = layer(graph.features)[0]
        twice = layer(once)[0]
        manual = torch.softmax(head(twice.mean(dim=-2)), dim=-1)
        assert torch.allclose(f_phi, manual, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        layer, head = self._setup(seed=30)
        g = torch.Generator().manual_seed(31)
        z_t = torch.randn(6, dtype=torch.float64, generator=g)
        z_n = torch.randn(6, dtype=torch.float64, generator=g)
        raw = [torch.randn(k, dtype=torch.float64, generator=g) for k in (3, 4, 5)]

        def probe():
            # embeddings rebuilt per call so perturbed embed weights propagate
            c, hb, r = head.embed_tabular(*raw)
            f_phi, _ = hga_forward(build_modality_graph(z_t, z_n, c, hb, r), layer, head)
            return (f_phi * torch.tensor([0.3, 1.9], dtype=torch.float64)).sum()

        params = list(layer.parameters()) + list(head.parameters())
        err = check_gradients(probe, params, n_probes=12, rng=np.random.default_rng(32))
        assert err < 1e-4

    def test_constructor_validation(self):
        with pytest.raises(ConfigurationError):
            ModalityGraphLayer(6, "sage")
        with pytest.raises(ConfigurationError):
            ModalityGraphLayer(6, "gat", activation="swish")
        with pytest.raises(ConfigurationError):
            ModalityGraphLayer(6, "gat", layers=0)
