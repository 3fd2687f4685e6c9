"""Volume encoder construction, purity, and gradient fidelity."""

import numpy as np
import pytest
import torch

from mmfusion.encoder import ARCHITECTURES, encode_volume, init_encoder
from mmfusion.errors import ConfigurationError
from mmfusion.gradcheck import check_gradients

GRID = (6, 8, 8)


def _state_bytes(module):
    return b"".join(v.numpy().tobytes() for v in module.state_dict().values())


class TestInit:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_deterministic_for_fixed_seed(self, arch):
        a = init_encoder(arch, GRID, 16, seed=1)
        b = init_encoder(arch, GRID, 16, seed=1)
        assert _state_bytes(a) == _state_bytes(b)
        c = init_encoder(arch, GRID, 16, seed=2)
        assert _state_bytes(a) != _state_bytes(c)

    def test_unknown_architecture_lists_supported(self):
        with pytest.raises(ConfigurationError) as exc:
            init_encoder("vgg", GRID, 16, seed=0)
        for name in ARCHITECTURES:
            assert name in str(exc.value)

    def test_invalid_dims(self):
        with pytest.raises(ConfigurationError):
            init_encoder("resnet_small", GRID, 3, seed=0)
        with pytest.raises(ConfigurationError):
            init_encoder("resnet_small", (2, 8, 8), 16, seed=0)
        with pytest.raises(ConfigurationError):
            init_encoder("resnet_small", (8, 8), 16, seed=0)


class TestEncode:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_zero_volume_finite_vector(self, arch):
        enc = init_encoder(arch, GRID, 12, seed=3)
        out = encode_volume(np.zeros(GRID, dtype=np.float32), enc)
        assert out.shape == (12,)
        assert torch.isfinite(out).all()

    def test_latent_dim_is_architecture_independent(self):
        vol = np.random.default_rng(0).standard_normal(GRID).astype(np.float32)
        outs = [encode_volume(vol, init_encoder(a, GRID, 24, seed=1)) for a in ARCHITECTURES]
        assert all(o.shape == (24,) for o in outs)

    def test_pure_function_of_inputs(self):
        enc = init_encoder("resnet_small", GRID, 8, seed=4)
        vol = np.random.default_rng(1).standard_normal(GRID).astype(np.float32)
        a = encode_volume(vol, enc)
        b = encode_volume(vol.copy(), enc)
        assert torch.equal(a, b)

    def test_batch_independence(self):
        # GroupNorm: the latent of a volume cannot depend on its batchmates
        enc = init_encoder("resnet_small", GRID, 8, seed=5)
        batch = torch.randn(3, 1, *GRID, generator=torch.Generator().manual_seed(2))
        joint = enc(batch)
        solo = encode_volume(batch[1, 0], enc)
        assert torch.allclose(joint[1], solo, atol=1e-6)

    def test_shape_mismatch(self):
        enc = init_encoder("resnet_small", GRID, 8, seed=6)
        with pytest.raises(ValueError):
            encode_volume(np.zeros((4, 4, 4), dtype=np.float32), enc)


class TestGradients:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_weight_gradients_match_finite_differences(self, arch):
        enc = init_encoder(arch, GRID, 8, seed=7).double()
        vol = torch.randn(*GRID, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(3))
        err = check_gradients(lambda: encode_volume(vol, enc).sum(),
                              list(enc.parameters()), n_probes=8,
                              rng=np.random.default_rng(4))
        assert err < 1e-4

    def test_input_gradients_match_finite_differences(self):
        enc = init_encoder("resnet_small", GRID, 8, seed=8).double()
        vol = torch.randn(*GRID, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(5), requires_grad=True)
        err = check_gradients(lambda: encode_volume(vol, enc).sum(), [vol],
                              n_probes=8, rng=np.random.default_rng(6))
        assert err < 1e-4
