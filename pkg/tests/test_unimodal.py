import pytest
import torch

from tailor import diffcore as dc
from tailor.gradcheck import numeric_grad, rel_err
from tailor.layers import sinusoidal_positions, zero_sublayers
from tailor.unimodal import ConfigError, ModalityConfig, ModalityEncoder, encode


def make(modality="visual", d_in=3, tau=4, d=8, layers=1, heads=2, seed=0):
    torch.manual_seed(seed)
    enc = ModalityEncoder(ModalityConfig(modality, d_in, tau, layers, heads, d, dropout=0.0)).double()
    enc.eval()
    return enc


@pytest.mark.parametrize("modality,d_in,tau,layers", [("visual", 35, 60, 4), ("text", 300, 50, 6)])
def test_full_scale_shapes(modality, d_in, tau, layers):
    enc = make(modality, d_in, tau, d=256, layers=layers, heads=8)
    x = torch.randn(d_in, tau, dtype=torch.float64)
    with torch.no_grad():
        assert encode(x, enc).shape == (256, tau)


def test_zero_sublayers_leave_normalised_residual_path():
    enc = make()
    zero_sublayers(enc)
    x = torch.randn(2, 3, 4, dtype=torch.float64)
    with torch.no_grad():
        out = enc(x)
        projected = enc.proj(x.transpose(1, 2)) + sinusoidal_positions(4, 8)
        ones, zeros = torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64)
        # every sublayer outputs zero, so each post-LN step re-normalises the same rows
        expected = dc.layer_norm(dc.layer_norm(projected, ones, zeros), ones, zeros)
    assert torch.allclose(out, expected.transpose(1, 2), atol=1e-12)


def test_shape_mismatch_names_modality():
    enc = make("audio")
    with pytest.raises(ConfigError, match="audio"):
        enc(torch.zeros(1, 5, 4, dtype=torch.float64))


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModalityConfig("visual", 3, 4, 1, heads=3, model_dim=8)
    with pytest.raises(ConfigError):
        ModalityConfig("visual", 3, 4, 0, heads=2, model_dim=8)
    with pytest.raises(ConfigError):
        ModalityConfig("smell", 3, 4, 1, heads=2, model_dim=8)


@pytest.mark.parametrize("layers", [1, 3])
def test_output_shape_independent_of_depth(layers):
    enc = make(layers=layers)
    assert enc(torch.zeros(2, 3, 4, dtype=torch.float64)).shape == (2, 8, 4)


def test_permutation_equivariance():
    enc = make(layers=2)
    x = torch.randn(1, 3, 4, dtype=torch.float64)
    pos = sinusoidal_positions(4, 8)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        out = enc(x, pos)
        out_perm = enc(x[:, :, perm], pos[perm])
    assert torch.allclose(out[:, :, perm], out_perm, atol=1e-12)


def test_deterministic_with_dropout_off():
    enc = make()
    x = torch.randn(2, 3, 4, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(enc(x), enc(x))


def test_input_gradient_matches_finite_differences():
    enc = make()
    x = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 8, 4, dtype=torch.float64)
    f = lambda: (enc(x) * w).sum()
    dc.backward(f())
    assert rel_err(x.grad.numpy(), numeric_grad(f, x)) < 1e-4
