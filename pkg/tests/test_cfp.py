import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from imdprompter.cfp import CFPFusion, bicubic_matrix, bicubic_resize, cfp_fuse, keys_kernel
from imdprompter.errors import ChannelMismatch, NonFinite
from oracles import count_params, finite_difference_check


def small_cfp():
    torch.manual_seed(0)
    return CFPFusion(sam_channels=4, view_channels=2, proj_channels=2).double()


def small_inputs(view_size=(6, 6)):
    g = torch.Generator().manual_seed(3)
    f_sam = torch.randn(1, 4, 4, 4, generator=g, dtype=torch.float64)
    views = [torch.randn(1, 2, *view_size, generator=g, dtype=torch.float64) for _ in range(4)]
    return f_sam, views


def test_default_shape():
    cfp = CFPFusion()
    out = cfp_fuse(torch.rand(1, 64, 8, 8), *[torch.rand(1, 32, 16, 16) for _ in range(4)], cfp)
    assert out.shape == (1, 64, 8, 8)


@given(st.integers(1, 12), st.integers(1, 12))
def test_output_follows_sam_grid(h, w):
    cfp = small_cfp()
    f_sam, _ = small_inputs()
    views = [torch.rand(1, 2, h, w, dtype=torch.float64) for _ in range(4)]
    assert cfp(f_sam, *views).shape == f_sam.shape


def test_suppressed_gate_leaves_conv_path():
    cfp = small_cfp()
    f_sam, views = small_inputs()
    z = cfp.concat(f_sam, views)
    conv_path = cfp.blocks(z)
    shortcut = cfp.shortcut(z)
    out = cfp(f_sam, *views, attn_logits=torch.full((1, 4), -20.0, dtype=torch.float64))
    resid = (out - conv_path).abs().max()
    assert resid <= 1e-8 * shortcut.abs().max()


def test_gate_strictly_inside_unit_interval():
    cfp = small_cfp()
    for seed in range(20):
        torch.manual_seed(seed)
        z = torch.randn(1, 12, 4, 4, dtype=torch.float64) * 3
        gate = torch.sigmoid(cfp.attention_logits(z)).detach()
        assert float(gate.min()) > 0 and float(gate.max()) < 1


def test_keys_kernel_values():
    assert keys_kernel(0.0) == 1.0
    assert keys_kernel(1.0) == 0.0
    assert keys_kernel(2.0) == 0.0
    # a = -0.5 at x = 0.5: (1.5)(0.125) - (2.5)(0.25) + 1
    assert keys_kernel(0.5) == pytest.approx(0.5625)
    assert keys_kernel(1.5) == pytest.approx(-0.0625)


def test_bicubic_rows_are_partitions_of_unity():
    for n_in, n_out in [(16, 8), (8, 16), (5, 7), (3, 3)]:
        m = bicubic_matrix(n_in, n_out)
        np.testing.assert_allclose(m.sum(dim=1).numpy(), 1.0, atol=1e-12)


@pytest.mark.parametrize("n_in,n_out", [(16, 8), (8, 16), (12, 9)])
def test_bicubic_reproduces_ramp(n_in, n_out):
    yy, xx = np.meshgrid(np.arange(n_in), np.arange(n_in), indexing="ij")
    ramp = 3.0 + 0.5 * yy - 1.25 * xx
    out = bicubic_resize(torch.tensor(ramp)[None, None], (n_out, n_out))[0, 0].numpy()
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    expected = 3.0 + 0.5 * src[:, None] - 1.25 * src[None, :]
    # cubic convolution reproduces degree-1 polynomials wherever no tap is clamped
    interior = (np.floor(src) - 1 >= 0) & (np.floor(src) + 2 <= n_in - 1)
    np.testing.assert_allclose(out[np.ix_(interior, interior)], expected[np.ix_(interior, interior)], atol=1e-12)


def test_input_checks():
    cfp = small_cfp()
    f_sam, views = small_inputs()
    bad = views[0].clone()
    bad[0, 0, 0, 0] = float("inf")
    with pytest.raises(NonFinite):
        cfp(f_sam, bad, *views[1:])
    with pytest.raises(ChannelMismatch):
        cfp(f_sam, torch.rand(1, 3, 6, 6, dtype=torch.float64), *views[1:])
    with pytest.raises(ChannelMismatch):
        cfp(torch.rand(1, 5, 4, 4, dtype=torch.float64), *views)


def test_parameter_gradient_finite_differences():
    cfp = small_cfp()
    assert count_params(cfp) <= 1000
    f_sam, views = small_inputs()
    err = finite_difference_check(lambda: (cfp(f_sam, *views) ** 2).mean(), list(cfp.parameters()))
    assert err < 1e-3


@pytest.mark.parametrize("which", range(5))
def test_gradient_reaches_every_input(which):
    cfp = small_cfp()
    f_sam, views = small_inputs()
    inputs = [f_sam] + views
    x = inputs[which].clone().requires_grad_(True)
    inputs[which] = x

    def loss():
        return (cfp(*inputs) ** 2).mean()

    err = finite_difference_check(loss, [x])
    assert err < 1e-3
    (g,) = torch.autograd.grad(loss(), [x])
    assert g.abs().sum() > 0
