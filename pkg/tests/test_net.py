import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from oracles import fd_gradient_error, weighted_sum
from radiodun.ao import FactorStack, ao_step
from radiodun.net import (
    DRM,
    GDM,
    PMM,
    ChannelAttention,
    InitModule,
    ModelConfig,
    RadioDUN,
    StageBlock,
    count_parameters,
)
from radiodun.objectives import ShadowFactor, total_loss
from radiodun.sampling import SamplingPlan, adjoint, build_plan, sample

D = torch.float64


def toy_inputs(b=2, m=2, h=8, w=8, n=6, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    mask = torch.zeros(b, 1, h, w, dtype=dtype)
    flat = torch.randperm(h * w, generator=g)[:n]
    mask.view(b, -1)[:, flat] = 1
    y_map = mask * torch.rand(b, 1, h, w, generator=g, dtype=dtype)
    env = torch.cat([torch.rand(b, 1, h, w, generator=g, dtype=dtype),
                     (torch.rand(b, m, h, w, generator=g) > 0.7).to(dtype)], dim=1)
    return y_map, mask, env


def toy_model(**kw):
    cfg = dict(K=2, C=4, m=2, unet_depth=2, base_channels=4, H=8, W=8)
    cfg.update(kw)
    torch.manual_seed(0)
    return RadioDUN(ModelConfig(**cfg))


# ------------------------------------------------------------------ config

def test_model_config_rejects_indivisible_and_bad_values():
    with pytest.raises(ValueError):
        ModelConfig(H=30, W=32, unet_depth=3)
    with pytest.raises(ValueError):
        ModelConfig(K=0)
    with pytest.raises(ValueError):
        RadioDUN(ModelConfig(m=0, H=8, W=8))


# --------------------------------------------------------------------- init

def test_init_module_shapes_and_determinism():
    init = InitModule(2, 5).eval()
    y_map, mask, env = toy_inputs()
    stack, x0, v0 = init(y_map, mask, env)
    assert stack.shape == (2, 3, 8, 8) and x0.shape == (2, 1, 8, 8) and v0.shape == (2, 5, 8, 8)
    zeros = [torch.zeros_like(t) for t in (y_map, mask, env)]
    a, b = init(*zeros), init(*zeros)
    for p, q in zip(a, b):
        assert torch.isfinite(p).all()
        assert torch.equal(p, q)


def test_init_module_factors_are_sequential():
    init = InitModule(1, 3).eval()
    y_map, mask, env = toy_inputs(m=1)
    stack, _, _ = init(y_map, mask, env)
    # s_1 is produced from (y, mask, s_0, P_1)
    expected = init.factor_nets[1](torch.cat([y_map, mask, stack[:, :1], env[:, 1:]], dim=1))
    torch.testing.assert_close(stack[:, 1:], expected)


# ---------------------------------------------------------------------- GDM

def test_gdm_zero_scalars_is_identity():
    gdm = GDM(2).double()
    with torch.no_grad():
        gdm.beta.zero_()
        gdm.eps_raw.fill_(-1e3)  # softplus underflows to exactly 0
    assert gdm.eps.item() == 0.0
    stack = torch.randn(2, 3, 8, 8, dtype=D)
    y_map, mask, _ = toy_inputs(dtype=D)
    assert torch.equal(gdm(stack, y_map, mask), stack)


@pytest.mark.parametrize("m", [0, 1, 2])
def test_gdm_matches_classical_step(m):
    rng = np.random.default_rng(m)
    h = w = 8
    plan = SamplingPlan(tuple(sorted(rng.choice(h * w, 12, replace=False).tolist())), h, w)
    y = rng.standard_normal(12)
    factors = [rng.standard_normal((h, w)) for _ in range(m + 1)]
    gdm = GDM(m).double()
    beta = rng.uniform(0.1, 1.0, m + 1)
    with torch.no_grad():
        gdm.beta.copy_(torch.as_tensor(beta))
        gdm.eps_raw.fill_(math.log(math.expm1(0.05)))
    eps = gdm.eps.item()
    want = ao_step(FactorStack(factors), y, plan, beta.tolist(), eps)
    got = gdm(torch.as_tensor(np.stack(factors))[None], torch.as_tensor(adjoint(y, plan))[None, None],
              torch.as_tensor(plan.mask())[None, None])
    for i in range(m + 1):
        assert np.max(np.abs(got[0, i].detach().numpy() - want.factors[i])) <= 1e-10


def test_gdm_beta_gradient_matches_finite_differences():
    gdm = GDM(2, eps=1e-3).double()
    y_map, mask, _ = toy_inputs(b=1, dtype=D)
    stack = torch.randn(1, 3, 8, 8, dtype=D, generator=torch.Generator().manual_seed(1))
    err = fd_gradient_error(gdm, weighted_sum(), (stack, y_map, mask))
    assert err <= 1e-3


def test_gdm_eps_is_non_negative():
    gdm = GDM(1)
    with torch.no_grad():
        gdm.eps_raw.fill_(-50.0)
    assert gdm.eps.item() >= 0


# ---------------------------------------------------------------------- DRM

def test_drm_attention_ranges_and_shapes():
    drm = DRM(2, 6).eval()
    v = torch.randn(2, 6, 8, 8)
    ch = drm.channel_attention(v)
    sp = drm.spatial_attention(v)
    assert ch.shape == (2, 6, 1, 1) and sp.shape == (2, 1, 8, 8)
    assert ((ch > 0) & (ch < 1)).all() and ((sp > 0) & (sp < 1)).all()
    rough, v_new = drm(torch.randn(2, 3, 8, 8), v)
    assert rough.shape == (2, 1, 8, 8) and v_new.shape == (2, 6, 8, 8)


def test_drm_zero_feature_gives_bias_response():
    drm = DRM(1, 3)
    ch = drm.channel_attention(torch.zeros(1, 3, 5, 5))
    torch.testing.assert_close(ch[0, :, 0, 0], torch.sigmoid(drm.channel_fc.bias))


# ---------------------------------------------------------------------- CAM

def test_cam_rows_sum_to_one():
    cam = ChannelAttention(5)
    attn, _ = cam.attention(torch.randn(3, 5, 4, 6))
    assert ((attn > 0) & (attn < 1)).all()
    torch.testing.assert_close(attn.sum(-1), torch.ones(3, 5), atol=1e-6, rtol=0)


def test_cam_single_channel_is_v_path():
    cam = ChannelAttention(1)
    x = torch.randn(2, 1, 4, 4)
    attn, v = cam.attention(x)
    assert torch.equal(attn, torch.ones(2, 1, 1))
    torch.testing.assert_close(cam(x), v.reshape(x.shape))


def identity_cam(channels):
    cam = ChannelAttention(channels).double()
    with torch.no_grad():
        for proj in cam.proj.values():
            point, depth = proj
            point.weight.copy_(torch.eye(channels, dtype=D)[:, :, None, None])
            point.bias.zero_()
            depth.weight.zero_()
            depth.weight[:, 0, 1, 1] = 1.0
            depth.bias.zero_()
    return cam


def test_cam_hand_computed_two_channels():
    vals = [[1.0, 2.0], [3.0, -1.0]]
    x = torch.tensor(vals, dtype=D).reshape(1, 2, 1, 2)
    flat = [v for row in vals for v in row]
    mean = sum(flat) / 4
    std = math.sqrt(sum((v - mean) ** 2 for v in flat) / 4 + 1e-5)
    z = [[(v - mean) / std for v in row] for row in vals]
    logits = [[(z[i][0] * z[j][0] + z[i][1] * z[j][1]) / 2 for j in range(2)] for i in range(2)]
    attn = [[math.exp(l) / sum(math.exp(t) for t in row) for l in row] for row in logits]
    out = [[attn[i][0] * z[0][s] + attn[i][1] * z[1][s] for s in range(2)] for i in range(2)]

    cam = identity_cam(2)
    got_attn, _ = cam.attention(x)
    torch.testing.assert_close(got_attn[0], torch.tensor(attn, dtype=D), atol=1e-12, rtol=0)
    torch.testing.assert_close(cam(x)[0, :, 0, :], torch.tensor(out, dtype=D), atol=1e-12, rtol=0)


# -------------------------------------------------------------- stage block

def test_stage_block_shape_and_zero_ffn_shortcut():
    block = StageBlock(4).eval()
    x = torch.randn(2, 4, 8, 8)
    assert block(x).shape == x.shape
    with torch.no_grad():
        block.ffn[-1].weight.zero_()
        block.ffn[-1].bias.zero_()
    torch.testing.assert_close(block(x), x + block.conv(x) + block.cam(x))


# ---------------------------------------------------------------------- PMM

def test_pmm_shape_and_determinism():
    pmm = PMM(8, 3).eval()
    x = torch.randn(2, 1, 32, 32)
    out = pmm(x)
    assert out.shape == x.shape and torch.isfinite(out).all()
    assert torch.equal(out, pmm(x))


def test_pmm_overfits_single_pair():
    torch.manual_seed(0)
    pmm = PMM(32, 3)
    g = torch.Generator().manual_seed(1)
    rough = torch.rand(1, 1, 32, 32, generator=g)
    target = torch.rand(1, 1, 32, 32, generator=g)
    opt = torch.optim.Adam(pmm.parameters(), lr=1e-3)
    best = math.inf
    for _ in range(500):
        opt.zero_grad()
        loss = ((pmm(rough) - target) ** 2).mean()
        loss.backward()
        opt.step()
        best = min(best, loss.item())
        if best < 1e-5:
            break
    assert best < 1e-5


# ------------------------------------------------------------ full network

def test_forward_shapes_and_history():
    model = toy_model(K=1).eval()
    y_map, mask, env = toy_inputs()
    out = model(y_map, mask, env)
    assert out.x_hat.shape == (2, 1, 8, 8) and out.x_sigma.shape == (2, 1, 8, 8)
    assert len(out.history) == 1 and out.stack.shape == (2, 3, 8, 8)
    assert len(toy_model(K=3)(y_map, mask, env).history) == 3


def test_forward_rejects_bad_shapes():
    model = toy_model()
    y_map, mask, env = toy_inputs()
    with pytest.raises(ValueError):
        model(y_map, mask, env[:, :2])
    with pytest.raises(ValueError):
        model(y_map, mask[:, :, :4], env)
    with pytest.raises(ValueError):
        model(y_map[..., :7, :7], mask[..., :7, :7], env[..., :7, :7])


def test_forward_is_bit_identical_in_eval_mode():
    model = toy_model().eval()
    inputs = toy_inputs()
    a, b = model(*inputs), model(*inputs)
    assert torch.equal(a.x_hat, b.x_hat) and torch.equal(a.x_sigma, b.x_sigma)


def test_output_invariant_to_unsampled_cells():
    model = toy_model().eval()
    _, _, env = toy_inputs(b=1)
    plan = build_plan("uniform_random", 6, 8, 8, seed=2)
    rng = np.random.default_rng(0)
    x1 = rng.random((8, 8))
    x2 = rng.random((8, 8))
    x2.reshape(-1)[list(plan.indices)] = x1.reshape(-1)[list(plan.indices)]
    mask = torch.as_tensor(plan.mask(), dtype=torch.float32)[None, None]
    outs = []
    for x in (x1, x2):
        y_map = torch.as_tensor(adjoint(sample(x, plan), plan), dtype=torch.float32)[None, None]
        outs.append(model(y_map, mask, env).x_hat)
    assert torch.equal(outs[0], outs[1])


def test_parameter_count_is_linear_in_k():
    counts = {k: count_parameters(toy_model(K=k)) for k in (1, 2, 4)}
    per_block = counts[2] - counts[1]
    assert counts[4] - counts[2] == 2 * per_block
    block_params = count_parameters(toy_model(K=1).blocks[0])
    assert per_block == block_params


def test_blocks_do_not_share_parameters():
    model = toy_model(K=2)
    a = {id(p) for p in model.blocks[0].parameters()}
    b = {id(p) for p in model.blocks[1].parameters()}
    assert not a & b


def test_plain_fusion_variant_runs_without_feature():
    model = toy_model(use_drm=False).eval()
    assert model.init.lift is None
    assert model(*toy_inputs()).x_hat.shape == (2, 1, 8, 8)


# -------------------------------------------------------- gradient checks

def _double(module):
    # eval mode: batch statistics of 8x8 toy batches centre some channels exactly on the
    # leaky-rectifier kink, which makes train-mode differences meaningless
    return module.double().eval()


@pytest.mark.parametrize("name", ["init", "drm", "cam", "stage", "pmm", "shadow"])
def test_submodule_gradients_match_finite_differences(name):
    torch.manual_seed(3)
    g = torch.Generator().manual_seed(4)
    y_map, mask, env = toy_inputs(dtype=D)
    if name == "init":
        module, inputs = InitModule(2, 3), (y_map, mask, env)
        loss = lambda out: out[1].sum()  # noqa: E731
    elif name == "drm":
        module, inputs = DRM(2, 3), (torch.randn(2, 3, 8, 8, generator=g, dtype=D),
                                     torch.randn(2, 3, 8, 8, generator=g, dtype=D))
        loss = weighted_sum()
    elif name == "cam":
        module, inputs = ChannelAttention(3), (torch.randn(2, 3, 8, 8, generator=g, dtype=D),)
        loss = weighted_sum()
    elif name == "stage":
        module, inputs = StageBlock(3), (torch.randn(2, 3, 8, 8, generator=g, dtype=D),)
        loss = weighted_sum()
    elif name == "pmm":
        module, inputs = PMM(3, 2), (torch.randn(2, 1, 8, 8, generator=g, dtype=D),)
        loss = weighted_sum()
    else:
        module, inputs = ShadowFactor(2), (torch.randn(2, 3, 8, 8, generator=g, dtype=D),)
        loss = weighted_sum()
    err = fd_gradient_error(_double(module), loss, inputs, max_entries=150)
    assert err <= 1e-3


def test_end_to_end_gradient_on_sampled_parameters():
    model = _double(toy_model(K=1, C=3, base_channels=3))
    y_map, mask, env = toy_inputs(dtype=D)
    target = torch.rand(2, 1, 8, 8, dtype=D, generator=torch.Generator().manual_seed(9))

    def loss(out):
        return total_loss(target, out.x_hat, out.x_sigma)

    err = fd_gradient_error(model, loss, (y_map, mask, env), fraction=0.01)
    assert err <= 1e-3


class _Linear(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([2.0, -3.0], dtype=D))

    def forward(self, x):
        return (self.w * x).sum() ** 2


def test_fd_oracle_on_known_gradient():
    # d/dw (w.x)^2 = 2 (w.x) x, checked against the oracle itself
    m = _Linear()
    x = torch.tensor([1.0, 0.5], dtype=D)
    assert fd_gradient_error(m, lambda out: out, (x,)) <= 1e-8
