"""Central-finite-difference checks at 64-bit: step 1e-4, relative error < 1e-3.

Each check samples a handful of entries from every parameter tensor (every
parameter group is covered) and compares the analytic gradient of a scalar
output against (f(p+eps) - f(p-eps)) / (2 eps).
"""

import numpy as np
import torch

from kprism.configs import EncoderConfig, MoEDecoderConfig
from kprism.decoder import MoECrossAttention, MoEDecoder, MoEFFN
from kprism.encoders import ImageEncoder
from kprism.model import compute_loss
from kprism.prompts import GROUP_CLICK_NEG, GROUP_CLICK_POS, GROUP_DUMMY

EPS = 1e-4
REL_TOL = 1e-3
GRAD_FLOOR = 1e-6  # entries with |grad| below this are numerically meaningless


def check_parameter_grads(f, module, max_entries_per_tensor=4, seed=0, include=None):
    """Compare autograd against central differences for sampled entries."""
    params = [(n, p) for n, p in module.named_parameters() if include is None or include(n)]
    assert params, "module has no parameters to check"
    loss = f()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=False)
    rng = np.random.default_rng(seed)
    checked = 0
    for (name, p), g in zip(params, grads):
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        idxs = rng.choice(flat.numel(), size=min(max_entries_per_tensor, flat.numel()), replace=False)
        for i in idxs:
            orig = flat[i].item()
            flat[i] = orig + EPS
            f_plus = float(f().detach())
            flat[i] = orig - EPS
            f_minus = float(f().detach())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * EPS)
            analytic = gflat[i].item()
            denom = max(abs(numeric), abs(analytic), GRAD_FLOOR)
            assert abs(numeric - analytic) / denom < REL_TOL, (
                f"{name}[{i}]: analytic {analytic:.6e} vs numeric {numeric:.6e}"
            )
            checked += 1
    return checked


def test_encoder_micro_net_gradients():
    torch.manual_seed(0)
    enc = ImageEncoder(EncoderConfig(base_channels=4, input_size=16)).double()
    g = torch.Generator().manual_seed(1)
    x = torch.rand((1, 3, 16, 16), generator=g, dtype=torch.float64)
    weights = [torch.randn_like(torch.empty(1)) for _ in range(3)]
    probes = None

    def f():
        nonlocal probes
        pyr = enc(x)
        if probes is None:
            probes = [torch.randn(lvl.shape, generator=g, dtype=torch.float64) for lvl in pyr.levels]
        return sum((lvl * pr).sum() for lvl, pr in zip(pyr.levels, probes))

    checked = check_parameter_grads(f, enc, max_entries_per_tensor=3)
    assert checked > 30


def test_moe_cross_attention_gradients_m2():
    torch.manual_seed(2)
    mod = MoECrossAttention(width=8, heads=2, num_experts=2).double()
    g = torch.Generator().manual_seed(3)
    q = torch.randn((1, 3, 8), generator=g, dtype=torch.float64)
    k = torch.randn((1, 5, 8), generator=g, dtype=torch.float64)
    v = torch.randn((1, 5, 8), generator=g, dtype=torch.float64)
    probe = torch.randn((1, 3, 8), generator=g, dtype=torch.float64)

    def f():
        out, _, _ = mod(q, k, v)
        return (out * probe).sum()

    check_parameter_grads(f, mod, max_entries_per_tensor=4)


def test_moe_ffn_gradients():
    torch.manual_seed(4)
    mod = MoEFFN(8, 12, 2).double()
    g = torch.Generator().manual_seed(5)
    x = torch.randn((1, 4, 8), generator=g, dtype=torch.float64)
    probe = torch.randn((1, 4, 8), generator=g, dtype=torch.float64)

    def f():
        out, _ = mod(x)
        return (out * probe).sum()

    check_parameter_grads(f, mod, max_entries_per_tensor=4)


def test_masked_attention_with_fallback_rows_gradients():
    torch.manual_seed(6)
    mod = MoECrossAttention(width=8, heads=2, num_experts=2).double()
    g = torch.Generator().manual_seed(7)
    q = torch.randn((1, 3, 8), generator=g, dtype=torch.float64)
    k = torch.randn((1, 4, 8), generator=g, dtype=torch.float64)
    v = torch.randn((1, 4, 8), generator=g, dtype=torch.float64)
    neg = float("-inf")
    # row 0 partially masked, row 1 was fully masked -> fallback all-0, row 2 open
    mask = torch.tensor([[[0.0, neg, 0.0, neg], [0.0, 0.0, 0.0, 0.0], [neg, 0.0, neg, 0.0]]]).double()
    probe = torch.randn((1, 3, 8), generator=g, dtype=torch.float64)

    def f():
        out, _, _ = mod(q, k, v, attn_mask=mask)
        return (out * probe).sum()

    check_parameter_grads(f, mod, max_entries_per_tensor=4)
    # inputs get correct gradients through the masked softmax as well
    q_leaf = q.clone().requires_grad_(True)
    out, _, _ = mod(q_leaf, k, v, attn_mask=mask)
    (out * probe).sum().backward()
    assert torch.isfinite(q_leaf.grad).all()


def test_one_layer_decoder_all_parameter_groups():
    cfg = MoEDecoderConfig(num_layers=1, num_experts=2, heads=2, width=8, scale_order=(0,))
    torch.manual_seed(8)
    dec = MoEDecoder(cfg).double()
    g = torch.Generator().manual_seed(9)
    dense = [torch.randn((1, 8, 4, 4), generator=g, dtype=torch.float64)]
    queries = torch.randn((1, 3, 8), generator=g, dtype=torch.float64)
    groups = torch.tensor([[GROUP_CLICK_POS, GROUP_CLICK_NEG, GROUP_DUMMY]])
    probe = torch.randn((1, 16, 16), generator=g, dtype=torch.float64)

    def f():
        out = dec(
            [dense[0].clone()], queries, groups, None, (16, 16), (0, 0, 0, 0)
        )
        return (out.logits * probe).sum()

    checked = check_parameter_grads(f, dec, max_entries_per_tensor=3)
    assert checked > 40


def test_combined_loss_gradients_from_logits():
    g = torch.Generator().manual_seed(10)
    logits = torch.randn((5, 5), generator=g, dtype=torch.float64, requires_grad=True)
    target = (torch.rand((5, 5), generator=g, dtype=torch.float64) > 0.5).double()

    def f():
        return compute_loss(torch.sigmoid(logits), target).total

    loss = f()
    (grad,) = torch.autograd.grad(loss, logits)
    rng = np.random.default_rng(11)
    flat = logits.data.view(-1)
    for i in rng.choice(25, size=12, replace=False):
        orig = flat[i].item()
        flat[i] = orig + EPS
        f_plus = float(f().detach())
        flat[i] = orig - EPS
        f_minus = float(f().detach())
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * EPS)
        analytic = grad.view(-1)[i].item()
        assert abs(numeric - analytic) / max(abs(numeric), abs(analytic), GRAD_FLOOR) < REL_TOL
