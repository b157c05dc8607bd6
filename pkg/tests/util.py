"""Shared test helpers: finite differences and identity-weight setups."""

import numpy as np
import torch


def finite_difference_check(loss_fn, parameters, rtol, atol=1e-8, h=1e-5,
                            coords_per_tensor=6, seed=0):
    """Compare autograd gradients against central finite differences.

    ``loss_fn`` must be a re-evaluable closure over ``parameters``
    (double precision). A random subset of coordinates per tensor is
    probed; asserts |ad - fd| <= atol + rtol * |fd| everywhere.
    """
    params = [p for p in parameters if p.requires_grad]
    assert params, "nothing to check"
    for p in params:
        assert p.dtype == torch.float64, "run gradient checks in double precision"
        p.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    checked = 0
    for p in params:
        flat = p.detach().reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else torch.zeros_like(flat)
        k = min(coords_per_tensor, flat.numel())
        idxs = rng.choice(flat.numel(), size=k, replace=False)
        for i in idxs:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            fd = (up - down) / (2 * h)
            ad = grad[i].item()
            assert abs(ad - fd) <= atol + rtol * abs(fd), (
                f"gradient mismatch at {tuple(p.shape)}[{i}]: "
                f"autograd={ad:.10g} fd={fd:.10g}"
            )
            checked += 1
    return checked


def identity_scale_attention(attn, value_broadcast=True):
    """Set a ScaleAttention module's projections to identity-style weights.

    Q/K become identity maps, the value projection broadcasts the raw
    mask scalar across the embedding, and the output projection is
    replaced by head averaging (out_proj=None semantics are handled by
    callers that use scaled_attention directly).
    """
    c = attn.channels
    with torch.no_grad():
        attn.q_proj.weight.copy_(torch.eye(c))
        attn.k_proj.weight.copy_(torch.eye(c))
        if value_broadcast:
            attn.value_proj.weight.fill_(1.0)
    return attn
