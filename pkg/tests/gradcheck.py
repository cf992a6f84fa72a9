"""Central finite-difference gradient checks for test use."""

import torch


def fd_gradients(fn, tensor, eps=1e-5):
    """Per-coordinate central differences of a scalar function of one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a, b, floor=1e-10):
    scale = max(float(a.abs().max()), float(b.abs().max()), floor)
    return float((a - b).abs().max()) / scale


def check_gradients(fn, tensors, rtol=1e-4, eps=1e-5):
    """Compare autograd gradients of fn() against central finite differences.

    tensors must be float64 leaves with requires_grad=True appearing in fn's
    graph. Returns the worst relative error across tensors.
    """
    loss = fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=False)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        fd = fd_gradients(fn, tensor, eps=eps)
        err = relative_error(grad, fd)
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch {err:.3e} >= {rtol} for tensor of shape {tuple(tensor.shape)}"
    return worst


def check_directional_gradients(fn, tensors, n_dirs=4, rtol=1e-4, eps=1e-5, seed=0):
    """Directional-derivative finite-difference check for large parameter sets."""
    gen = torch.Generator().manual_seed(seed)
    loss = fn()
    analytic = torch.autograd.grad(loss, tensors)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        dirs = [d / d.norm() for d in dirs]
        proj = sum(float((g * d).sum()) for g, d in zip(analytic, dirs))
        with torch.no_grad():
            for t, d in zip(tensors, dirs):
                t += eps * d
            up = float(fn())
            for t, d in zip(tensors, dirs):
                t -= 2 * eps * d
            down = float(fn())
            for t, d in zip(tensors, dirs):
                t += eps * d
        fd = (up - down) / (2 * eps)
        err = abs(proj - fd) / max(abs(proj), abs(fd), 1e-10)
        worst = max(worst, err)
        assert err < rtol, f"directional gradient mismatch {err:.3e} >= {rtol}"
    return worst
