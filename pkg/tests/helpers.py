"""Shared test oracles: central finite differences against tape gradients."""

import numpy as np

from doughlab import autodiff as ad


def finite_diff(f, xs, h=1e-6):
    """Central-difference gradient of scalar f(*xs) w.r.t. each array in xs."""
    grads = []
    for k, x in enumerate(xs):
        g = np.zeros_like(x, dtype=np.float64)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*xs)
            flat[i] = orig - h
            fm = f(*xs)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def tape_grads(build_loss, xs):
    """Run build_loss(*tensors) under a tape and return (loss, grads)."""
    tensors = [ad.Tensor(x.copy(), requires_grad=True) for x in xs]
    with ad.Tape() as tape:
        loss = build_loss(*tensors)
    tape.backward(loss)
    return loss.data, [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def check_grads(build_loss, xs, h=1e-6, tol=1e-6):
    """Assert tape gradients match central differences to relative error tol."""
    _, gs = tape_grads(build_loss, xs)

    def scalar_f(*arrays):
        ts = [ad.Tensor(a) for a in arrays]
        return float(build_loss(*ts).data)

    fd = finite_diff(scalar_f, [x.copy() for x in xs], h=h)
    for g, gf in zip(gs, fd):
        err = rel_err(g, gf)
        assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol}"
