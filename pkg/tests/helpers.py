"""Shared test utilities: finite-difference gradients and naive references."""

import numpy as np

from gridsight import tensor as T


def numeric_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar-valued f at x, elementwise."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = f(x)
        flat[i] = saved - eps
        lo = f(x)
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray,
                       rtol: float = 1e-3, atol: float = 1e-6) -> None:
    diff = np.abs(analytic - numeric)
    bound = atol + rtol * np.abs(numeric)
    worst = (diff - bound).max()
    assert np.all(diff <= bound), (
        f"gradient mismatch: worst excess {worst:.3e}, "
        f"analytic range [{analytic.min():.4f}, {analytic.max():.4f}]")


def check_grad(build_loss, arrays: dict, eps: float = 1e-4,
               rtol: float = 1e-3, atol: float = 1e-6) -> None:
    """Compare tape gradients of build_loss against finite differences.

    build_loss takes a dict name -> Tensor and returns a scalar loss Tensor;
    arrays maps the same names to float64 numpy values. Every entry is treated
    as differentiable.
    """
    tensors = {k: T.Tensor(v.astype(np.float64), requires_grad=True)
               for k, v in arrays.items()}
    loss = build_loss(tensors)
    loss.backward()
    for name, arr in arrays.items():
        def scalar_f(x, _name=name):
            probe = {k: T.Tensor(v.astype(np.float64), requires_grad=False)
                     for k, v in arrays.items()}
            probe[_name] = T.Tensor(x, requires_grad=False)
            with T.no_grad():
                return float(build_loss(probe).data)
        num = numeric_grad(scalar_f, arr.astype(np.float64), eps=eps)
        ana = tensors[name].grad
        assert ana is not None, f"no gradient recorded for {name}"
        assert_grads_close(ana, num, rtol=rtol, atol=atol)


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                 sh: int, sw: int) -> np.ndarray:
    """Six-loop valid cross-correlation reference, deliberately dumb."""
    bsz, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    oh = (h - kh) // sh + 1
    ow = (wd - kw) // sw + 1
    out = np.zeros((bsz, k, oh, ow), dtype=np.float64)
    for n in range(bsz):
        for f in range(k):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            acc += np.dot(x[n, :, i * sh + di, j * sw + dj],
                                          w[f, :, di, dj])
                    out[n, f, i, j] = acc + b[f]
    return out


def maxpool_naive(x: np.ndarray, ph: int, pw: int, sh: int, sw: int) -> np.ndarray:
    bsz, c, h, wd = x.shape
    oh = (h - ph) // sh + 1
    ow = (wd - pw) // sw + 1
    out = np.zeros((bsz, c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = x[:, :, i * sh:i * sh + ph, j * sw:j * sw + pw].max(axis=(2, 3))
    return out


def matmul_naive(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def well_separated(rng: np.random.Generator, shape, gap: float = 0.1) -> np.ndarray:
    """Random array whose values differ pairwise by >= gap (safe for pooling
    and ReLU finite-difference checks, where near-ties break the oracle)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2.0 + 0.5) * gap
    return vals.reshape(shape).astype(np.float64)
