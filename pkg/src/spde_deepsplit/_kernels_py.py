"""Pure numpy implementation of the hot network kernels.

This is the fallback used when the compiled ``_kernels`` extension is not
available, and the readable statement of what the extension computes.  Both
modules expose the same functions with the same argument conventions:

``lay`` is a :class:`spde_deepsplit.nn.ParamLayout` (only its integer offset
arrays and flags are read), ``theta`` a flat float64 parameter vector and
``X`` a C-contiguous ``(J, d)`` float64 batch.
"""

import numpy as np

BACKEND = "python"


def _affine(theta, lay, i, A):
    k, l = lay.sizes[i], lay.sizes[i + 1]
    w = theta[lay.w_off[i]:lay.w_off[i] + l * k].reshape(l, k)
    b = theta[lay.b_off[i]:lay.b_off[i] + l]
    return A @ w.T + b, w


def _bn_params(theta, lay, s):
    f = lay.site_dims[s]
    return (theta[lay.sc_off[s]:lay.sc_off[s] + f],
            theta[lay.sh_off[s]:lay.sh_off[s] + f])


def forward_train(theta, lay, X, eps):
    """Batch-statistics forward pass.

    Returns ``(out, cache)`` where ``cache`` holds everything the backward
    pass needs, including per-site batch means and (biased) variances.
    """
    L = lay.n_layers
    cache = {"A": [], "xhat": [], "inv_std": [], "mean": [], "var": [], "W": []}
    A = X
    if lay.batch_norm:
        A = _bn_train_site(theta, lay, 0, A, eps, cache)
    cache["A"].append(A)
    for i in range(L):
        P, W = _affine(theta, lay, i, A)
        cache["W"].append(W)
        if i == L - 1:
            return P[:, 0].copy(), cache
        if lay.batch_norm:
            P = _bn_train_site(theta, lay, i + 1, P, eps, cache)
        A = np.tanh(P)
        cache["A"].append(A)


def _bn_train_site(theta, lay, s, P, eps, cache):
    mean = P.mean(axis=0)
    centered = P - mean
    var = np.mean(centered * centered, axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    scale, shift = _bn_params(theta, lay, s)
    cache["xhat"].append(xhat)
    cache["inv_std"].append(inv_std)
    cache["mean"].append(mean)
    cache["var"].append(var)
    return xhat * scale + shift


def backward_train(theta, lay, cache, upstream):
    """Parameter gradient of ``sum_j upstream[j] * out[j]`` with full BN backprop."""
    L = lay.n_layers
    grad = np.zeros_like(theta)
    dP = upstream.reshape(-1, 1)
    for i in range(L - 1, -1, -1):
        k, l = lay.sizes[i], lay.sizes[i + 1]
        A_prev = cache["A"][i]
        grad[lay.w_off[i]:lay.w_off[i] + l * k] = (dP.T @ A_prev).ravel()
        grad[lay.b_off[i]:lay.b_off[i] + l] = dP.sum(axis=0)
        if i == 0 and not lay.batch_norm:
            break
        dA = dP @ cache["W"][i]
        if i > 0:
            dQ = dA * (1.0 - A_prev * A_prev)
        else:
            dQ = dA
        if lay.batch_norm:
            xhat, inv_std = cache["xhat"][i], cache["inv_std"][i]
            scale, _ = _bn_params(theta, lay, i)
            f = lay.site_dims[i]
            grad[lay.sc_off[i]:lay.sc_off[i] + f] = np.sum(dQ * xhat, axis=0)
            grad[lay.sh_off[i]:lay.sh_off[i] + f] = dQ.sum(axis=0)
            if i == 0:
                break
            dxhat = dQ * scale
            dP = inv_std * (dxhat - dxhat.mean(axis=0)
                            - xhat * np.mean(dxhat * xhat, axis=0))
        else:
            dP = dQ
    return grad


def _stats(cache, lay):
    if not lay.batch_norm:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(cache["mean"]), np.concatenate(cache["var"])


def param_grad(theta, lay, X, upstream, eps):
    """Returns ``(out, grad, batch_mean, batch_var)`` for explicit upstream weights."""
    out, cache = forward_train(theta, lay, X, eps)
    grad = backward_train(theta, lay, cache, upstream)
    return (out, grad) + _stats(cache, lay)


def loss_grad(theta, lay, X, y, eps):
    """Mean-squared regression loss against ``y`` and its parameter gradient.

    Returns ``(loss, grad, out, batch_mean, batch_var)``.
    """
    out, cache = forward_train(theta, lay, X, eps)
    resid = out - y
    loss = float(np.mean(resid * resid))
    grad = backward_train(theta, lay, cache, (2.0 / len(y)) * resid)
    bmean, bvar = _stats(cache, lay)
    return loss, grad, out, bmean, bvar


def infer(theta, lay, run_mean, run_var, X, eps, want_grad, batch_stats=False):
    """Running-statistics forward pass over a batch of points.

    Returns ``(out, dX)``; ``dX`` is the per-row input gradient, or ``None``
    when ``want_grad`` is false.  With ``batch_stats`` each site is normalized
    by the batch's own (biased) mean and variance instead, which are written
    into ``run_mean``/``run_var`` and held fixed for the gradient.
    """
    L = lay.n_layers
    acts, mults = [], []
    A = X
    if lay.batch_norm:
        A, mult = _bn_infer_site(theta, lay, 0, A, run_mean, run_var, eps, batch_stats)
        mults.append(mult)
    Ws = []
    for i in range(L):
        P, W = _affine(theta, lay, i, A)
        Ws.append(W)
        if i == L - 1:
            out = P[:, 0].copy()
            break
        if lay.batch_norm:
            P, mult = _bn_infer_site(theta, lay, i + 1, P, run_mean, run_var, eps, batch_stats)
            mults.append(mult)
        A = np.tanh(P)
        acts.append(A)
    if not want_grad:
        return out, None
    dA = np.repeat(Ws[L - 1], X.shape[0], axis=0)
    for i in range(L - 2, -1, -1):
        A = acts[i]
        dQ = dA * (1.0 - A * A)
        if lay.batch_norm:
            dQ = dQ * mults[i + 1]
        dA = dQ @ Ws[i]
    if lay.batch_norm:
        dA = dA * mults[0]
    return out, dA


def _bn_infer_site(theta, lay, s, P, run_mean, run_var, eps, batch_stats=False):
    o, f = lay.st_off[s], lay.site_dims[s]
    if batch_stats:
        run_mean[o:o + f] = P.mean(axis=0)
        run_var[o:o + f] = P.var(axis=0)
    scale, shift = _bn_params(theta, lay, s)
    mult = scale / np.sqrt(run_var[o:o + f] + eps)
    return (P - run_mean[o:o + f]) * mult + shift, mult


def adam_update(theta, m, v, grad, lr, beta1, beta2, eps, step):
    """In-place Adam update; ``step`` is the 1-based count used for bias correction."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    denom = np.sqrt(np.abs(v) / (1.0 - beta2 ** step)) + eps
    theta -= (lr / (1.0 - beta1 ** step)) * m / denom
