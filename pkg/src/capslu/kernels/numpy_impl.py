"""Pure-numpy kernel implementations (fallback backend).

Same call signatures and semantics as the numba backend; selection
happens in the package __init__.  These are the reference versions:
vectorized, readable, and used directly when CAPSLU_BACKEND=numpy.
"""

import numpy as np

NAME = "numpy"


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _squash_rows(m):
    sq = np.sum(m * m, axis=1, keepdims=True)
    n = np.sqrt(sq)
    factor = np.where(sq > 0.0, n / (1.0 + sq), 0.0)
    return factor * m


def _squash_rows_backward(x, dy):
    """VJP of row-wise squash at input x, given upstream dy."""
    sq = np.sum(x * x, axis=1, keepdims=True)
    n = np.sqrt(sq)
    safe = sq > 0.0
    h = np.where(safe, n / (1.0 + sq), 0.0)
    # h'(n)/n with h(n) = n/(1+n^2)
    coef = np.where(safe, (1.0 - sq) / ((1.0 + sq) ** 2 * np.where(safe, n, 1.0)), 0.0)
    dots = np.sum(x * dy, axis=1, keepdims=True)
    return h * dy + coef * dots * x


def _softmax_rows_backward(y, dy):
    return y * (dy - np.sum(y * dy, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# dilated 1-D convolution over a padded batch
# ---------------------------------------------------------------------------

def conv_forward(xp, w, b, dilation):
    """xp: (U, Tp, Cin) zero-padded batch; w: (K, Cin, Cout); returns
    z: (U, T, Cout) with T = Tp - (K-1)*dilation."""
    n_u, t_pad, _ = xp.shape
    k = w.shape[0]
    t_out = t_pad - (k - 1) * dilation
    z = np.broadcast_to(b, (n_u, t_out, w.shape[2])).copy()
    for m in range(k):
        off = m * dilation
        z += xp[:, off:off + t_out, :] @ w[m]
    return z


def conv_backward(xp, w, dilation, dz):
    """Gradients of conv_forward: returns (dxp, dw, db)."""
    k = w.shape[0]
    t_out = dz.shape[1]
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for m in range(k):
        off = m * dilation
        sl = xp[:, off:off + t_out, :]
        dw[m] = np.tensordot(sl, dz, axes=([0, 1], [0, 1]))
        dxp[:, off:off + t_out, :] += dz @ w[m].T
    db = dz.sum(axis=(0, 1))
    return dxp, dw, db


# ---------------------------------------------------------------------------
# capsule decoder: forward, routing, backward, margin loss, SGD fit
# ---------------------------------------------------------------------------

def route_forward(u_hat, n_iters):
    """Dynamic routing over prediction vectors u_hat (I, O, Do).

    Returns per-iteration couplings (R, I, O), pre-squash sums
    (R, O, Do) and output capsules (R, O, Do).  The couplings used in
    iteration r are softmax over outputs of the logits accumulated from
    iterations < r; logits start at zero.
    """
    n_in, n_out, _ = u_hat.shape
    blog = np.zeros((n_in, n_out))
    cs = np.empty((n_iters, n_in, n_out))
    souts = np.empty((n_iters, n_out, u_hat.shape[2]))
    vs = np.empty_like(souts)
    for r in range(n_iters):
        c = _softmax_rows(blog)
        s = np.einsum('io,iod->od', c, u_hat)
        v = _squash_rows(s)
        cs[r] = c
        souts[r] = s
        vs[r] = v
        if r < n_iters - 1:
            blog = blog + np.einsum('iod,od->io', u_hat, v)
    return cs, souts, vs


def caps_forward(feats, w_a, b_a, w_d, b_d, w_s, w_r, n_iters):
    """Full decoder forward for one utterance.

    feats: (T, B) encoded frames.  Returns the activation cache
    (alpha, delta, agg, pre, s_caps, u_hat, cs, souts, vs) needed by
    caps_backward; the final output capsules are vs[-1].
    """
    alpha = _sigmoid(feats @ w_a + b_a[0])
    delta = _softmax_rows(feats @ w_d.T + b_d)
    wts = alpha[:, None] * delta
    agg = wts.T @ feats
    pre = agg @ w_s.T
    s_caps = _squash_rows(pre)
    n_in, n_out, d_out, d_prim = w_r.shape
    u_hat = np.matmul(w_r.reshape(n_in, n_out * d_out, d_prim),
                      s_caps[:, :, None]).reshape(n_in, n_out, d_out)
    cs, souts, vs = route_forward(u_hat, n_iters)
    return alpha, delta, agg, pre, s_caps, u_hat, cs, souts, vs


def caps_backward(feats, w_d, w_s, w_r,
                  alpha, delta, agg, pre, s_caps, u_hat, cs, souts, vs, dv):
    """Backprop through the unrolled routing and the attention/distributor
    front end.  dv is dLoss/d(vs[-1]).  Returns gradients
    (dw_a, db_a, dw_d, db_d, dw_s, dw_r)."""
    n_iters = cs.shape[0]
    du = np.zeros_like(u_hat)
    db_next = None
    for r in range(n_iters - 1, -1, -1):
        if r == n_iters - 1:
            dv_r = dv
        else:
            # v_r fed the logit update b_{r+1} = b_r + u_hat . v_r
            dv_r = np.einsum('io,iod->od', db_next, u_hat)
            du += db_next[:, :, None] * vs[r][None, :, :]
        dsout = _squash_rows_backward(souts[r], dv_r)
        dc = np.einsum('od,iod->io', dsout, u_hat)
        du += cs[r][:, :, None] * dsout[None, :, :]
        db_soft = _softmax_rows_backward(cs[r], dc)
        db_next = db_soft if r == n_iters - 1 else db_soft + db_next
    n_in, n_out, d_out, d_prim = w_r.shape
    du2 = du.reshape(n_in, n_out * d_out)
    ds = np.matmul(du2[:, None, :],
                   w_r.reshape(n_in, n_out * d_out, d_prim))[:, 0, :]
    dw_r = (du2[:, :, None] * s_caps[:, None, :]).reshape(w_r.shape)
    dpre = _squash_rows_backward(pre, ds)
    dw_s = dpre.T @ agg
    dagg = dpre @ w_s
    dwts = feats @ dagg.T
    dalpha = np.sum(delta * dwts, axis=1)
    ddelta = alpha[:, None] * dwts
    dlz = _softmax_rows_backward(delta, ddelta)
    dw_d = dlz.T @ feats
    db_d = dlz.sum(axis=0)
    dla = dalpha * alpha * (1.0 - alpha)
    dw_a = feats.T @ dla
    db_a = dla.sum()
    return dw_a, db_a, dw_d, db_d, dw_s, dw_r


def margin_loss_grad(v, target_mask, m_plus, m_minus, lam):
    """Margin loss over output capsule norms plus its gradient wrt v.

    target_mask: (O,) 0/1 array of present labels."""
    norms = np.sqrt(np.sum(v * v, axis=1))
    pos_gap = np.maximum(0.0, m_plus - norms)
    neg_gap = np.maximum(0.0, norms - m_minus)
    t = target_mask.astype(np.float64)
    loss = float(np.sum(t * pos_gap ** 2 + lam * (1.0 - t) * neg_gap ** 2))
    dn = -2.0 * t * pos_gap + 2.0 * lam * (1.0 - t) * neg_gap
    safe = norms > 1e-12
    scale = np.where(safe, dn / np.where(safe, norms, 1.0), 0.0)
    dv = scale[:, None] * v
    return loss, dv


def caps_fit(feat_cat, offsets, target_masks, perms,
             w_a, b_a, w_d, b_d, w_s, w_r,
             n_iters, m_plus, m_minus, lam, lr, loss_tol):
    """Per-sample SGD over the margin loss; parameters updated in place.

    feat_cat: concatenated frames (sum T, B); offsets: (N+1,) int64 row
    offsets; target_masks: (N, O); perms: (E, N) visiting order per epoch.
    Returns (epoch mean losses, epochs run); stops early once the epoch
    mean loss falls below loss_tol.  A non-finite epoch loss stops the
    loop and is left in the loss array for the caller to inspect.
    """
    n_epochs, n_samples = perms.shape
    losses = np.full(n_epochs, np.nan)
    for e in range(n_epochs):
        total = 0.0
        for s in range(n_samples):
            idx = perms[e, s]
            feats = feat_cat[offsets[idx]:offsets[idx + 1]]
            cache = caps_forward(feats, w_a, b_a, w_d, b_d, w_s, w_r, n_iters)
            loss, dv = margin_loss_grad(cache[8][-1], target_masks[idx],
                                        m_plus, m_minus, lam)
            total += loss
            dw_a, db_a, dw_d, db_d, dw_s, dw_r = caps_backward(
                feats, w_d, w_s, w_r, *cache, dv)
            w_a -= lr * dw_a
            b_a[0] -= lr * db_a
            w_d -= lr * dw_d
            b_d -= lr * db_d
            w_s -= lr * dw_s
            w_r -= lr * dw_r
        losses[e] = total / n_samples
        if not np.isfinite(losses[e]):
            return losses, e + 1
        if losses[e] < loss_tol:
            return losses, e + 1
    return losses, n_epochs


def caps_output(feat_cat, offsets, w_a, b_a, w_d, b_d, w_s, w_r, n_iters):
    """Output capsule norms for a batch of utterances: (N, O)."""
    n_samples = offsets.shape[0] - 1
    n_out = w_r.shape[1]
    norms = np.empty((n_samples, n_out))
    for i in range(n_samples):
        feats = feat_cat[offsets[i]:offsets[i + 1]]
        vs = caps_forward(feats, w_a, b_a, w_d, b_d, w_s, w_r, n_iters)[8]
        norms[i] = np.sqrt(np.sum(vs[-1] ** 2, axis=1))
    return norms
