"""numba-compiled kernel implementations (default backend).

Mirrors numpy_impl function-for-function.  Hot loops are explicit so the
JIT can fuse them; the large contractions go through np.dot (BLAS).
First call per signature pays a one-time compile cost, cached on disk.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _sigmoid_vec(x):
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        v = x[t]
        if v >= 0.0:
            out[t] = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            out[t] = e / (1.0 + e)
    return out


@njit(cache=True)
def _softmax_rows(z):
    n, m = z.shape
    out = np.empty_like(z)
    for i in range(n):
        hi = z[i, 0]
        for j in range(1, m):
            if z[i, j] > hi:
                hi = z[i, j]
        tot = 0.0
        for j in range(m):
            e = np.exp(z[i, j] - hi)
            out[i, j] = e
            tot += e
        for j in range(m):
            out[i, j] /= tot
    return out


@njit(cache=True)
def _squash_rows(m):
    n, d = m.shape
    out = np.empty_like(m)
    for i in range(n):
        sq = 0.0
        for j in range(d):
            sq += m[i, j] * m[i, j]
        if sq > 0.0:
            factor = np.sqrt(sq) / (1.0 + sq)
        else:
            factor = 0.0
        for j in range(d):
            out[i, j] = factor * m[i, j]
    return out


@njit(cache=True)
def _squash_rows_backward(x, dy):
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        sq = 0.0
        dot = 0.0
        for j in range(d):
            sq += x[i, j] * x[i, j]
            dot += x[i, j] * dy[i, j]
        if sq > 0.0:
            nn = np.sqrt(sq)
            h = nn / (1.0 + sq)
            coef = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq) * nn)
        else:
            h = 0.0
            coef = 0.0
        for j in range(d):
            out[i, j] = h * dy[i, j] + coef * dot * x[i, j]
    return out


@njit(cache=True)
def _softmax_rows_backward(y, dy):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += y[i, j] * dy[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (dy[i, j] - acc)
    return out


# ---------------------------------------------------------------------------
# dilated 1-D convolution over a padded batch
# ---------------------------------------------------------------------------

@njit(cache=True)
def conv_forward(xp, w, b, dilation):
    n_u, t_pad, c_in = xp.shape
    k, _, c_out = w.shape
    t_out = t_pad - (k - 1) * dilation
    z = np.zeros((n_u, t_out, c_out))
    zflat = z.reshape(n_u * t_out, c_out)
    for m in range(k):
        off = m * dilation
        slab = np.ascontiguousarray(xp[:, off:off + t_out, :]).reshape(n_u * t_out, c_in)
        zflat += np.dot(slab, w[m])
    for u in range(n_u):
        for t in range(t_out):
            for o in range(c_out):
                z[u, t, o] += b[o]
    return z


@njit(cache=True)
def conv_backward(xp, w, dilation, dz):
    n_u, t_pad, c_in = xp.shape
    k, _, c_out = w.shape
    t_out = dz.shape[1]
    dzflat = np.ascontiguousarray(dz).reshape(n_u * t_out, c_out)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    db = np.zeros(c_out)
    for m in range(k):
        off = m * dilation
        slab = np.ascontiguousarray(xp[:, off:off + t_out, :]).reshape(n_u * t_out, c_in)
        dw[m] = np.dot(slab.T, dzflat)
        contrib = np.dot(dzflat, w[m].T).reshape(n_u, t_out, c_in)
        for u in range(n_u):
            for t in range(t_out):
                for c in range(c_in):
                    dxp[u, off + t, c] += contrib[u, t, c]
    for u in range(n_u):
        for t in range(t_out):
            for o in range(c_out):
                db[o] += dz[u, t, o]
    return dxp, dw, db


# ---------------------------------------------------------------------------
# capsule decoder
# ---------------------------------------------------------------------------

@njit(cache=True)
def route_forward(u_hat, n_iters):
    n_in, n_out, d_out = u_hat.shape
    blog = np.zeros((n_in, n_out))
    cs = np.empty((n_iters, n_in, n_out))
    souts = np.empty((n_iters, n_out, d_out))
    vs = np.empty((n_iters, n_out, d_out))
    for r in range(n_iters):
        c = _softmax_rows(blog)
        s = np.zeros((n_out, d_out))
        for i in range(n_in):
            for j in range(n_out):
                cij = c[i, j]
                for d in range(d_out):
                    s[j, d] += cij * u_hat[i, j, d]
        v = _squash_rows(s)
        cs[r] = c
        souts[r] = s
        vs[r] = v
        if r < n_iters - 1:
            for i in range(n_in):
                for j in range(n_out):
                    acc = 0.0
                    for d in range(d_out):
                        acc += u_hat[i, j, d] * v[j, d]
                    blog[i, j] += acc
    return cs, souts, vs


@njit(cache=True)
def caps_forward(feats, w_a, b_a, w_d, b_d, w_s, w_r, n_iters):
    t_len = feats.shape[0]
    n_in = w_d.shape[0]
    alpha = _sigmoid_vec(np.dot(feats, w_a) + b_a[0])
    lz = np.dot(feats, w_d.T)
    for t in range(t_len):
        for i in range(n_in):
            lz[t, i] += b_d[i]
    delta = _softmax_rows(lz)
    wts = np.empty((t_len, n_in))
    for t in range(t_len):
        at = alpha[t]
        for i in range(n_in):
            wts[t, i] = at * delta[t, i]
    agg = np.dot(wts.T, feats)
    pre = np.dot(agg, w_s.T)
    s_caps = _squash_rows(pre)
    n_out = w_r.shape[1]
    d_out = w_r.shape[2]
    d_prim = w_r.shape[3]
    wr2d = w_r.reshape(n_in, n_out * d_out, d_prim)
    u_hat = np.empty((n_in, n_out, d_out))
    u2d = u_hat.reshape(n_in, n_out * d_out)
    for i in range(n_in):
        for q in range(n_out * d_out):
            acc = 0.0
            for p in range(d_prim):
                acc += wr2d[i, q, p] * s_caps[i, p]
            u2d[i, q] = acc
    cs, souts, vs = route_forward(u_hat, n_iters)
    return alpha, delta, agg, pre, s_caps, u_hat, cs, souts, vs


@njit(cache=True)
def _route_backward(u_hat, cs, souts, vs, dv):
    """Backprop through the unrolled routing iterations: dLoss/d(u_hat)."""
    n_iters = cs.shape[0]
    n_in, n_out, d_out = u_hat.shape
    du = np.zeros_like(u_hat)
    db_next = np.zeros((n_in, n_out))
    dv_r = np.empty((n_out, d_out))
    for r in range(n_iters - 1, -1, -1):
        if r == n_iters - 1:
            dv_r = dv.copy()
        else:
            for j in range(n_out):
                for d in range(d_out):
                    acc = 0.0
                    for i in range(n_in):
                        acc += db_next[i, j] * u_hat[i, j, d]
                    dv_r[j, d] = acc
            for i in range(n_in):
                for j in range(n_out):
                    g = db_next[i, j]
                    for d in range(d_out):
                        du[i, j, d] += g * vs[r, j, d]
        dsout = _squash_rows_backward(souts[r], dv_r)
        dc = np.empty((n_in, n_out))
        for i in range(n_in):
            for j in range(n_out):
                acc = 0.0
                for d in range(d_out):
                    acc += dsout[j, d] * u_hat[i, j, d]
                dc[i, j] = acc
                cij = cs[r, i, j]
                for d in range(d_out):
                    du[i, j, d] += cij * dsout[j, d]
        db_soft = _softmax_rows_backward(cs[r], dc)
        if r == n_iters - 1:
            db_next = db_soft
        else:
            db_next = db_soft + db_next
    return du


@njit(cache=True)
def _frontend_grads(feats, alpha, delta, dagg):
    """Gradients of the attention/distributor front end given dLoss/d(agg)."""
    t_len = feats.shape[0]
    n_in = delta.shape[1]
    dwts = np.dot(feats, dagg.T)
    dalpha = np.empty(t_len)
    ddelta = np.empty((t_len, n_in))
    for t in range(t_len):
        acc = 0.0
        at = alpha[t]
        for i in range(n_in):
            acc += delta[t, i] * dwts[t, i]
            ddelta[t, i] = at * dwts[t, i]
        dalpha[t] = acc
    dlz = _softmax_rows_backward(delta, ddelta)
    dw_d = np.dot(dlz.T, feats)
    db_d = np.zeros(n_in)
    for t in range(t_len):
        for i in range(n_in):
            db_d[i] += dlz[t, i]
    dla = np.empty(t_len)
    for t in range(t_len):
        dla[t] = dalpha[t] * alpha[t] * (1.0 - alpha[t])
    dw_a = np.dot(feats.T, dla)
    db_a = 0.0
    for t in range(t_len):
        db_a += dla[t]
    return dw_a, db_a, dw_d, db_d


@njit(cache=True)
def caps_backward(feats, w_d, w_s, w_r,
                  alpha, delta, agg, pre, s_caps, u_hat, cs, souts, vs, dv):
    n_in, n_out, d_out = u_hat.shape
    du = _route_backward(u_hat, cs, souts, vs, dv)
    ds = np.zeros_like(s_caps)
    d_prim = w_r.shape[3]
    wr2d = w_r.reshape(n_in, n_out * d_out, d_prim)
    du2d = du.reshape(n_in, n_out * d_out)
    dw_r = np.empty_like(w_r)
    dwr2d = dw_r.reshape(n_in, n_out * d_out, d_prim)
    for i in range(n_in):
        for q in range(n_out * d_out):
            g = du2d[i, q]
            for p in range(d_prim):
                dwr2d[i, q, p] = g * s_caps[i, p]
                ds[i, p] += wr2d[i, q, p] * g
    dpre = _squash_rows_backward(pre, ds)
    dw_s = np.dot(dpre.T, agg)
    dagg = np.dot(dpre, w_s)
    dw_a, db_a, dw_d, db_d = _frontend_grads(feats, alpha, delta, dagg)
    return dw_a, db_a, dw_d, db_d, dw_s, dw_r


@njit(cache=True)
def _caps_backward_sgd(feats, w_a, b_a, w_d, b_d, w_s, w_r,
                       alpha, delta, agg, pre, s_caps, u_hat, cs, souts, vs,
                       dv, lr):
    """Backward pass with the SGD update applied in place.

    The routing-tensor update is fused into the loop that also produces
    ds, so the full gradient tensor is never materialized; element values
    match caps_backward followed by `w -= lr * dw` exactly.
    """
    n_in, n_out, d_out = u_hat.shape
    du = _route_backward(u_hat, cs, souts, vs, dv)
    ds = np.zeros_like(s_caps)
    d_prim = w_r.shape[3]
    wr2d = w_r.reshape(n_in, n_out * d_out, d_prim)
    du2d = du.reshape(n_in, n_out * d_out)
    for i in range(n_in):
        for q in range(n_out * d_out):
            g = du2d[i, q]
            for p in range(d_prim):
                ds[i, p] += wr2d[i, q, p] * g
                wr2d[i, q, p] -= lr * (g * s_caps[i, p])
    dpre = _squash_rows_backward(pre, ds)
    dw_s = np.dot(dpre.T, agg)
    dagg = np.dot(dpre, w_s)
    dw_a, db_a, dw_d, db_d = _frontend_grads(feats, alpha, delta, dagg)
    w_a -= lr * dw_a
    b_a[0] -= lr * db_a
    w_d -= lr * dw_d
    b_d -= lr * db_d
    w_s -= lr * dw_s


@njit(cache=True)
def margin_loss_grad(v, target_mask, m_plus, m_minus, lam):
    n_out, d_out = v.shape
    loss = 0.0
    dv = np.zeros_like(v)
    for j in range(n_out):
        sq = 0.0
        for d in range(d_out):
            sq += v[j, d] * v[j, d]
        norm = np.sqrt(sq)
        t = target_mask[j]
        pos_gap = m_plus - norm
        if pos_gap < 0.0:
            pos_gap = 0.0
        neg_gap = norm - m_minus
        if neg_gap < 0.0:
            neg_gap = 0.0
        loss += t * pos_gap * pos_gap + lam * (1.0 - t) * neg_gap * neg_gap
        dn = -2.0 * t * pos_gap + 2.0 * lam * (1.0 - t) * neg_gap
        if norm > 1e-12:
            scale = dn / norm
            for d in range(d_out):
                dv[j, d] = scale * v[j, d]
    return loss, dv


@njit(cache=True)
def caps_fit(feat_cat, offsets, target_masks, perms,
             w_a, b_a, w_d, b_d, w_s, w_r,
             n_iters, m_plus, m_minus, lam, lr, loss_tol):
    n_epochs, n_samples = perms.shape
    losses = np.full(n_epochs, np.nan)
    for e in range(n_epochs):
        total = 0.0
        for s in range(n_samples):
            idx = perms[e, s]
            feats = feat_cat[offsets[idx]:offsets[idx + 1]]
            alpha, delta, agg, pre, s_caps, u_hat, cs, souts, vs = caps_forward(
                feats, w_a, b_a, w_d, b_d, w_s, w_r, n_iters)
            loss, dv = margin_loss_grad(vs[n_iters - 1], target_masks[idx],
                                        m_plus, m_minus, lam)
            total += loss
            _caps_backward_sgd(feats, w_a, b_a, w_d, b_d, w_s, w_r,
                               alpha, delta, agg, pre, s_caps, u_hat,
                               cs, souts, vs, dv, lr)
        losses[e] = total / n_samples
        if not np.isfinite(losses[e]):
            return losses, e + 1
        if losses[e] < loss_tol:
            return losses, e + 1
    return losses, n_epochs


@njit(cache=True)
def caps_output(feat_cat, offsets, w_a, b_a, w_d, b_d, w_s, w_r, n_iters):
    n_samples = offsets.shape[0] - 1
    n_out = w_r.shape[1]
    norms = np.empty((n_samples, n_out))
    for i in range(n_samples):
        feats = feat_cat[offsets[i]:offsets[i + 1]]
        vs = caps_forward(feats, w_a, b_a, w_d, b_d, w_s, w_r, n_iters)[8]
        v = vs[n_iters - 1]
        for j in range(n_out):
            sq = 0.0
            for d in range(v.shape[1]):
                sq += v[j, d] * v[j, d]
            norms[i, j] = np.sqrt(sq)
    return norms
