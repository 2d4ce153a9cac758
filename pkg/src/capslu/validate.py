"""Self-check suite behind the `validate` subcommand.

Runs the gradient oracles, normalization invariants, the hand-computable
routing instance, format round-trips and protocol arithmetic; every check
returns (name, ok, detail) so the CLI can print one line per check and
exit nonzero on any failure.  The whole suite is sized to finish well
under a minute.
"""

import os
import tempfile

import numpy as np

from . import capsule, corpus, encoder, harness, kernels
from .nncore import Rng, grad_check, sigmoid, softmax, squash


def flatten_capsule_params(p: capsule.CapsuleParams) -> np.ndarray:
    return np.concatenate([p.w_a, [p.b_a], p.w_d.ravel(), p.b_d,
                           p.w_s.ravel(), p.w_r.ravel()])


def unflatten_capsule_params(theta: np.ndarray,
                             cfg: capsule.CapsuleConfig) -> capsule.CapsuleParams:
    b, i, pp, o, do = (cfg.bnf_dim, cfg.n_primary, cfg.d_primary,
                       cfg.n_output, cfg.d_output)
    pos = 0

    def take(n, shape=None):
        nonlocal pos
        out = theta[pos:pos + n]
        pos += n
        return np.ascontiguousarray(out.reshape(shape)) if shape else out.copy()

    return capsule.CapsuleParams(
        config=cfg,
        w_a=take(b), b_a=float(take(1)[0]),
        w_d=take(i * b, (i, b)), b_d=take(i),
        w_s=take(pp * b, (pp, b)),
        w_r=take(i * o * do * pp, (i, o, do, pp)))


def capsule_loss_fn(feats, targets, cfg):
    def loss(theta):
        p = unflatten_capsule_params(theta, cfg)
        act = capsule.forward(p, feats)
        return capsule.margin_loss(act.v_caps, targets, cfg)
    return loss


def capsule_grad_error(seed: int, t_len: int = 4) -> float:
    cfg = capsule.CapsuleConfig(n_output=2, bnf_dim=5, n_primary=2,
                                d_primary=3, d_output=2, routing_iters=3)
    rng = Rng(seed)
    p = capsule.init_capsule_params(cfg, rng.child(1))
    p.b_a = 0.1
    p.b_d = rng.child(2).normal(size=cfg.n_primary, scale=0.3)
    feats = rng.child(3).normal(size=(t_len, cfg.bnf_dim))
    targets = {0}
    cache = kernels.caps_forward(
        np.ascontiguousarray(feats), p.w_a, np.array([p.b_a]), p.w_d, p.b_d,
        p.w_s, p.w_r, cfg.routing_iters)
    mask = np.zeros(cfg.n_output)
    mask[0] = 1.0
    _, dv = kernels.margin_loss_grad(
        np.ascontiguousarray(cache[8][-1]), mask, cfg.margin_plus,
        cfg.margin_minus, cfg.lambda_neg)
    g = kernels.caps_backward(np.ascontiguousarray(feats), p.w_d, p.w_s, p.w_r,
                              *cache, np.ascontiguousarray(dv))
    analytic = np.concatenate([g[0], [g[1]], g[2].ravel(), g[3],
                               g[4].ravel(), g[5].ravel()])
    err, _ = grad_check(capsule_loss_fn(feats, targets, cfg),
                        flatten_capsule_params(p), analytic, 1e-5)
    return err


def flatten_encoder_params(p: encoder.EncoderParams) -> np.ndarray:
    parts = []
    for w, b in p.layers:
        parts.extend([w.ravel(), b])
    parts.extend([p.w_out.ravel(), p.b_out])
    if p.embeddings is not None:
        parts.append(p.embeddings.ravel())
    return np.concatenate(parts)


def assign_encoder_params(p: encoder.EncoderParams, theta: np.ndarray) -> None:
    pos = 0
    for w, b in p.layers:
        w[...] = theta[pos:pos + w.size].reshape(w.shape)
        pos += w.size
        b[...] = theta[pos:pos + b.size]
        pos += b.size
    p.w_out[...] = theta[pos:pos + p.w_out.size].reshape(p.w_out.shape)
    pos += p.w_out.size
    p.b_out[...] = theta[pos:pos + p.b_out.size]
    pos += p.b_out.size
    if p.embeddings is not None:
        p.embeddings[...] = theta[pos:].reshape(p.embeddings.shape)


def encoder_grad_error(seed: int, with_embedding: bool = False) -> float:
    cfg = encoder.EncoderConfig(
        input_dim=4, n_phone_targets=3, n_layers=2, hidden_dim=6, bnf_dim=5,
        context=((3, 2), (3, 4)),
        speaker_embedding_dim=2 if with_embedding else 0)
    rng = Rng(seed)
    params = encoder.init_params(cfg, rng.child(1))
    urng = rng.child(2)
    utts = []
    for k in range(2):
        t = 7 + k
        utts.append(corpus.Utterance(
            utt_id=f"u{k}", speaker_id=f"s{k}",
            features=urng.normal(size=(t, cfg.input_dim)),
            phone_alignment=urng.integers(0, cfg.n_phone_targets, t)))
    if with_embedding:
        params.embedding_speakers = ["s0", "s1"]
        params.embeddings = rng.child(3).normal(size=(2, 2), scale=0.3)
    ce, _n, layer_grads, dw_out, db_out, demb = encoder.loss_and_grads(
        params, utts, cfg)
    parts = []
    for dw, db in layer_grads:
        parts.extend([dw.ravel(), db])
    parts.extend([dw_out.ravel(), db_out])
    if with_embedding:
        parts.append(np.vstack([demb["s0"], demb["s1"]]).ravel())
    analytic = np.concatenate(parts)
    scratch = params.copy()

    def loss(theta):
        assign_encoder_params(scratch, theta)
        ce2, _, _, _, _, _ = encoder.loss_and_grads(scratch, utts, cfg)
        return ce2

    err, _ = grad_check(loss, flatten_encoder_params(params), analytic, 1e-5)
    return err


def reference_routing(u_hat: np.ndarray, n_iters: int):
    """Independent step-by-step routing-by-agreement reference.

    Written against the published update rule, deliberately scalar and
    separate from the kernel implementations."""
    n_in, n_out, d_out = u_hat.shape
    blog = [[0.0] * n_out for _ in range(n_in)]
    coups = None
    v = None
    for _r in range(n_iters):
        coups = []
        for i in range(n_in):
            mx = max(blog[i])
            exps = [np.exp(x - mx) for x in blog[i]]
            tot = sum(exps)
            coups.append([x / tot for x in exps])
        v = []
        for j in range(n_out):
            s = [0.0] * d_out
            for i in range(n_in):
                for d in range(d_out):
                    s[d] += coups[i][j] * u_hat[i, j, d]
            sq = sum(x * x for x in s)
            factor = (np.sqrt(sq) / (1.0 + sq)) if sq > 0 else 0.0
            v.append([factor * x for x in s])
        if _r < n_iters - 1:
            for i in range(n_in):
                for j in range(n_out):
                    blog[i][j] += sum(u_hat[i, j, d] * v[j][d]
                                      for d in range(d_out))
    return np.array(v), np.array(coups)


def make_agreement_instance():
    """2-primary x 2-output instance where capsule 0 agrees only with
    output 0: its prediction is fixed, the other capsule predicts zero."""
    u_hat = np.zeros((2, 2, 2))
    u_hat[0, 0] = (0.8, 0.0)
    u_hat[0, 1] = (0.0, 0.0)
    u_hat[1, 0] = (0.8, 0.0)
    u_hat[1, 1] = (0.0, 0.0)
    return u_hat


def _check(name, fn):
    try:
        ok, detail = fn()
    except Exception as e:  # noqa: BLE001 - report, do not crash the suite
        return (name, False, f"exception: {e}")
    return (name, ok, detail)


def run_self_checks(n_random_passes: int = 200):
    checks = []

    def c_nonlin():
        ok = (np.allclose(squash(np.array([3.0, 0.0])), [0.9, 0.0])
              and abs(sigmoid(np.log(3.0)) - 0.75) < 1e-15
              and np.allclose(softmax(np.array([0.0, np.log(3.0)])),
                              [0.25, 0.75]))
        return ok, "squash/sigmoid/softmax hand values"
    checks.append(_check("nonlinearities", c_nonlin))

    def c_rng():
        a, b = Rng(12345), Rng(12345)
        ok = np.array_equal(a._block_u64(100000), b._block_u64(100000))
        return ok, "identical seeds give identical draws"
    checks.append(_check("rng-reproducibility", c_rng))

    def c_caps_grad():
        worst = max(capsule_grad_error(seed) for seed in (0, 1, 2))
        return worst < 1e-4, f"max rel err {worst:.2e} (tol 1e-4)"
    checks.append(_check("capsule-gradients", c_caps_grad))

    def c_enc_grad():
        worst = max(encoder_grad_error(seed) for seed in (0, 1, 2))
        return worst < 1e-4, f"max rel err {worst:.2e} (tol 1e-4)"
    checks.append(_check("encoder-gradients", c_enc_grad))

    def c_invariants():
        cfg = capsule.CapsuleConfig(n_output=5, bnf_dim=8, n_primary=4,
                                    d_primary=6, d_output=3)
        rng = Rng(99)
        worst = 0.0
        for k in range(n_random_passes):
            p = capsule.init_capsule_params(cfg, rng.child(k))
            feats = rng.child(k, 1).normal(size=(6, cfg.bnf_dim))
            act = capsule.forward(p, feats)
            worst = max(worst,
                        float(np.abs(act.delta.sum(axis=1) - 1.0).max()),
                        float(np.abs(act.couplings.sum(axis=1) - 1.0).max()))
            if not (np.all(act.alpha > 0) and np.all(act.alpha < 1)):
                return False, "attention left (0,1)"
            if np.linalg.norm(act.s_caps, axis=1).max() >= 1.0:
                return False, "primary capsule norm >= 1"
            if np.linalg.norm(act.v_caps, axis=1).max() >= 1.0:
                return False, "output capsule norm >= 1"
        return worst < 1e-12, f"row sums within {worst:.1e} of 1 (tol 1e-12)"
    checks.append(_check("normalization-invariants", c_invariants))

    def c_routing_oracle():
        rng = Rng(4)
        u_random = rng.normal(size=(3, 4, 2), scale=0.7)
        for n_iters in (1, 2, 3):
            for u in (u_random, make_agreement_instance()):
                cs, _s, vs = kernels.route_forward(
                    np.ascontiguousarray(u), n_iters)
                v_ref, c_ref = reference_routing(u, n_iters)
                if not (np.array_equal(vs[-1], v_ref)
                        and np.array_equal(cs[-1], c_ref)):
                    return False, f"mismatch at {n_iters} iterations"
        agreeing = []
        for n_iters in (1, 2, 3):
            _v, c = reference_routing(make_agreement_instance(), n_iters)
            agreeing.append(c[0][0])
        ok = agreeing[0] < agreeing[1] < agreeing[2] and agreeing[0] == 0.5
        return ok, f"agreeing coupling {[f'{x:.4f}' for x in agreeing]}"
    checks.append(_check("routing-oracle", c_routing_oracle))

    def c_formats():
        from . import formats
        with tempfile.TemporaryDirectory() as td:
            rng = Rng(11)
            recs = [(f"utt{i}", rng.normal(size=(4, 3)).astype(np.float32)
                     .astype(np.float64)) for i in range(5)]
            path = os.path.join(td, "x.bnf")
            formats.write_bnf_archive(recs, path)
            back = formats.read_bnf_archive(path)
            if not all(a == b[0] and np.array_equal(m, b[1])
                       for (a, m), b in zip(recs, back)):
                return False, "archive round-trip mismatch"
            with open(path, "r+b") as fh:
                fh.write(b"XXXX")
            try:
                formats.read_bnf_archive(path)
                return False, "corrupt magic accepted"
            except formats.FormatError:
                pass
            c = corpus.synth_task_corpus(n_commands=4, repetitions_per_command=3,
                                         is_assignment=[("a", 90.0), ("b", 60.0)],
                                         seed=3, min_cmds_per_speaker=2)
            formats.write_corpus(c, td, "c")
            c2 = formats.read_corpus(td, "c")
            same = (len(c2.utterances) == len(c.utterances)
                    and all(u1.slot_labels == u2.slot_labels
                            and np.array_equal(u1.phone_alignment,
                                               u2.phone_alignment)
                            for u1, u2 in zip(c.utterances, c2.utterances)))
            return same, "archive + corpus round-trips, corrupt magic rejected"
    checks.append(_check("formats", c_formats))

    def c_protocol():
        rng = Rng(5)
        blocks = corpus.block_split(list(range(30)), 15, rng)
        if sorted(len(b) for b in blocks) != [2] * 15:
            return False, "30/15 split not fifteen blocks of 2"
        union = sorted(x for b in blocks for x in b)
        if union != list(range(30)):
            return False, "blocks are not a partition"
        items = [(np.zeros((3, 2)), {0}, i % 4) for i in range(12)]
        tr, te = harness.low_resource_split(items, rng)
        counts = {}
        for i in tr:
            counts[items[i][2]] = counts.get(items[i][2], 0) + 1
        ok = (all(v == 2 for v in counts.values())
              and not set(tr) & set(te)
              and len(tr) + len(te) == len(items))
        return ok, "block partition + low-resource split contracts"
    checks.append(_check("protocols", c_protocol))

    def c_micro_f1():
        rng = Rng(21)
        preds, gold = [], []
        for _ in range(2000):
            preds.append({int(x) for x in rng.integers(0, 9, int(rng.integers(0, 4)))})
            gold.append({int(x) for x in rng.integers(0, 9, int(rng.integers(0, 4)))})
        tp = sum(len(p & g) for p, g in zip(preds, gold))
        fp = sum(len(p - g) for p, g in zip(preds, gold))
        fn = sum(len(g - p) for p, g in zip(preds, gold))
        ref = 1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        got = harness.micro_f1(preds, gold)
        return got == ref, f"micro F1 {got:.6f} matches pooled-count reference"
    checks.append(_check("micro-f1", c_micro_f1))

    def c_speed_perturb():
        c = corpus.synth_pretrain_corpus(
            severity_strata=[(100.0, 100.0, 1)], utts_per_speaker=1, seed=2)
        u = c.utterances[0]
        same = corpus.speed_perturb(u, 1.0)
        if not np.array_equal(same.features, u.features):
            return False, "ratio 1.0 is not the identity"
        slow = corpus.speed_perturb(u, 0.9)
        want = int(np.floor(u.n_frames / 0.9 + 0.5))
        return slow.n_frames == want, "resampling identity + frame counts"
    checks.append(_check("speed-perturb", c_speed_perturb))

    return checks
