"""Capsule-network slot decoder.

Encoded frames are softly filtered by a per-frame attention gate,
assigned to primary capsules by a per-frame softmax distributor, and
aggregated into primary capsule vectors through a shared squash-layer
projection.  A second layer maps primary capsules to one output capsule
per slot label via dynamic routing; an output capsule's norm is the
probability that its label is present.  Training minimizes a margin
loss on those norms, with gradients flowing through the unrolled
routing iterations.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .nncore import Rng, assert_finite, sigmoid, softmax, squash_rows


@dataclass
class CapsuleConfig:
    n_output: int
    bnf_dim: int
    n_primary: int = 32
    d_primary: int = 64
    d_output: int = 8
    routing_iters: int = 3
    detect_threshold: float = 0.5
    margin_plus: float = 0.9
    margin_minus: float = 0.1
    lambda_neg: float = 0.5
    learning_rate: float = 0.01
    n_epochs: int = 200
    loss_tol: float = 1e-4

    def __post_init__(self):
        if self.routing_iters < 1:
            raise ValueError("routing_iters must be >= 1")
        if not (self.margin_minus < self.margin_plus):
            raise ValueError("margin_minus must be below margin_plus")
        if not (0.0 < self.detect_threshold < 1.0):
            raise ValueError("detect_threshold must lie in (0, 1)")


@dataclass
class CapsuleParams:
    config: CapsuleConfig
    w_a: np.ndarray
    b_a: float
    w_d: np.ndarray
    b_d: np.ndarray
    w_s: np.ndarray
    w_r: np.ndarray
    train_losses: np.ndarray | None = None

    def copy(self) -> "CapsuleParams":
        return CapsuleParams(self.config, self.w_a.copy(), self.b_a,
                             self.w_d.copy(), self.b_d.copy(),
                             self.w_s.copy(), self.w_r.copy())


@dataclass
class CapsuleActivations:
    alpha: np.ndarray      # (T,) attention weights
    delta: np.ndarray      # (T, n_primary) distributor rows
    s_caps: np.ndarray     # (n_primary, d_primary) primary capsules
    v_caps: np.ndarray     # (n_output, d_output) output capsules
    couplings: np.ndarray  # (n_primary, n_output) routing coefficients


def init_capsule_params(config: CapsuleConfig, rng: Rng) -> CapsuleParams:
    b = config.bnf_dim
    return CapsuleParams(
        config=config,
        w_a=rng.normal(size=b, scale=1.0 / np.sqrt(b)),
        b_a=0.0,
        w_d=rng.normal(size=(config.n_primary, b), scale=1.0 / np.sqrt(b)),
        b_d=np.zeros(config.n_primary),
        w_s=rng.normal(size=(config.d_primary, b), scale=1.0 / np.sqrt(b)),
        w_r=rng.normal(
            size=(config.n_primary, config.n_output, config.d_output,
                  config.d_primary),
            scale=1.0 / np.sqrt(config.d_primary)),
    )


def _check_feats(params: CapsuleParams, feats: np.ndarray) -> np.ndarray:
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.config.bnf_dim:
        actual = feats.shape[1] if feats.ndim == 2 else None
        raise ValueError(
            f"feature dim mismatch: decoder expects {params.config.bnf_dim}, "
            f"got {actual}")
    assert_finite(feats, "decoder input features")
    return feats


def attend(params: CapsuleParams, feats: np.ndarray) -> np.ndarray:
    """Per-frame attention gate: sigmoid(w_a . F_t + b_a)."""
    feats = _check_feats(params, feats)
    return np.asarray(sigmoid(feats @ params.w_a + params.b_a))


def distribute(params: CapsuleParams, feats: np.ndarray) -> np.ndarray:
    """Per-frame distributor rows: softmax(w_d . F_t + b_d)."""
    feats = _check_feats(params, feats)
    return softmax(feats @ params.w_d.T + params.b_d, axis=1)


def primary_capsules(params: CapsuleParams, feats: np.ndarray,
                     alpha: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Squashed per-capsule aggregates of attention/distributor-weighted
    frames."""
    feats = _check_feats(params, feats)
    if alpha.shape[0] != feats.shape[0] or delta.shape[0] != feats.shape[0]:
        raise ValueError("alpha/delta frame count does not match features")
    wts = alpha[:, None] * delta
    agg = wts.T @ feats
    return squash_rows(agg @ params.w_s.T)


def dynamic_routing(s_caps: np.ndarray, w_r: np.ndarray, routing_iters: int):
    """Routing by agreement: predictions u_hat[i,j] = w_r[i,j] . s_i, logits
    start at zero, couplings are softmax over outputs, output capsules are
    squashed coupling-weighted sums.  Returns (v, couplings) from the final
    iteration.

    Always evaluated on the numpy reference path so results are libm-stable
    regardless of the selected backend; the compiled training kernels are
    cross-checked against this path in the test suite."""
    if routing_iters < 1:
        raise ValueError("routing_iters must be >= 1")
    from .kernels import numpy_impl
    s_caps = np.ascontiguousarray(s_caps, dtype=np.float64)
    w_r = np.ascontiguousarray(w_r, dtype=np.float64)
    u_hat = np.einsum('iodp,ip->iod', w_r, s_caps)
    cs, _souts, vs = numpy_impl.route_forward(
        np.ascontiguousarray(u_hat), routing_iters)
    return vs[-1], cs[-1]


def forward(params: CapsuleParams, feats: np.ndarray) -> CapsuleActivations:
    """Full decoder pass; all activation invariants hold on the result."""
    feats = _check_feats(params, feats)
    alpha, delta, _agg, _pre, s_caps, _u, cs, _souts, vs = kernels.caps_forward(
        feats, params.w_a, np.array([params.b_a]), params.w_d, params.b_d,
        params.w_s, params.w_r, params.config.routing_iters)
    return CapsuleActivations(alpha=alpha, delta=delta, s_caps=s_caps,
                              v_caps=vs[-1], couplings=cs[-1])


def margin_loss(v_caps: np.ndarray, targets, config: CapsuleConfig) -> float:
    """Margin loss over output capsule norms for a target label set."""
    mask = np.zeros(config.n_output)
    for t in targets:
        if not (0 <= t < config.n_output):
            raise ValueError(f"target label {t} outside 0..{config.n_output - 1}")
        mask[t] = 1.0
    loss, _ = kernels.margin_loss_grad(
        np.ascontiguousarray(v_caps, dtype=np.float64), mask,
        config.margin_plus, config.margin_minus, config.lambda_neg)
    return float(loss)


def _pack_dataset(params_cfg: CapsuleConfig, dataset):
    feats_list = []
    masks = np.zeros((len(dataset), params_cfg.n_output))
    for i, (feats, targets) in enumerate(dataset):
        feats = np.ascontiguousarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != params_cfg.bnf_dim:
            raise ValueError(
                f"dataset item {i}: feature dim {feats.shape} does not match "
                f"bnf_dim {params_cfg.bnf_dim}")
        feats_list.append(feats)
        for t in targets:
            if not (0 <= t < params_cfg.n_output):
                raise ValueError(
                    f"dataset item {i}: label {t} outside 0..{params_cfg.n_output - 1}")
            masks[i, t] = 1.0
    offsets = np.zeros(len(dataset) + 1, dtype=np.int64)
    for i, f in enumerate(feats_list):
        offsets[i + 1] = offsets[i] + f.shape[0]
    feat_cat = np.ascontiguousarray(np.vstack(feats_list))
    return feat_cat, offsets, masks


def fit(config: CapsuleConfig, dataset, rng: Rng) -> CapsuleParams:
    """Train a decoder by per-sample SGD on the margin loss.

    dataset: list of (T x bnf_dim features, target label set).  Training
    is bit-reproducible given (config, dataset order, seed); it stops
    early once the epoch mean loss drops below config.loss_tol.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    feat_cat, offsets, masks = _pack_dataset(config, dataset)
    params = init_capsule_params(config, rng.child(1))
    perm_rng = rng.child(2)
    perms = np.stack([perm_rng.permutation(len(dataset))
                      for _ in range(config.n_epochs)])
    ba_arr = np.asarray([params.b_a])
    losses, epochs_run = kernels.caps_fit(
        feat_cat, offsets, masks, perms,
        params.w_a, ba_arr, params.w_d, params.b_d, params.w_s, params.w_r,
        config.routing_iters, config.margin_plus, config.margin_minus,
        config.lambda_neg, config.learning_rate, config.loss_tol)
    params.b_a = float(ba_arr[0])
    if not np.isfinite(losses[epochs_run - 1]):
        raise RuntimeError(f"non-finite training loss at epoch {epochs_run}")
    params.train_losses = losses[:epochs_run]
    return params


def predict(params: CapsuleParams, feats: np.ndarray,
            threshold: float | None = None) -> set:
    """Detected label set: norms above threshold, or the argmax singleton
    when nothing crosses it (a prediction is always made)."""
    feats = _check_feats(params, feats)
    thr = params.config.detect_threshold if threshold is None else threshold
    offsets = np.asarray([0, feats.shape[0]], dtype=np.int64)
    norms = kernels.caps_output(
        feats, offsets, params.w_a, np.asarray([params.b_a]), params.w_d,
        params.b_d, params.w_s, params.w_r, params.config.routing_iters)[0]
    detected = {int(j) for j in np.nonzero(norms > thr)[0]}
    if not detected:
        detected = {int(np.argmax(norms))}
    return detected


def predict_batch(params: CapsuleParams, feats_list,
                  threshold: float | None = None) -> list:
    """predict() over many utterances with one kernel call."""
    thr = params.config.detect_threshold if threshold is None else threshold
    checked = [_check_feats(params, f) for f in feats_list]
    offsets = np.zeros(len(checked) + 1, dtype=np.int64)
    for i, f in enumerate(checked):
        offsets[i + 1] = offsets[i] + f.shape[0]
    feat_cat = np.ascontiguousarray(np.vstack(checked))
    norms = kernels.caps_output(
        feat_cat, offsets, params.w_a, np.asarray([params.b_a]), params.w_d,
        params.b_d, params.w_s, params.w_r, params.config.routing_iters)
    out = []
    for row in norms:
        detected = {int(j) for j in np.nonzero(row > thr)[0]}
        if not detected:
            detected = {int(np.argmax(row))}
        out.append(detected)
    return out
