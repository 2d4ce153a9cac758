"""Acoustic encoder: dilated temporal convolutions trained on frame-level
phone classification.

The stack realizes time-delay context splicing as dilated 1-D
convolutions with ReLU.  The penultimate representation (the last hidden
layer, width bnf_dim) is the bottleneck feature sequence handed to the
decoder; a linear projection on top gives phone logits for training.

Pretraining happens in two stages: initialization on the normal corpus,
then joint finetuning on an IS-filtered dysarthric corpus mixed with a
slice of normal speech.  After training the parameters are frozen;
extraction refuses to run on unfrozen parameters.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .corpus import Corpus, augment_speed
from .nncore import Rng, assert_finite

DEFAULT_CONTEXT = ((3, 1), (3, 1), (3, 2), (3, 2), (3, 4), (3, 4))


class FrozenParamsError(RuntimeError):
    """A training operation touched frozen parameters."""


@dataclass
class EncoderConfig:
    input_dim: int = 24
    n_phone_targets: int = 20
    n_layers: int = 6
    hidden_dim: int = 64
    bnf_dim: int = 32
    context: tuple = DEFAULT_CONTEXT
    lr_initial: float = 2.5e-4
    lr_final: float = 2.5e-5
    n_epochs: int = 15
    batch_size: int = 8
    finetune_normal_fraction: float = 0.5
    speaker_embedding_dim: int = 0

    def __post_init__(self):
        self.context = tuple((int(k), int(d)) for k, d in self.context)
        if len(self.context) != self.n_layers:
            raise ValueError(
                f"context has {len(self.context)} entries for {self.n_layers} layers")
        for k, d in self.context:
            if k % 2 != 1 or k < 1 or d < 1:
                raise ValueError(f"kernel/dilation ({k},{d}) invalid; kernels must be odd")
        if self.receptive_field() < 9:
            raise ValueError(
                f"receptive field {self.receptive_field()} < 9 frames")
        if not (0.0 <= self.finetune_normal_fraction < 1.0):
            raise ValueError("finetune_normal_fraction must be in [0, 1)")

    def receptive_field(self) -> int:
        return sum((k - 1) * d for k, d in self.context)

    def layer_widths(self):
        return [self.hidden_dim] * (self.n_layers - 1) + [self.bnf_dim]

    def effective_input_dim(self) -> int:
        return self.input_dim + self.speaker_embedding_dim


@dataclass
class EncoderParams:
    config: EncoderConfig
    layers: list
    w_out: np.ndarray
    b_out: np.ndarray
    frozen: bool = False
    embeddings: np.ndarray | None = None
    embedding_speakers: list | None = None
    train_losses: list | None = None

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            config=self.config,
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
            frozen=self.frozen,
            embeddings=None if self.embeddings is None else self.embeddings.copy(),
            embedding_speakers=None if self.embedding_speakers is None
            else list(self.embedding_speakers),
        )


def init_params(config: EncoderConfig, rng: Rng) -> EncoderParams:
    layers = []
    c_in = config.effective_input_dim()
    for (k, _d), c_out in zip(config.context, config.layer_widths()):
        scale = np.sqrt(2.0 / (k * c_in))
        layers.append((rng.normal(size=(k, c_in, c_out), scale=scale),
                       np.zeros(c_out)))
        c_in = c_out
    w_out = rng.normal(size=(config.bnf_dim, config.n_phone_targets),
                       scale=np.sqrt(1.0 / config.bnf_dim))
    b_out = np.zeros(config.n_phone_targets)
    return EncoderParams(config=config, layers=layers, w_out=w_out, b_out=b_out)


def _embedding_rows(params: EncoderParams, speaker_ids, t_len: int) -> np.ndarray:
    emb_dim = params.config.speaker_embedding_dim
    out = np.zeros((len(speaker_ids), t_len, emb_dim))
    if params.embeddings is None:
        return out
    index = {s: i for i, s in enumerate(params.embedding_speakers)}
    for b, sid in enumerate(speaker_ids):
        row = index.get(sid)
        if row is not None:
            out[b, :, :] = params.embeddings[row]
    return out


def _forward_batch(params: EncoderParams, x: np.ndarray, want_cache: bool):
    """x: (B, T, effective input dim).  Returns (bnf, logits, cache)."""
    cache = [] if want_cache else None
    h = x
    for (w, b), (k, d) in zip(params.layers, params.config.context):
        pad = (k - 1) // 2 * d
        n_b, t_len, c_in = h.shape
        xp = np.zeros((n_b, t_len + 2 * pad, c_in))
        xp[:, pad:pad + t_len, :] = h
        z = kernels.conv_forward(xp, w, b, d)
        if want_cache:
            cache.append((xp, z))
        h = np.maximum(z, 0.0)
    logits = h @ params.w_out + params.b_out
    return h, logits, cache


def encoder_forward(params: EncoderParams, features: np.ndarray,
                    speaker_id: str | None = None):
    """Single-utterance forward pass: (bnf T x bnf_dim, logits T x phones)."""
    features = np.asarray(features, dtype=np.float64)
    cfg = params.config
    if features.ndim != 2 or features.shape[1] != cfg.input_dim:
        actual = features.shape[1] if features.ndim == 2 else None
        raise ValueError(
            f"feature dim mismatch: encoder expects D={cfg.input_dim}, "
            f"got D={actual}")
    x = features[None, :, :]
    if cfg.speaker_embedding_dim > 0:
        emb = _embedding_rows(params, [speaker_id], features.shape[0])
        x = np.concatenate([x, emb], axis=2)
    bnf, logits, _ = _forward_batch(params, x, want_cache=False)
    return bnf[0], logits[0]


def _check_trainable_corpus(utts, n_targets: int) -> None:
    for u in utts:
        if u.n_frames == 0:
            raise ValueError(f"utterance {u.utt_id} has no frames/alignment")
        lo, hi = int(u.phone_alignment.min()), int(u.phone_alignment.max())
        if lo < 0 or hi >= n_targets:
            raise ValueError(
                f"utterance {u.utt_id} alignment indices [{lo},{hi}] outside "
                f"the {n_targets} phone targets (corpus lacks usable alignments)")


def _train(params: EncoderParams, utts, config: EncoderConfig, rng: Rng,
           n_epochs: int) -> list:
    """Mini-batch SGD on summed frame cross-entropy; mutates params and
    returns the per-epoch mean frame loss."""
    if params.frozen:
        raise FrozenParamsError("cannot train frozen encoder parameters")
    _check_trainable_corpus(utts, config.n_phone_targets)
    if config.speaker_embedding_dim > 0:
        known = list(params.embedding_speakers or [])
        seen = {u.speaker_id for u in utts}
        new = sorted(seen - set(known))
        if new:
            rows = rng.normal(size=(len(new), config.speaker_embedding_dim),
                              scale=0.1)
            params.embeddings = rows if params.embeddings is None else \
                np.vstack([params.embeddings, rows])
            params.embedding_speakers = known + new
    n = len(utts)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = max(1, n_epochs * steps_per_epoch)
    step = 0
    emb_index = None
    if config.speaker_embedding_dim > 0:
        emb_index = {s: i for i, s in enumerate(params.embedding_speakers)}
    losses = []
    for _epoch in range(n_epochs):
        order = rng.permutation(n)
        ce_total = 0.0
        frames_total = 0
        for start in range(0, n, config.batch_size):
            batch = [utts[i] for i in order[start:start + config.batch_size]]
            if total_steps > 1:
                frac = step / (total_steps - 1)
            else:
                frac = 0.0
            lr = config.lr_initial + (config.lr_final - config.lr_initial) * frac
            ce, n_frames = _sgd_step(params, batch, config, lr, emb_index)
            ce_total += ce
            frames_total += n_frames
            step += 1
        losses.append(ce_total / max(1, frames_total))
    return losses


def loss_and_grads(params, batch, config):
    """Summed masked cross-entropy on a batch of utterances plus the
    gradients of every trainable tensor (validated by the finite-difference
    oracle).  Returns (ce_sum, n_frames, layer_grads, dw_out, db_out,
    demb_by_speaker)."""
    n_b = len(batch)
    t_max = max(u.n_frames for u in batch)
    d_eff = config.effective_input_dim()
    x = np.zeros((n_b, t_max, d_eff))
    mask = np.zeros((n_b, t_max), dtype=bool)
    targets = np.zeros((n_b, t_max), dtype=np.int64)
    for i, u in enumerate(batch):
        t = u.n_frames
        x[i, :t, :config.input_dim] = u.features
        mask[i, :t] = True
        targets[i, :t] = u.phone_alignment
    if config.speaker_embedding_dim > 0:
        emb = _embedding_rows(params, [u.speaker_id for u in batch], t_max)
        x[:, :, config.input_dim:] = emb
    bnf, logits, cache = _forward_batch(params, x, want_cache=True)
    # masked softmax cross-entropy, summed over real frames
    shifted = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=2, keepdims=True)
    rows = np.arange(n_b)[:, None], np.arange(t_max)[None, :]
    onehot_idx = (rows[0], rows[1], targets)
    target_p = probs[onehot_idx]
    ce_sum = float(-np.sum(np.log(np.maximum(target_p, 1e-300))[mask]))
    dlogits = probs.copy()
    dlogits[onehot_idx] -= 1.0
    dlogits[~mask] = 0.0
    # output projection
    flat_bnf = bnf.reshape(-1, config.bnf_dim)
    flat_dlog = dlogits.reshape(-1, config.n_phone_targets)
    dw_out = flat_bnf.T @ flat_dlog
    db_out = flat_dlog.sum(axis=0)
    dh = (dlogits @ params.w_out.T)
    # backprop through the conv stack
    layer_grads = []
    for l in range(config.n_layers - 1, -1, -1):
        xp, z = cache[l]
        k, d = config.context[l]
        pad = (k - 1) // 2 * d
        dz = dh * (z > 0.0)
        dxp, dw, db = kernels.conv_backward(xp, params.layers[l][0], d, dz)
        layer_grads.append((dw, db))
        dh = dxp[:, pad:pad + dz.shape[1], :]
    layer_grads.reverse()
    demb = {}
    if config.speaker_embedding_dim > 0:
        demb_frames = dh[:, :, config.input_dim:] * mask[:, :, None]
        for i, u in enumerate(batch):
            row = demb.setdefault(u.speaker_id,
                                  np.zeros(config.speaker_embedding_dim))
            row += demb_frames[i].sum(axis=0)
    return ce_sum, int(mask.sum()), layer_grads, dw_out, db_out, demb


def _sgd_step(params, batch, config, lr, emb_index):
    ce_sum, n_frames, layer_grads, dw_out, db_out, demb = loss_and_grads(
        params, batch, config)
    for (w, b), (dw, db) in zip(params.layers, layer_grads):
        w -= lr * dw
        b -= lr * db
    params.w_out -= lr * dw_out
    params.b_out -= lr * db_out
    for sid, g in demb.items():
        params.embeddings[emb_index[sid]] -= lr * g
    return ce_sum, n_frames


def pretrain(config: EncoderConfig, corpus: Corpus, rng: Rng,
             init: EncoderParams | None = None) -> EncoderParams:
    """Stage-one training on the (normal) corpus, speed-perturbed x3."""
    if init is not None and init.frozen:
        raise FrozenParamsError("cannot pretrain from frozen parameters")
    params = init.copy() if init is not None else init_params(config, rng.child(1))
    utts = augment_speed(corpus.utterances)
    params.train_losses = _train(params, utts, config, rng.child(2),
                                 config.n_epochs)
    for w, b in params.layers:
        assert_finite(w, "encoder weights")
        assert_finite(b, "encoder biases")
    return params


def finetune(init: EncoderParams, normal: Corpus, dysarthric: Corpus,
             config: EncoderConfig, rng: Rng,
             is_min: float | None = None) -> EncoderParams:
    """Stage-two joint training on IS-filtered dysarthric data mixed with a
    normal slice; runs for one tenth of the pretraining epochs."""
    if init.frozen:
        raise FrozenParamsError("cannot finetune frozen parameters")
    if is_min is not None:
        kept = dysarthric.filter_speakers(
            lambda s: s.intelligibility_score > is_min)
    else:
        kept = dysarthric
    if not kept.utterances:
        scores = [s.intelligibility_score for s in dysarthric.speakers]
        raise ValueError(
            f"IS > {is_min} leaves no dysarthric utterances; corpus speakers "
            f"span IS {min(scores):.1f}..{max(scores):.1f}")
    dys_utts = list(kept.utterances)
    frac = config.finetune_normal_fraction
    n_normal = int(round(len(dys_utts) * frac / (1.0 - frac))) if frac > 0 else 0
    n_normal = min(n_normal, len(normal.utterances))
    pick = sorted(rng.child(3).choice(len(normal.utterances), n_normal))
    mixed = dys_utts + [normal.utterances[i] for i in pick]
    params = init.copy()
    epochs = max(1, config.n_epochs // 10)
    params.train_losses = _train(params, augment_speed(mixed), config,
                                 rng.child(4), epochs)
    return params


def freeze(params: EncoderParams) -> EncoderParams:
    out = params.copy()
    out.frozen = True
    return out


def extract_bnf(params: EncoderParams, corpus: Corpus, path=None):
    """Bottleneck features for every utterance; requires frozen params.

    Returns a list of (utt_id, T x bnf_dim matrix); writes a feature
    archive when path is given.
    """
    if not params.frozen:
        raise FrozenParamsError(
            "refusing to extract features from unfrozen parameters; "
            "call freeze() first")
    records = []
    for u in corpus.utterances:
        bnf, _ = encoder_forward(params, u.features, u.speaker_id)
        records.append((u.utt_id, bnf))
    if path is not None:
        from .formats import write_bnf_archive
        write_bnf_archive(records, path)
    return records


def frame_errors(logits: np.ndarray, alignment: np.ndarray) -> int:
    """Count frames whose argmax logit disagrees with the alignment."""
    pred = np.argmax(logits, axis=1)
    return int(np.sum(pred != alignment))


def frame_error_rate(params: EncoderParams, corpus: Corpus) -> float:
    """Fraction of misclassified frames over the whole corpus."""
    wrong = 0
    total = 0
    for u in corpus.utterances:
        _, logits = encoder_forward(params, u.features, u.speaker_id)
        wrong += frame_errors(logits, u.phone_alignment)
        total += u.n_frames
    return wrong / total if total else 0.0


def frame_accuracy(params: EncoderParams, corpus: Corpus) -> float:
    return 1.0 - frame_error_rate(params, corpus)
