"""Evaluation protocols.

Per-speaker learning curves (n-fold cross-validation over shuffled
blocks, training size swept from 1 to n_blocks-1 blocks), the
low-resource protocol (exactly two repetitions of each recorded command
in the train set, the rest held out), pooled micro-averaged F1 over slot
label sets, and the encoder-variant transfer report stratified by
intelligibility score.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, block_split
from .encoder import EncoderParams, frame_error_rate
from .nncore import Rng

logger = logging.getLogger(__name__)

VARIANT_NONE = "none"
VARIANT_NORMAL = "normal_only"
VARIANT_FULL = "finetune_full"
VARIANT_IS60 = "finetune_is60"
VARIANT_IS70 = "finetune_is70"
ALL_VARIANTS = (VARIANT_NONE, VARIANT_NORMAL, VARIANT_FULL, VARIANT_IS60,
                VARIANT_IS70)


class SkipSpeaker(Exception):
    """Speaker fails a protocol precondition; callers log and move on."""


@dataclass
class ExperimentConfig:
    encoder_variants: tuple = (VARIANT_NORMAL, VARIANT_FULL)
    n_blocks: int = 15
    n_folds: int = 5
    seeds: tuple = (0, 1, 2)
    output_dir: str = "runs/default"
    baseline: str = VARIANT_NORMAL

    def __post_init__(self):
        if not self.encoder_variants:
            raise ValueError("encoder_variants must be non-empty")
        for v in self.encoder_variants:
            if v not in ALL_VARIANTS:
                raise ValueError(f"unknown encoder variant {v!r}")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")


@dataclass
class CurvePoint:
    n_train: int
    mean_f1: float
    std_f1: float
    mean_exact: float


@dataclass
class SpeakerResult:
    speaker_id: str
    is_score: float
    variant: str
    f1: float
    fer: float
    rel_improvement: float = 0.0
    train_size: int = 0


@dataclass
class ExperimentReport:
    curves: dict = field(default_factory=dict)
    speakers: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def micro_f1(predictions, gold) -> float:
    """Pooled-count micro F1 over label sets; 1.0 when both sides are
    entirely empty."""
    if len(predictions) != len(gold):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions, {len(gold)} gold")
    tp = fp = fn = 0
    for p, g in zip(predictions, gold):
        p, g = set(p), set(g)
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def exact_match_accuracy(predictions, gold) -> float:
    if len(predictions) != len(gold):
        raise ValueError("length mismatch")
    if not gold:
        return 1.0
    hits = sum(1 for p, g in zip(predictions, gold) if set(p) == set(g))
    return hits / len(gold)


def learning_curve(speaker_data, model_factory, n_blocks: int, n_folds: int,
                   rng: Rng):
    """Per-speaker learning curve.

    speaker_data: list of (features, label_set) pairs.  Each fold
    reshuffles the utterances into n_blocks blocks; for every k the
    decoder trains on blocks 1..k and is scored on the rest.  Returns
    n_blocks - 1 CurvePoints; raises SkipSpeaker when the speaker has too
    few utterances.
    """
    if len(speaker_data) < n_blocks:
        raise SkipSpeaker(
            f"{len(speaker_data)} utterances < {n_blocks} blocks")
    per_k_f1 = [[] for _ in range(n_blocks - 1)]
    per_k_exact = [[] for _ in range(n_blocks - 1)]
    per_k_ntrain = [0] * (n_blocks - 1)
    for fold in range(n_folds):
        blocks = block_split(speaker_data, n_blocks, rng.child(fold))
        for k in range(1, n_blocks):
            train = [x for b in blocks[:k] for x in b]
            test = [x for b in blocks[k:] for x in b]
            model = model_factory(train, rng.child(fold, k))
            preds = model([f for f, _ in test])
            gold = [labels for _, labels in test]
            per_k_f1[k - 1].append(micro_f1(preds, gold))
            per_k_exact[k - 1].append(exact_match_accuracy(preds, gold))
            per_k_ntrain[k - 1] = len(train)
    return [
        CurvePoint(n_train=per_k_ntrain[k],
                   mean_f1=float(np.mean(per_k_f1[k])),
                   std_f1=float(np.std(per_k_f1[k])),
                   mean_exact=float(np.mean(per_k_exact[k])))
        for k in range(n_blocks - 1)
    ]


def average_curves(curves):
    """Pointwise average of per-speaker curves (all must share length)."""
    if not curves:
        return []
    lengths = {len(c) for c in curves}
    if len(lengths) != 1:
        raise ValueError(f"curves have differing lengths {sorted(lengths)}")
    out = []
    for k in range(lengths.pop()):
        pts = [c[k] for c in curves]
        out.append(CurvePoint(
            n_train=int(round(np.mean([p.n_train for p in pts]))),
            mean_f1=float(np.mean([p.mean_f1 for p in pts])),
            std_f1=float(np.mean([p.std_f1 for p in pts])),
            mean_exact=float(np.mean([p.mean_exact for p in pts]))))
    return out


def low_resource_split(items, rng: Rng):
    """One fold of the low-resource protocol.

    items: list of (features, label_set, command_id).  Returns (train,
    test) index lists: exactly two repetitions of every command in train,
    everything else in test.  Raises SkipSpeaker when any command has
    fewer than 3 repetitions.
    """
    by_cmd = {}
    for i, (_f, _l, cmd) in enumerate(items):
        by_cmd.setdefault(cmd, []).append(i)
    train = []
    for cmd in sorted(by_cmd):
        reps = by_cmd[cmd]
        if len(reps) < 3:
            raise SkipSpeaker(
                f"command {cmd} has {len(reps)} repetitions (< 3)")
        pick = rng.choice(len(reps), 2)
        train.extend(reps[j] for j in sorted(pick))
    train_set = set(train)
    test = [i for i in range(len(items)) if i not in train_set]
    return sorted(train), test


def low_resource_eval(items, model_factory, rng: Rng, n_folds: int = 5):
    """Mean micro-F1 over n_folds resampled low-resource splits.

    Returns (mean_f1, fold_f1s, train_size)."""
    fold_scores = []
    train_size = 0
    for fold in range(n_folds):
        train_idx, test_idx = low_resource_split(items, rng.child(fold))
        train = [(items[i][0], items[i][1]) for i in train_idx]
        test = [(items[i][0], items[i][1]) for i in test_idx]
        model = model_factory(train, rng.child(fold, 1))
        preds = model([f for f, _ in test])
        fold_scores.append(micro_f1(preds, [l for _, l in test]))
        train_size = len(train)
    return float(np.mean(fold_scores)), fold_scores, train_size


def speaker_task_items(corpus: Corpus, bnf_by_utt: dict):
    """Group a task corpus into per-speaker (features, labels, command)
    lists, with features looked up from an extracted feature dict."""
    out = {}
    for u in corpus.utterances:
        out.setdefault(u.speaker_id, []).append(
            (bnf_by_utt[u.utt_id], u.slot_labels, u.command_id))
    return out


def is_transfer_report(task_corpus: Corpus, variants: dict,
                       model_factory_for, config: ExperimentConfig,
                       rng: Rng) -> ExperimentReport:
    """Low-resource F1 and frame error rate per speaker x encoder variant,
    with relative improvement against the baseline variant.

    variants: {name: (frozen EncoderParams, {utt_id: bnf matrix})}.
    model_factory_for(variant) returns the decoder factory used by
    low_resource_eval.  Rows come back sorted by intelligibility score.
    """
    for v in config.encoder_variants:
        if v not in variants:
            raise ValueError(f"missing artifacts for encoder variant {v!r}")
    if config.baseline not in variants:
        raise ValueError(f"missing artifacts for baseline variant "
                         f"{config.baseline!r}")
    fer_cache = {}
    results = []
    skipped = []
    by_speaker_order = sorted(task_corpus.speakers,
                              key=lambda s: s.intelligibility_score)
    speaker_subcorpora = {
        s.speaker_id: task_corpus.filter_speakers(
            lambda p, sid=s.speaker_id: p.speaker_id == sid)
        for s in task_corpus.speakers
    }
    variant_order = list(config.encoder_variants)
    if config.baseline not in variant_order:
        variant_order.append(config.baseline)
    scores = {}
    for v_idx, v in enumerate(variant_order):
        enc_params, bnfs = variants[v]
        items_by_speaker = speaker_task_items(task_corpus, bnfs)
        for s in by_speaker_order:
            sid = s.speaker_id
            try:
                f1, _folds, train_size = low_resource_eval(
                    items_by_speaker[sid], model_factory_for(v),
                    rng.child(v_idx, _speaker_tag(sid)))
            except SkipSpeaker as e:
                logger.warning("skipping speaker %s for %s: %s", sid, v, e)
                skipped.append((sid, v, str(e)))
                continue
            if (v, sid) not in fer_cache:
                fer_cache[(v, sid)] = frame_error_rate(
                    enc_params, speaker_subcorpora[sid])
            scores[(v, sid)] = (f1, fer_cache[(v, sid)], train_size)
    for s in by_speaker_order:
        sid = s.speaker_id
        base = scores.get((config.baseline, sid))
        for v in config.encoder_variants:
            got = scores.get((v, sid))
            if got is None:
                continue
            f1, fer, train_size = got
            rel = f1 - base[0] if base is not None else float("nan")
            results.append(SpeakerResult(
                speaker_id=sid, is_score=s.intelligibility_score, variant=v,
                f1=f1, fer=fer, rel_improvement=rel, train_size=train_size))
    return ExperimentReport(
        curves={}, speakers=results,
        metadata={"baseline": config.baseline, "skipped": skipped,
                  "n_folds_low_resource": 5})


def _speaker_tag(speaker_id: str) -> int:
    return sum((i + 1) * b for i, b in enumerate(speaker_id.encode("utf-8")))


def run_learning_curves(task_corpus: Corpus, variants: dict,
                        model_factory_for, config: ExperimentConfig,
                        rng: Rng) -> dict:
    """Cross-speaker average learning curve per encoder variant."""
    out = {}
    for v_idx, v in enumerate(config.encoder_variants):
        if v not in variants:
            raise ValueError(f"missing artifacts for encoder variant {v!r}")
        _enc, bnfs = variants[v]
        items_by_speaker = speaker_task_items(task_corpus, bnfs)
        per_speaker = []
        for s in sorted(task_corpus.speakers, key=lambda p: p.speaker_id):
            pairs = [(f, labels) for f, labels, _cmd in
                     items_by_speaker[s.speaker_id]]
            try:
                curve = learning_curve(
                    pairs, model_factory_for(v), config.n_blocks,
                    config.n_folds, rng.child(v_idx, _speaker_tag(s.speaker_id)))
            except SkipSpeaker as e:
                logger.warning("skipping speaker %s for %s: %s",
                               s.speaker_id, v, e)
                continue
            per_speaker.append(curve)
        out[v] = average_curves(per_speaker)
    return out
