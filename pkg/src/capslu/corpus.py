"""Synthetic corpus generation.

Three corpus roles mirror the data layout of the real task: a clean
"normal" pretraining population (every speaker at intelligibility 100),
a severity-stratified dysarthric population, and a task-specific command
corpus whose utterances carry slot-value label sets.

The dysarthria model is a per-speaker distortion with three knobs, all
proportional to (100 - IS): phone prototypes drift toward their nearest
confusable (partly shared across speakers, partly idiosyncratic), whole
phones are substituted by the confusable with some probability while the
alignment keeps the intended phone, and phone durations jitter.  The
alignment behaviour is deliberate: severe speech carries unreliable
alignments, which is exactly what makes low-IS pretraining data risky.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .nncore import Rng, assert_finite

DEFAULT_N_PHONES = 20
DEFAULT_FEATURE_DIM = 24
DEFAULT_NOISE_SCALE = 0.3

IS_MIN, IS_MAX = 28.0, 100.0

# severity knobs, per point of (100 - IS)
OFFSET_STD_PER_POINT = 0.04
SUBSTITUTION_PER_POINT = 0.006
JITTER_PER_POINT = 0.01
# fraction of offset variance shared across speakers (drift toward the
# confusable phone); the rest is idiosyncratic per speaker
SHARED_OFFSET_RHO = 0.6
# the shared drift never moves a prototype past this fraction of the way
# to its confusable, so severe speech stays heavy but not degenerate
SHARED_DRIFT_CAP = 0.75

# dysarthric pretraining strata (is_low, is_high, n_speakers): the real
# population's 99/63/8/12 split scaled down by 10, rounded up
DEFAULT_PRETRAIN_STRATA = (
    (85.0, 100.0, 10),
    (70.0, 85.0, 7),
    (60.0, 70.0, 1),
    (28.0, 60.0, 2),
)
# task-speaker strata: 5 mild / 6 moderate / 4 high-severity speakers
DEFAULT_TASK_STRATA = (
    (85.0, 100.0, 5),
    (70.0, 85.0, 6),
    (60.0, 70.0, 4),
)

DEFAULT_N_COMMANDS = 27
DEFAULT_N_SLOT_VALUES = 27

# sub-stream tags for hierarchical seeding
_TAG_INVENTORY = 101
_TAG_SPEAKERS = 102
_TAG_UTTERANCES = 103
_TAG_COMMANDS = 104


@dataclass
class PhoneInventory:
    """Fixed set of phone identities with feature-space prototypes."""

    phones: list
    prototypes: np.ndarray
    noise_scale: float = DEFAULT_NOISE_SCALE

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.shape[0] != len(self.phones):
            raise ValueError("one prototype per phone required")
        assert_finite(self.prototypes, "phone prototypes")
        if len(self.phones) >= 2 and self.min_pairwise_distance() <= 0.0:
            raise ValueError("phone prototypes must be pairwise distinct")

    @property
    def n_phones(self) -> int:
        return len(self.phones)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def min_pairwise_distance(self) -> float:
        d = self.prototypes[:, None, :] - self.prototypes[None, :, :]
        dist = np.sqrt((d * d).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        return float(dist.min())

    def confusable_map(self) -> np.ndarray:
        """Nearest other prototype per phone (Euclidean)."""
        d = self.prototypes[:, None, :] - self.prototypes[None, :, :]
        dist = (d * d).sum(axis=2)
        np.fill_diagonal(dist, np.inf)
        return np.argmin(dist, axis=1).astype(np.int64)


def make_inventory(rng: Rng, n_phones: int = DEFAULT_N_PHONES,
                   dim: int = DEFAULT_FEATURE_DIM,
                   noise_scale: float = DEFAULT_NOISE_SCALE) -> PhoneInventory:
    protos = rng.normal(size=(n_phones, dim))
    names = [f"ph{i:02d}" for i in range(n_phones)]
    return PhoneInventory(names, protos, noise_scale)


@dataclass
class SpeakerProfile:
    speaker_id: str
    intelligibility_score: float
    prototype_offset: np.ndarray
    substitution_rate: float
    duration_jitter: float

    def __post_init__(self):
        if not (IS_MIN <= self.intelligibility_score <= IS_MAX):
            raise ValueError(
                f"intelligibility score {self.intelligibility_score} outside "
                f"[{IS_MIN}, {IS_MAX}]")


def make_speaker(speaker_id: str, is_score: float,
                 inventory: PhoneInventory, rng: Rng) -> SpeakerProfile:
    """Derive a speaker's distortion from its intelligibility score.

    IS 100 gives exactly zero offset, substitution and jitter; all three
    grow linearly as IS drops.
    """
    severity = IS_MAX - is_score
    dim = inventory.dim
    conf = inventory.confusable_map()
    offsets = np.zeros((inventory.n_phones, dim))
    if severity > 0.0:
        shared_mag = OFFSET_STD_PER_POINT * SHARED_OFFSET_RHO * math.sqrt(dim) * severity
        idio_std = OFFSET_STD_PER_POINT * math.sqrt(1.0 - SHARED_OFFSET_RHO ** 2) * severity
        for p in range(inventory.n_phones):
            towards = inventory.prototypes[conf[p]] - inventory.prototypes[p]
            gap = float(np.linalg.norm(towards))
            mag = min(shared_mag, SHARED_DRIFT_CAP * gap)
            offsets[p] = (mag / gap) * towards + rng.normal(size=dim, scale=idio_std)
    else:
        # keep the draw stream aligned regardless of severity
        rng.normal(size=(inventory.n_phones, dim))
    return SpeakerProfile(
        speaker_id=speaker_id,
        intelligibility_score=float(is_score),
        prototype_offset=offsets,
        substitution_rate=SUBSTITUTION_PER_POINT * severity,
        duration_jitter=JITTER_PER_POINT * severity,
    )


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    features: np.ndarray
    phone_alignment: np.ndarray
    slot_labels: frozenset = frozenset()
    command_id: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.phone_alignment = np.asarray(self.phone_alignment, dtype=np.int64)
        if self.phone_alignment.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.utt_id}: alignment length {self.phone_alignment.shape[0]} "
                f"!= frame count {self.features.shape[0]}")
        self.slot_labels = frozenset(int(x) for x in self.slot_labels)
        if (self.command_id is None) != (len(self.slot_labels) == 0):
            raise ValueError(
                f"{self.utt_id}: slot labels must be non-empty exactly for "
                "task utterances (those with a command id)")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    name: str
    utterances: list
    speakers: list
    phone_inventory: PhoneInventory

    def __post_init__(self):
        ids = [u.utt_id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValueError(f"corpus {self.name}: duplicate utterance ids")
        by_id = {}
        for s in self.speakers:
            if s.speaker_id in by_id:
                raise ValueError(f"corpus {self.name}: duplicate speaker id {s.speaker_id}")
            by_id[s.speaker_id] = s
        for u in self.utterances:
            if u.speaker_id not in by_id:
                raise ValueError(
                    f"corpus {self.name}: utterance {u.utt_id} references "
                    f"unknown speaker {u.speaker_id}")
        self._speaker_map = by_id

    def speaker(self, speaker_id: str) -> SpeakerProfile:
        return self._speaker_map[speaker_id]

    def utterances_by_speaker(self) -> dict:
        out = {s.speaker_id: [] for s in self.speakers}
        for u in self.utterances:
            out[u.speaker_id].append(u)
        return out

    def filter_speakers(self, keep) -> "Corpus":
        """Sub-corpus of the speakers for which keep(profile) is true."""
        kept = [s for s in self.speakers if keep(s)]
        kept_ids = {s.speaker_id for s in kept}
        utts = [u for u in self.utterances if u.speaker_id in kept_ids]
        return Corpus(self.name, utts, kept, self.phone_inventory)


def _emit_utterance(utt_id: str, speaker: SpeakerProfile,
                    inventory: PhoneInventory, phone_seq, rng: Rng,
                    slot_labels=frozenset(), command_id=None,
                    min_dur: int = 3, max_dur: int = 8) -> Utterance:
    conf = inventory.confusable_map()
    frames = []
    alignment = []
    for p in phone_seq:
        dur = int(rng.integers(min_dur, max_dur + 1))
        g = float(rng.normal())
        dur = max(1, int(math.floor(dur * (1.0 + speaker.duration_jitter * g) + 0.5)))
        emitted = p
        if rng.uniform() < speaker.substitution_rate:
            emitted = int(conf[p])
        mean = inventory.prototypes[emitted] + speaker.prototype_offset[emitted]
        noise = rng.normal(size=(dur, inventory.dim), scale=inventory.noise_scale)
        frames.append(mean[None, :] + noise)
        alignment.extend([int(p)] * dur)
    return Utterance(
        utt_id=utt_id,
        speaker_id=speaker.speaker_id,
        features=np.vstack(frames),
        phone_alignment=np.asarray(alignment, dtype=np.int64),
        slot_labels=slot_labels,
        command_id=command_id,
    )


def _validate_strata(strata) -> None:
    if not strata:
        raise ValueError("severity strata must be non-empty")
    spans = []
    for lo, hi, count in strata:
        if count < 1:
            raise ValueError(f"stratum ({lo}, {hi}) has speaker count {count} < 1")
        if not (IS_MIN <= lo <= hi <= IS_MAX):
            raise ValueError(
                f"stratum ({lo}, {hi}) outside the IS range [{IS_MIN}, {IS_MAX}]")
        spans.append((lo, hi))
    spans.sort()
    for (alo, ahi), (blo, bhi) in zip(spans, spans[1:]):
        if blo < ahi and not (alo == ahi == blo):
            raise ValueError(f"strata ({alo},{ahi}) and ({blo},{bhi}) overlap")


def synth_pretrain_corpus(severity_strata=DEFAULT_PRETRAIN_STRATA,
                          utts_per_speaker: int = 12,
                          seed: int = 0,
                          inventory: PhoneInventory | None = None,
                          name: str = "pretrain",
                          speaker_prefix: str = "spk",
                          min_phones: int = 5, max_phones: int = 15) -> Corpus:
    """Pretraining corpus: random phone sequences under the distortion model.

    severity_strata is a list of (is_low, is_high, n_speakers); speaker IS
    is drawn uniformly inside each stratum.  Deterministic given seed.
    """
    _validate_strata(severity_strata)
    if utts_per_speaker < 1:
        raise ValueError("utts_per_speaker must be >= 1")
    root = Rng(seed)
    if inventory is None:
        inventory = make_inventory(root.child(_TAG_INVENTORY))
    spk_rng = root.child(_TAG_SPEAKERS)
    speakers = []
    for lo, hi, count in severity_strata:
        for _ in range(count):
            idx = len(speakers)
            is_score = lo + spk_rng.uniform() * (hi - lo)
            speakers.append(make_speaker(
                f"{speaker_prefix}{idx:03d}", is_score, inventory,
                spk_rng.child(idx)))
    utterances = []
    for s_idx, speaker in enumerate(speakers):
        urng = root.child(_TAG_UTTERANCES, s_idx)
        for k in range(utts_per_speaker):
            n_ph = int(urng.integers(min_phones, max_phones + 1))
            seq = [int(x) for x in urng.integers(0, inventory.n_phones, n_ph)]
            utterances.append(_emit_utterance(
                f"{speaker.speaker_id}_u{k:04d}", speaker, inventory, seq, urng))
    return Corpus(name, utterances, speakers, inventory)


def default_task_is_assignment(strata=DEFAULT_TASK_STRATA, prefix="dom"):
    """Deterministic speaker IS placement: evenly spaced inside each stratum.

    Fixed placement (rather than random draws) keeps the stratum membership
    of the task population identical across seeds, like a real recorded
    speaker panel.
    """
    out = []
    idx = 0
    for lo, hi, count in strata:
        for i in range(count):
            is_score = lo + (hi - lo) * (i + 1) / (count + 1)
            out.append((f"{prefix}{idx:02d}", is_score))
            idx += 1
    return out


def synth_task_corpus(n_commands: int = DEFAULT_N_COMMANDS,
                      repetitions_per_command: int = 3,
                      is_assignment=None,
                      seed: int = 0,
                      inventory: PhoneInventory | None = None,
                      n_slot_values: int = DEFAULT_N_SLOT_VALUES,
                      name: str = "task",
                      min_cmds_per_speaker: int = 9,
                      min_phones: int = 4, max_phones: int = 9) -> Corpus:
    """Command corpus: fixed per-command phone sequence ("text") and slot set.

    Every speaker records a subset of the commands (at least
    min_cmds_per_speaker), each repeated repetitions_per_command times,
    rendered through the speaker's distortion model.
    """
    if n_commands < 2:
        raise ValueError("need at least 2 commands")
    if repetitions_per_command < 1:
        raise ValueError("repetitions_per_command must be >= 1")
    if is_assignment is None:
        is_assignment = default_task_is_assignment()
    ids = [sid for sid, _ in is_assignment]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate speaker ids in is_assignment")
    root = Rng(seed)
    if inventory is None:
        inventory = make_inventory(root.child(_TAG_INVENTORY))
    crng = root.child(_TAG_COMMANDS)
    commands = []
    for c in range(n_commands):
        n_ph = int(crng.integers(min_phones, max_phones + 1))
        seq = [int(x) for x in crng.integers(0, inventory.n_phones, n_ph)]
        n_slots = 1 + int(crng.integers(0, 3))
        slots = frozenset(int(x) for x in crng.choice(n_slot_values, n_slots))
        commands.append((seq, slots))
    speakers = []
    utterances = []
    for s_idx, (sid, is_score) in enumerate(is_assignment):
        srng = root.child(_TAG_SPEAKERS, s_idx)
        speaker = make_speaker(sid, is_score, inventory, srng)
        speakers.append(speaker)
        urng = root.child(_TAG_UTTERANCES, s_idx)
        lo = min(min_cmds_per_speaker, n_commands)
        n_cmd = int(urng.integers(lo, n_commands + 1))
        chosen = sorted(int(x) for x in urng.choice(n_commands, n_cmd))
        for c in chosen:
            seq, slots = commands[c]
            for rep in range(repetitions_per_command):
                utterances.append(_emit_utterance(
                    f"{sid}_c{c:02d}_r{rep}", speaker, inventory, seq, urng,
                    slot_labels=slots, command_id=c))
    return Corpus(name, utterances, speakers, inventory)


def speed_perturb(u: Utterance, ratio: float) -> Utterance:
    """Resample an utterance in time by the given speed ratio.

    Features are linearly interpolated onto round(T/ratio) frames; the
    alignment is resampled nearest-neighbour.  Ratio 1.0 is the exact
    identity.
    """
    if not (0.5 <= ratio <= 2.0):
        raise ValueError(f"speed ratio {ratio} outside [0.5, 2.0]")
    if ratio == 1.0:
        return Utterance(u.utt_id, u.speaker_id, u.features, u.phone_alignment,
                         u.slot_labels, u.command_id)
    t_old = u.n_frames
    t_new = int(math.floor(t_old / ratio + 0.5))
    if t_new < 2:
        raise ValueError(
            f"ratio {ratio} on {t_old} frames leaves {t_new} < 2 frames")
    src = np.linspace(0.0, t_old - 1.0, t_new)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, t_old - 1)
    frac = (src - i0)[:, None]
    feats = u.features[i0] * (1.0 - frac) + u.features[i1] * frac
    align = u.phone_alignment[np.rint(src).astype(np.int64)]
    return Utterance(u.utt_id, u.speaker_id, feats, align,
                     u.slot_labels, u.command_id)


def augment_speed(utts, ratios=(0.9, 1.0, 1.1)):
    """Speed-perturbed copies of a training list (len(ratios) x samples)."""
    out = []
    for r in ratios:
        for u in utts:
            out.append(speed_perturb(u, r))
    return out


def block_split(utts, n_blocks: int, rng: Rng):
    """Shuffle one speaker's utterances and cut into n_blocks blocks whose
    sizes differ by at most one.  The blocks partition the input."""
    if n_blocks < 2:
        raise ValueError("need at least 2 blocks")
    n = len(utts)
    if n < n_blocks:
        raise ValueError(f"cannot split {n} utterances into {n_blocks} blocks")
    order = rng.permutation(n)
    shuffled = [utts[i] for i in order]
    base, rem = divmod(n, n_blocks)
    blocks = []
    pos = 0
    for b in range(n_blocks):
        size = base + (1 if b < rem else 0)
        blocks.append(shuffled[pos:pos + size])
        pos += size
    return blocks
