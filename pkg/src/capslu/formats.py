"""On-disk formats: feature archives, manifests, alignments, parameters.

All binary layouts are little-endian and fixed:

* feature archive  -- magic "BNF1"; per record u16 id-length, UTF-8 id,
  u32 rows, u32 cols, rows*cols float32 row-major; trailing u32 record
  count.
* encoder params   -- magic "ENC1"; config block of u32/f64 fields, then
  the weight tensors as float64.
* decoder params   -- magic "CAP1"; same conventions.

The manifest is JSON lines: a header object (corpus name, feature dim,
phone inventory, speaker table) followed by one object per utterance.
Frame-level alignments live in a sibling JSON-lines file as
(phone_index, run_length) pairs.  Every format round-trips bit-exactly.
"""

import json
import struct

import numpy as np

from .corpus import (Corpus, PhoneInventory, SpeakerProfile, Utterance,
                     IS_MIN, IS_MAX)

BNF_MAGIC = b"BNF1"
ENC_MAGIC = b"ENC1"
CAP_MAGIC = b"CAP1"


class FormatError(ValueError):
    """A file failed structural validation."""


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated at byte {self.pos} "
                f"(needed {n} more, file has {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def remaining(self) -> int:
        return len(self.data) - self.pos


# ---------------------------------------------------------------------------
# feature archive
# ---------------------------------------------------------------------------

def write_bnf_archive(records, path) -> None:
    """records: iterable of (utt_id, matrix).  Matrices stored as float32."""
    seen = set()
    chunks = [BNF_MAGIC]
    count = 0
    for utt_id, mat in records:
        if utt_id in seen:
            raise FormatError(f"duplicate utterance id {utt_id!r} in archive")
        seen.add(utt_id)
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2:
            raise FormatError(f"{utt_id}: expected a 2-D matrix")
        if not np.all(np.isfinite(mat)):
            raise FormatError(f"{utt_id}: non-finite values")
        ident = utt_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(ident)))
        chunks.append(ident)
        chunks.append(struct.pack("<II", mat.shape[0], mat.shape[1]))
        chunks.append(mat.astype("<f4").tobytes(order="C"))
        count += 1
    chunks.append(struct.pack("<I", count))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_bnf_archive(path):
    """Returns list of (utt_id, float64 matrix upcast from the stored f32)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, f"archive {path}")
    if r.take(4) != BNF_MAGIC:
        raise FormatError(f"archive {path}: bad magic (expected BNF1)")
    out = []
    seen = set()
    while r.remaining() > 4:
        ident = r.take(r.u16()).decode("utf-8")
        if ident in seen:
            raise FormatError(f"archive {path}: duplicate utterance id {ident!r}")
        seen.add(ident)
        rows, cols = r.u32(), r.u32()
        raw = r.take(rows * cols * 4)
        mat = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)
        out.append((ident, mat))
    if r.remaining() != 4:
        raise FormatError(f"archive {path}: truncated trailer")
    declared = r.u32()
    if declared != len(out):
        raise FormatError(
            f"archive {path}: trailer count {declared} != {len(out)} records read")
    return out


# ---------------------------------------------------------------------------
# manifest + alignments
# ---------------------------------------------------------------------------

def _speaker_to_json(s: SpeakerProfile) -> dict:
    return {
        "speaker_id": s.speaker_id,
        "intelligibility_score": s.intelligibility_score,
        "substitution_rate": s.substitution_rate,
        "duration_jitter": s.duration_jitter,
        "prototype_offset": s.prototype_offset.tolist(),
    }


def write_manifest(corpus: Corpus, path) -> None:
    header = {
        "corpus": corpus.name,
        "feature_dim": corpus.phone_inventory.dim,
        "noise_scale": corpus.phone_inventory.noise_scale,
        "phones": list(corpus.phone_inventory.phones),
        "prototypes": corpus.phone_inventory.prototypes.tolist(),
        "speakers": [_speaker_to_json(s) for s in corpus.speakers],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for u in corpus.utterances:
            rec = {
                "utt_id": u.utt_id,
                "speaker_id": u.speaker_id,
                "is_score": corpus.speaker(u.speaker_id).intelligibility_score,
                "n_frames": u.n_frames,
                "slot_labels": sorted(u.slot_labels),
                "command_id": u.command_id,
                "phone_alignment_ref": u.utt_id,
            }
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path):
    """Returns (header dict, list of utterance record dicts)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"manifest {path}: empty file")
    parsed = []
    for i, line in enumerate(lines, start=1):
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise FormatError(f"manifest {path}: line {i}: invalid JSON ({e.msg})")
    header, records = parsed[0], parsed[1:]
    for key in ("corpus", "feature_dim", "phones", "prototypes", "speakers"):
        if key not in header:
            raise FormatError(f"manifest {path}: header missing {key!r}")
    for i, rec in enumerate(records, start=2):
        score = rec.get("is_score")
        if score is None or not (IS_MIN <= score <= IS_MAX):
            raise FormatError(
                f"manifest {path}: line {i}: is_score {score!r} outside "
                f"[{IS_MIN}, {IS_MAX}]")
    return header, records


def _alignment_to_runs(alignment: np.ndarray):
    runs = []
    for p in alignment:
        p = int(p)
        if runs and runs[-1][0] == p:
            runs[-1][1] += 1
        else:
            runs.append([p, 1])
    return runs


def _runs_to_alignment(runs) -> np.ndarray:
    out = []
    for phone, length in runs:
        out.extend([int(phone)] * int(length))
    return np.asarray(out, dtype=np.int64)


def write_alignments(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in corpus.utterances:
            rec = {"utt_id": u.utt_id, "runs": _alignment_to_runs(u.phone_alignment)}
            fh.write(json.dumps(rec) + "\n")


def read_alignments(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"alignments {path}: line {i}: invalid JSON ({e.msg})")
            out[rec["utt_id"]] = _runs_to_alignment(rec["runs"])
    return out


def write_corpus(corpus: Corpus, directory, stem: str | None = None) -> dict:
    """Write manifest + alignments + feature archive; returns the paths."""
    import os
    stem = stem or corpus.name
    paths = {
        "manifest": os.path.join(directory, f"{stem}.manifest.jsonl"),
        "alignments": os.path.join(directory, f"{stem}.align.jsonl"),
        "features": os.path.join(directory, f"{stem}.feats.bnf"),
    }
    write_manifest(corpus, paths["manifest"])
    write_alignments(corpus, paths["alignments"])
    write_bnf_archive([(u.utt_id, u.features) for u in corpus.utterances],
                      paths["features"])
    return paths


def read_corpus(directory, stem: str) -> Corpus:
    """Inverse of write_corpus.  Features come back float32-rounded."""
    import os
    header, records = read_manifest(os.path.join(directory, f"{stem}.manifest.jsonl"))
    aligns = read_alignments(os.path.join(directory, f"{stem}.align.jsonl"))
    feats = dict(read_bnf_archive(os.path.join(directory, f"{stem}.feats.bnf")))
    inventory = PhoneInventory(
        list(header["phones"]),
        np.asarray(header["prototypes"], dtype=np.float64),
        float(header.get("noise_scale", 0.0)))
    speakers = [
        SpeakerProfile(
            speaker_id=s["speaker_id"],
            intelligibility_score=float(s["intelligibility_score"]),
            prototype_offset=np.asarray(s["prototype_offset"], dtype=np.float64),
            substitution_rate=float(s["substitution_rate"]),
            duration_jitter=float(s["duration_jitter"]),
        )
        for s in header["speakers"]
    ]
    utterances = []
    for rec in records:
        uid = rec["utt_id"]
        if uid not in feats:
            raise FormatError(f"corpus {stem}: features missing for {uid}")
        if uid not in aligns:
            raise FormatError(f"corpus {stem}: alignment missing for {uid}")
        if feats[uid].shape[0] != rec["n_frames"]:
            raise FormatError(
                f"corpus {stem}: {uid} frame count mismatch "
                f"(manifest {rec['n_frames']}, archive {feats[uid].shape[0]})")
        utterances.append(Utterance(
            utt_id=uid,
            speaker_id=rec["speaker_id"],
            features=feats[uid],
            phone_alignment=aligns[uid],
            slot_labels=frozenset(rec["slot_labels"]),
            command_id=rec["command_id"],
        ))
    return Corpus(header["corpus"], utterances, speakers, inventory)


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------

def _pack_tensors(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C")
                    for a in arrays)


def _read_tensor(r: _Reader, shape) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    raw = r.take(n * 8)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def write_encoder_params(params, path) -> None:
    cfg = params.config
    head = [ENC_MAGIC]
    head.append(struct.pack("<5I", cfg.n_layers, cfg.hidden_dim, cfg.bnf_dim,
                            cfg.input_dim, cfg.n_phone_targets))
    head.append(struct.pack("<I", len(cfg.context)))
    for k, d in cfg.context:
        head.append(struct.pack("<II", k, d))
    head.append(struct.pack("<dd", cfg.lr_initial, cfg.lr_final))
    head.append(struct.pack("<II", cfg.n_epochs, cfg.batch_size))
    head.append(struct.pack("<d", cfg.finetune_normal_fraction))
    head.append(struct.pack("<I", cfg.speaker_embedding_dim))
    head.append(struct.pack("<B", 1 if params.frozen else 0))
    spk = params.embedding_speakers or []
    head.append(struct.pack("<I", len(spk)))
    for sid in spk:
        ident = sid.encode("utf-8")
        head.append(struct.pack("<H", len(ident)))
        head.append(ident)
    tensors = []
    for w, b in params.layers:
        tensors.extend([w, b])
    tensors.extend([params.w_out, params.b_out])
    if params.embeddings is not None:
        tensors.append(params.embeddings)
    with open(path, "wb") as fh:
        fh.write(b"".join(head) + _pack_tensors(tensors))


def read_encoder_params(path):
    from .encoder import EncoderConfig, EncoderParams
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, f"encoder params {path}")
    if r.take(4) != ENC_MAGIC:
        raise FormatError(f"encoder params {path}: bad magic (expected ENC1)")
    n_layers, hidden, bnf, input_dim, n_phones = struct.unpack("<5I", r.take(20))
    context = [(r.u32(), r.u32()) for _ in range(r.u32())]
    lr0, lr1 = r.f64(), r.f64()
    n_epochs, batch = r.u32(), r.u32()
    mixfrac = r.f64()
    emb_dim = r.u32()
    frozen = bool(r.u8())
    spk = [r.take(r.u16()).decode("utf-8") for _ in range(r.u32())]
    cfg = EncoderConfig(
        n_layers=n_layers, hidden_dim=hidden, bnf_dim=bnf, input_dim=input_dim,
        n_phone_targets=n_phones, context=context, lr_initial=lr0, lr_final=lr1,
        n_epochs=n_epochs, batch_size=batch, finetune_normal_fraction=mixfrac,
        speaker_embedding_dim=emb_dim)
    layers = []
    widths = cfg.layer_widths()
    c_in = cfg.effective_input_dim()
    for l, (k, _d) in enumerate(context):
        c_out = widths[l]
        w = _read_tensor(r, (k, c_in, c_out))
        b = _read_tensor(r, (c_out,))
        layers.append((w, b))
        c_in = c_out
    w_out = _read_tensor(r, (bnf, n_phones))
    b_out = _read_tensor(r, (n_phones,))
    embeddings = None
    if emb_dim > 0 and spk:
        embeddings = _read_tensor(r, (len(spk), emb_dim))
    if r.remaining() != 0:
        raise FormatError(f"encoder params {path}: {r.remaining()} trailing bytes")
    return EncoderParams(config=cfg, layers=layers, w_out=w_out, b_out=b_out,
                         frozen=frozen, embeddings=embeddings,
                         embedding_speakers=spk or None)


def write_capsule_params(params, path) -> None:
    cfg = params.config
    head = [CAP_MAGIC]
    head.append(struct.pack("<5I", cfg.n_primary, cfg.d_primary, cfg.n_output,
                            cfg.d_output, cfg.routing_iters))
    head.append(struct.pack("<5d", cfg.detect_threshold, cfg.margin_plus,
                            cfg.margin_minus, cfg.lambda_neg, cfg.learning_rate))
    head.append(struct.pack("<I", cfg.n_epochs))
    head.append(struct.pack("<d", cfg.loss_tol))
    head.append(struct.pack("<I", cfg.bnf_dim))
    tensors = [params.w_a, np.array([params.b_a]), params.w_d, params.b_d,
               params.w_s, params.w_r]
    with open(path, "wb") as fh:
        fh.write(b"".join(head) + _pack_tensors(tensors))


def read_capsule_params(path):
    from .capsule import CapsuleConfig, CapsuleParams
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, f"capsule params {path}")
    if r.take(4) != CAP_MAGIC:
        raise FormatError(f"capsule params {path}: bad magic (expected CAP1)")
    n_primary, d_primary, n_output, d_output, iters = struct.unpack("<5I", r.take(20))
    thr, m_plus, m_minus, lam, lr = struct.unpack("<5d", r.take(40))
    n_epochs = r.u32()
    loss_tol = r.f64()
    bnf_dim = r.u32()
    cfg = CapsuleConfig(
        n_output=n_output, bnf_dim=bnf_dim, n_primary=n_primary,
        d_primary=d_primary, d_output=d_output, routing_iters=iters,
        detect_threshold=thr, margin_plus=m_plus, margin_minus=m_minus,
        lambda_neg=lam, learning_rate=lr, n_epochs=n_epochs, loss_tol=loss_tol)
    w_a = _read_tensor(r, (bnf_dim,))
    b_a = float(_read_tensor(r, (1,))[0])
    w_d = _read_tensor(r, (n_primary, bnf_dim))
    b_d = _read_tensor(r, (n_primary,))
    w_s = _read_tensor(r, (d_primary, bnf_dim))
    w_r = _read_tensor(r, (n_primary, n_output, d_output, d_primary))
    if r.remaining() != 0:
        raise FormatError(f"capsule params {path}: {r.remaining()} trailing bytes")
    return CapsuleParams(config=cfg, w_a=w_a, b_a=b_a, w_d=w_d, b_d=b_d,
                         w_s=w_s, w_r=w_r)
