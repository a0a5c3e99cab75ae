"""Single-file skill knowledge base.

Layout: ``b"ABK1"``, an 8-byte little-endian envelope length, the envelope as
canonical JSON, then little-endian float32 blobs at the offsets the envelope
declares (relative to the start of the blob section).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import AdapterPair, SkillAdapter, freeze_decisions
from .errors import CompatibilityError, CorruptionError, FormatError, UsageError
from .subspace import SubspaceProjection

MAGIC = b"ABK1"
VERSION = 1
_F32 = np.dtype("<f4")


def f32(x) -> np.ndarray:
    """The float64 value a matrix takes after one trip through storage."""
    return np.asarray(x, dtype=np.float64).astype(_F32).astype(np.float64)


@dataclass(frozen=True)
class SkillRecord:
    skill_id: int
    name: str
    corpus_digest: str
    adapter: SkillAdapter
    subspace: SubspaceProjection
    sr_gt: float | None = None
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class KnowledgeBase:
    fingerprint: dict
    embedding_digest: str
    records: tuple[SkillRecord, ...] = ()
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def __len__(self):
        return len(self.records)

    @property
    def skill_ids(self) -> list[int]:
        return [r.skill_id for r in self.records]

    def record(self, skill_id: int) -> SkillRecord:
        for r in self.records:
            if r.skill_id == skill_id:
                return r
        raise UsageError(f"no skill {skill_id} in knowledge base")


def append_record(kb: KnowledgeBase, rec: SkillRecord) -> KnowledgeBase:
    if rec.skill_id in kb.skill_ids:
        raise UsageError(f"skill id {rec.skill_id} already stored")
    if rec.subspace.dim != kb.fingerprint.get("d", rec.subspace.dim):
        raise CompatibilityError(f"subspace dim {rec.subspace.dim} vs knowledge base d={kb.fingerprint['d']}")
    if kb.records:
        ref = kb.records[0].adapter
        shapes = [(p.a.shape, p.b.shape) for p in ref.pairs]
        if [(p.a.shape, p.b.shape) for p in rec.adapter.pairs] != shapes:
            raise CompatibilityError("adapter shapes differ from the stored skills")
    return replace(kb, records=kb.records + (rec,))


def with_meta(kb: KnowledgeBase, **meta) -> KnowledgeBase:
    return replace(kb, meta={**kb.meta, **meta})


def _blobs(rec: SkillRecord) -> list[tuple[str, np.ndarray]]:
    out = []
    for p in rec.adapter.pairs:
        out.append((f"a.{p.layer}", p.a))
        out.append((f"b.{p.layer}", p.b))
    for l, g in enumerate(rec.adapter.gate_logits):
        out.append((f"gate_logits.{l}", g))
    out.append(("basis", rec.subspace.basis))
    return out


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def serialize(kb: KnowledgeBase) -> bytes:
    records, chunks = [], []
    offset = 0
    for rec in kb.records:
        blob_index = {}
        for name, mat in _blobs(rec):
            raw = np.ascontiguousarray(mat, dtype=_F32).tobytes()
            blob_index[name] = {"shape": list(mat.shape), "offset": offset, "length": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        records.append(
            {
                "meta": {
                    "skill_id": rec.skill_id,
                    "name": rec.name,
                    "corpus_digest": rec.corpus_digest,
                    "n_layers": rec.adapter.n_layers,
                    "gate_decisions": list(rec.adapter.gates()),
                    "sr_gt": rec.sr_gt,
                    "extra": rec.meta,
                },
                "blobs": blob_index,
            }
        )
    env = {
        "version": kb.version,
        "fingerprint": kb.fingerprint,
        "embedding_digest": kb.embedding_digest,
        "meta": kb.meta,
        "records": records,
    }
    head = _canon(env)
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save(kb: KnowledgeBase, path) -> None:
    ids = kb.skill_ids
    if len(set(ids)) != len(ids):
        raise UsageError("knowledge base has duplicate skill ids")
    data = serialize(kb)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".kb-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_envelope(data: bytes) -> tuple[dict, int]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not a knowledge base file (bad magic)")
    (n,) = struct.unpack("<Q", data[4:12])
    if 12 + n > len(data):
        raise CorruptionError("envelope runs past end of file")
    try:
        env = json.loads(data[12 : 12 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"envelope is not valid JSON: {exc}") from exc
    if env.get("version") != VERSION:
        raise FormatError(f"unsupported knowledge base version {env.get('version')!r}")
    return env, 12 + n


def deserialize(data: bytes, expect_fingerprint: dict | None = None) -> KnowledgeBase:
    env, start = parse_envelope(data)
    if expect_fingerprint is not None and env["fingerprint"] != expect_fingerprint:
        raise CompatibilityError(
            f"knowledge base fingerprint {env['fingerprint']} does not match session {expect_fingerprint}"
        )
    body = memoryview(data)[start:]

    def blob(spec):
        off, length, shape = int(spec["offset"]), int(spec["length"]), tuple(spec["shape"])
        if off < 0 or off + length > len(body):
            raise CorruptionError(f"blob at offset {off} (+{length}) exceeds the {len(body)}-byte blob section")
        if length != 4 * int(np.prod(shape)):
            raise CorruptionError(f"blob length {length} does not match shape {shape}")
        return np.frombuffer(body[off : off + length], dtype=_F32).astype(np.float64).reshape(shape)

    kb = KnowledgeBase(env["fingerprint"], env["embedding_digest"], (), env.get("meta", {}), env["version"])
    records = []
    try:
        for r in env["records"]:
            m, b = r["meta"], r["blobs"]
            n_layers = int(m["n_layers"])
            pairs = [AdapterPair(l, blob(b[f"a.{l}"]), blob(b[f"b.{l}"])) for l in range(n_layers)]
            logits = [blob(b[f"gate_logits.{l}"]) for l in range(n_layers)]
            decisions = tuple(int(g) for g in m["gate_decisions"])
            adapter = SkillAdapter(int(m["skill_id"]), pairs, logits, decisions)
            records.append(
                SkillRecord(
                    int(m["skill_id"]),
                    m["name"],
                    m["corpus_digest"],
                    adapter,
                    SubspaceProjection(int(m["skill_id"]), blob(b["basis"])),
                    None if m["sr_gt"] is None else float(m["sr_gt"]),
                    m.get("extra", {}),
                )
            )
    except KeyError as exc:
        raise FormatError(f"envelope missing field {exc}") from exc
    return replace(kb, records=tuple(records))


def load(path, expect_fingerprint: dict | None = None) -> KnowledgeBase:
    return deserialize(Path(path).read_bytes(), expect_fingerprint)


def inspect(path) -> dict:
    """Envelope summary without materializing matrices."""
    data = Path(path).read_bytes()
    env, start = parse_envelope(data)
    rows = []
    for r in env["records"]:
        m = r["meta"]
        rows.append(
            {
                "skill_id": m["skill_id"],
                "name": m["name"],
                "gates": "".join(str(g) for g in m["gate_decisions"]),
                "sr_gt": m["sr_gt"],
                "rank": r["blobs"]["a.0"]["shape"][0] if "a.0" in r["blobs"] else None,
                "subspace_rank": r["blobs"]["basis"]["shape"][1],
                "bytes": sum(b["length"] for b in r["blobs"].values()),
            }
        )
    return {
        "version": env["version"],
        "fingerprint": env["fingerprint"],
        "embedding_digest": env["embedding_digest"],
        "meta": env.get("meta", {}),
        "file_bytes": len(data),
        "blob_bytes": len(data) - start,
        "records": rows,
    }


def gates_consistent(rec: SkillRecord) -> bool:
    return freeze_decisions(rec.adapter.gate_logits) == tuple(rec.adapter.gates())
