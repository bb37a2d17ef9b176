"""Single-query retrieval evaluation with cosine similarity."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

JUNK_ID = -1
REPORT_RANKS = (1, 5, 10, 20)
FEATURE_MAGIC = b"HBFV"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class FeatureFileError(ValueError):
    pass


class NoValidQueries(ValueError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N×D matrix")
        if not (len(self.features) == len(self.person_ids) == len(self.camera_ids)):
            raise ValueError("feature rows and metadata disagree in length")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray
    average_precisions: list[float]
    first_hit_ranks: list[int]
    num_queries: int
    num_skipped: int
    skipped: list[int] = field(default_factory=list)

    def cmc_at(self, k: int) -> float:
        if k <= len(self.cmc):
            return float(self.cmc[k - 1])
        return float(self.cmc[-1]) if len(self.cmc) else 0.0

    def summary_line(self) -> str:
        parts = [f"mAP={self.mAP:.6f}"] + [f"R{k}={self.cmc_at(k):.6f}" for k in REPORT_RANKS]
        return " ".join(parts)


def cosine_matrix(q: FeatureSet | np.ndarray, g: FeatureSet | np.ndarray, per_level: Optional[int] = None) -> np.ndarray:
    """|Q|×|G| cosine similarities (computed in float64).

    ``per_level`` optionally L2-normalizes each consecutive block of that many
    dimensions before comparison.
    """
    qf = np.asarray(q.features if isinstance(q, FeatureSet) else q, dtype=np.float64)
    gf = np.asarray(g.features if isinstance(g, FeatureSet) else g, dtype=np.float64)
    if qf.shape[1] != gf.shape[1]:
        raise ValueError(f"feature dimensions differ: {qf.shape[1]} vs {gf.shape[1]}")

    def unit(m: np.ndarray) -> np.ndarray:
        if per_level:
            blocks = m.reshape(len(m), -1, per_level)
            norms = np.linalg.norm(blocks, axis=2, keepdims=True)
            if np.any(norms == 0):
                raise ValueError("zero-norm feature block")
            m = (blocks / norms).reshape(len(m), -1)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-norm feature row")
        return m / norms

    return unit(qf) @ unit(gf).T


def rank_and_filter(scores: np.ndarray, q_pid: int, q_cam: int, g_pids: np.ndarray, g_cams: np.ndarray):
    """Gallery indices by descending score (ties: lower index first) with junk removed.

    Returns ``(indices, relevant)`` where ``relevant`` flags same-id,
    different-camera entries.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    pids = g_pids[order]
    cams = g_cams[order]
    keep = (pids != JUNK_ID) & ~((pids == q_pid) & (cams == q_cam))
    order = order[keep]
    return order, (pids[keep] == q_pid)


def average_precision(relevant: Sequence[bool]) -> Optional[float]:
    """Mean of precision at each relevant position; ``None`` if nothing is relevant."""
    rel = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return None
    precision = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision.mean())


def cmc(first_hit_ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(first_hit_ranks)
    if ranks.size == 0:
        return 0.0
    return float(np.mean(ranks <= k))


def cmc_curve(first_hit_ranks: Sequence[int], length: int) -> np.ndarray:
    ranks = np.asarray(first_hit_ranks)
    if ranks.size == 0:
        return np.zeros(length)
    counts = np.bincount(ranks - 1, minlength=length)[:length]
    return np.cumsum(counts) / ranks.size


def evaluate(q: FeatureSet, g: FeatureSet, per_level: Optional[int] = None) -> EvalReport:
    if len(q) == 0 or len(g) == 0:
        raise ValueError("query and gallery must be non-empty")
    sims = cosine_matrix(q, g, per_level)
    aps, firsts, skipped = [], [], []
    longest = 0
    for i in range(len(q)):
        _, rel = rank_and_filter(sims[i], int(q.person_ids[i]), int(q.camera_ids[i]), g.person_ids, g.camera_ids)
        longest = max(longest, len(rel))
        ap = average_precision(rel)
        if ap is None:
            skipped.append(i)
            continue
        aps.append(ap)
        firsts.append(int(np.argmax(rel)) + 1)
    if not aps:
        raise NoValidQueries("no query has a valid match in the gallery")
    return EvalReport(
        mAP=float(np.mean(aps)),
        cmc=cmc_curve(firsts, longest),
        average_precisions=aps,
        first_hit_ranks=firsts,
        num_queries=len(q),
        num_skipped=len(skipped),
        skipped=skipped,
    )


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write metrics.csv and cmc_curve.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["metric,value", f"mAP,{report.mAP:.6f}"]
    lines += [f"rank{k},{report.cmc_at(k):.6f}" for k in REPORT_RANKS]
    lines += [f"num_queries,{report.num_queries}", f"num_skipped,{report.num_skipped}"]
    metrics = out / "metrics.csv"
    metrics.write_text("\n".join(lines) + "\n")
    curve = out / "cmc_curve.csv"
    rows = ["rank,cmc"] + [f"{i + 1},{v:.6f}" for i, v in enumerate(report.cmc)]
    curve.write_text("\n".join(rows) + "\n")
    return [metrics, curve]


# ---------------------------------------------------------------------------
# feature files


def write_features(fs: FeatureSet, path) -> None:
    manifest = {
        "D": fs.dim, "N": len(fs),
        "samples": [{"person_id": int(p), "camera_id": int(c)} for p, c in zip(fs.person_ids, fs.camera_ids)],
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = np.ascontiguousarray(fs.features, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(body)) + body + data)


def read_features(path) -> FeatureSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFileError("file too short")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported version {version}")
    start = _HEADER.size + mlen
    if start > len(raw):
        raise FeatureFileError("truncated manifest")
    try:
        manifest = json.loads(raw[_HEADER.size : start])
        n, d, samples = manifest["N"], manifest["D"], manifest["samples"]
    except (ValueError, KeyError) as exc:
        raise FeatureFileError("malformed manifest") from exc
    if len(samples) != n:
        raise FeatureFileError("sample list length differs from N")
    if len(raw) - start != 4 * n * d:
        raise FeatureFileError(f"expected {4 * n * d} feature bytes, found {len(raw) - start}")
    feats = np.frombuffer(raw, dtype="<f4", offset=start).reshape(n, d).astype(np.float32)
    return FeatureSet(feats, [s["person_id"] for s in samples], [s["camera_id"] for s in samples])
