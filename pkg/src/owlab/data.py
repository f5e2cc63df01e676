"""Embedding containers, the EMB1 interchange format, and synthetic generators."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"EMB1"
_FLAG_LABELS = 0x01
_FLAG_NORMALIZED = 0x02
_HEADER = struct.Struct("<4sIIB3x")

UNIT_NORM_TOL = 1e-9


class FormatError(ValueError):
    """Stream is neither EMB1 nor parseable CSV."""


class TruncationError(ValueError):
    """Declared payload extends past the end of the stream."""


@dataclass
class EmbeddingSet:
    """An n x d block of feature vectors with optional integer labels.

    Vectors are held as float64 in memory (the EMB1 file format quantizes to
    32-bit on write).  Label -1 marks an unlabeled row.  ``normalized``
    asserts every row has unit Euclidean norm (within 1e-9); it is validated,
    not trusted.
    """

    vectors: np.ndarray
    labels: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D array")
        if self.vectors.shape[1] < 1:
            raise ValueError("d must be >= 1")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if self.labels.shape != (self.vectors.shape[0],):
                raise ValueError("labels length must equal row count")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("vectors must be finite")
        if self.normalized and self.n > 0:
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
                raise ValueError("normalized=True but rows are not unit norm")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ClassifierHead:
    """Linear classification head: logits(h) = W^T h + b, with W of shape d x C."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.ndim != 1:
            raise ValueError("W must be 2-D and b 1-D")
        if self.W.shape[1] != self.b.shape[0]:
            raise ValueError("W column count must equal b length")
        if self.b.shape[0] < 2:
            raise ValueError("need at least 2 classes")

    @property
    def n_classes(self) -> int:
        return self.b.shape[0]


@dataclass
class SyntheticSpec:
    """Parameters for one synthetic draw; ``kind`` selects which fields apply.

    kind="sphere-mixture": centers (C x d unit rows), sigma_gen, class_counts.
    kind="esn-samples":    mu, sigma, eps, count.
    kind="unit-contributions": unit_means, unit_sigmas, count.
    """

    kind: str
    seed: int
    centers: np.ndarray | None = None
    sigma_gen: float | None = None
    class_counts: Sequence[int] | None = None
    mu: float | None = None
    sigma: float | None = None
    eps: float | None = None
    count: int | None = None
    unit_means: Sequence[float] | None = None
    unit_sigmas: Sequence[float] | None = None

    def __post_init__(self):
        kinds = ("sphere-mixture", "esn-samples", "unit-contributions")
        if self.kind not in kinds:
            raise ValueError(f"unknown kind {self.kind!r}, expected one of {kinds}")
        if self.kind == "sphere-mixture":
            self.centers = np.asarray(self.centers, dtype=np.float64)
            if self.centers.ndim != 2:
                raise ValueError("centers must be C x d")
            norms = np.linalg.norm(self.centers, axis=1)
            if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
                raise ValueError("center directions must be unit norm")
            if self.sigma_gen is None or self.sigma_gen < 0:
                raise ValueError("sigma_gen must be >= 0")
            if self.class_counts is None or len(self.class_counts) != len(self.centers):
                raise ValueError("need one count per center")
            if any(c < 1 for c in self.class_counts):
                raise ValueError("counts must be >= 1")
        elif self.kind == "esn-samples":
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("sigma must be > 0")
            if self.eps is None or not -1.0 <= self.eps <= 1.0:
                raise ValueError("eps must lie in [-1, 1]")
            if self.count is None or self.count < 1:
                raise ValueError("count must be >= 1")
            if self.mu is None:
                raise ValueError("mu is required")
        else:
            self.unit_means = np.asarray(self.unit_means, dtype=np.float64)
            self.unit_sigmas = np.asarray(self.unit_sigmas, dtype=np.float64)
            if self.unit_means.shape != self.unit_sigmas.shape or self.unit_means.ndim != 1:
                raise ValueError("unit_means and unit_sigmas must be equal-length vectors")
            if np.any(self.unit_sigmas <= 0):
                raise ValueError("unit sigmas must be > 0")
            if self.count is None or self.count < 1:
                raise ValueError("count must be >= 1")


def write_embeddings(es: EmbeddingSet, destination) -> int:
    """Serialize ``es`` to the EMB1 binary format; returns bytes written.

    ``destination`` may be a path or a binary file object.  The format stores
    32-bit floats, so values that are not exactly representable are rounded;
    anything read from an EMB1 stream writes back bit-identically.
    """
    flags = 0
    if es.labels is not None:
        flags |= _FLAG_LABELS
    if es.normalized:
        flags |= _FLAG_NORMALIZED
    blob = bytearray(_HEADER.pack(MAGIC, es.n, es.d, flags))
    blob += np.ascontiguousarray(es.vectors, dtype="<f4").tobytes()
    if es.labels is not None:
        blob += np.ascontiguousarray(es.labels, dtype="<i4").tobytes()
    if hasattr(destination, "write"):
        destination.write(bytes(blob))
    else:
        with open(destination, "wb") as fh:
            fh.write(bytes(blob))
    return len(blob)


def read_embeddings(source) -> EmbeddingSet:
    """Parse EMB1 bytes (or the CSV fallback) into an EmbeddingSet.

    ``source`` may be a path, raw bytes, or a binary file object.  A stream
    that does not start with the EMB1 magic is retried as CSV; anything else
    raises FormatError.  The normalized flag is only honoured when the rows
    actually have unit norm.
    """
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()

    if not data.startswith(MAGIC):
        return _read_csv(data)

    if len(data) < _HEADER.size:
        raise TruncationError("EMB1 header is incomplete")
    _, n, d, flags = _HEADER.unpack_from(data)
    if d < 1:
        raise FormatError("EMB1 declares d < 1")
    offset = _HEADER.size
    vec_bytes = n * d * 4
    if len(data) - offset < vec_bytes:
        raise TruncationError(f"declared {n}x{d} payload exceeds stream size")
    raw = np.frombuffer(data, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    vectors = raw.astype(np.float64)
    offset += vec_bytes
    labels = None
    if flags & _FLAG_LABELS:
        if len(data) - offset < n * 4:
            raise TruncationError("label block exceeds stream size")
        labels = np.frombuffer(data, dtype="<i4", count=n, offset=offset)
    if not np.all(np.isfinite(vectors)):
        raise ValueError("embedding payload contains non-finite values")
    normalized = False
    if flags & _FLAG_NORMALIZED and n > 0:
        norms = np.linalg.norm(vectors, axis=1)
        normalized = bool(np.max(np.abs(norms - 1.0)) <= UNIT_NORM_TOL)
    return EmbeddingSet(vectors, None if labels is None else labels.copy(), normalized)


def _read_csv(data: bytes) -> EmbeddingSet:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("stream is neither EMB1 nor text") from exc
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    labeled = bool(lines) and lines[0] == "#labeled"
    if labeled:
        lines = lines[1:]
    rows, labels = [], []
    try:
        parsed = list(csv.reader(lines))
    except csv.Error as exc:
        raise FormatError("stream is neither EMB1 nor parseable CSV") from exc
    for row in parsed:
        cells = [c.strip() for c in row if c.strip()]
        if labeled:
            *floats, tag = cells
            try:
                labels.append(int(tag))
            except ValueError as exc:
                raise FormatError(f"bad label cell {tag!r}") from exc
        else:
            floats = cells
        try:
            rows.append([float(c) for c in floats])
        except ValueError as exc:
            raise FormatError("stream is neither EMB1 nor numeric CSV") from exc
    if not rows:
        raise FormatError("empty CSV stream")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise FormatError("CSV rows have inconsistent widths")
    vectors = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(vectors)):
        raise ValueError("CSV contains non-finite values")
    return EmbeddingSet(vectors, np.asarray(labels, dtype=np.int32) if labeled else None, False)


def write_head(head: ClassifierHead, destination) -> None:
    """Save a linear head as JSON: {"W": [[...], ...], "b": [...]}."""
    payload = json.dumps({"W": head.W.tolist(), "b": head.b.tolist()})
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "w") as fh:
            fh.write(payload)


def read_head(source) -> ClassifierHead:
    if hasattr(source, "read"):
        payload = json.load(source)
    else:
        with open(source) as fh:
            payload = json.load(fh)
    if not isinstance(payload, dict) or "W" not in payload or "b" not in payload:
        raise FormatError("head file must be a JSON object with keys W and b")
    return ClassifierHead(np.asarray(payload["W"]), np.asarray(payload["b"]))


def gen_sphere_mixture(spec: SyntheticSpec) -> EmbeddingSet:
    """Unit-sphere Gaussian mixture: normalize(center_c + sigma_gen * g) per row."""
    if spec.kind != "sphere-mixture":
        raise ValueError("spec.kind must be sphere-mixture")
    rng = np.random.default_rng(spec.seed)
    d = spec.centers.shape[1]
    blocks, labels = [], []
    for c, (center, count) in enumerate(zip(spec.centers, spec.class_counts)):
        if spec.sigma_gen == 0:
            rows = np.tile(center, (count, 1))
        else:
            rows = center + spec.sigma_gen * rng.standard_normal((count, d))
            norms = np.linalg.norm(rows, axis=1)
            for i in np.flatnonzero(norms == 0.0):
                rows[i] = center + spec.sigma_gen * rng.standard_normal(d)
                if np.linalg.norm(rows[i]) == 0.0:
                    raise ValueError("degenerate zero vector after resampling")
                norms[i] = np.linalg.norm(rows[i])
            rows /= norms[:, None]
        blocks.append(rows)
        labels.extend([c] * count)
    return EmbeddingSet(np.vstack(blocks), np.asarray(labels, dtype=np.int32), True)


def gen_esn_samples(spec: SyntheticSpec) -> np.ndarray:
    """Draw from the epsilon-skew-normal law ESN(mu, sigma^2, eps).

    With probability (1+eps)/2 a draw is mu - (1+eps)*sigma*|g|, otherwise
    mu + (1-eps)*sigma*|g| (g standard normal): the left branch of the density
    carries mass (1+eps)/2 and the right branch the remainder.
    """
    if spec.kind != "esn-samples":
        raise ValueError("spec.kind must be esn-samples")
    rng = np.random.default_rng(spec.seed)
    left = rng.random(spec.count) < (1.0 + spec.eps) / 2.0
    g = np.abs(rng.standard_normal(spec.count))
    return np.where(
        left,
        spec.mu - (1.0 + spec.eps) * spec.sigma * g,
        spec.mu + (1.0 - spec.eps) * spec.sigma * g,
    )


def gen_unit_contributions(spec: SyntheticSpec) -> np.ndarray:
    """Sample an n x m matrix with independent columns v_i ~ Normal(mu_i, sigma_i^2)."""
    if spec.kind != "unit-contributions":
        raise ValueError("spec.kind must be unit-contributions")
    rng = np.random.default_rng(spec.seed)
    m = len(spec.unit_means)
    g = rng.standard_normal((spec.count, m))
    return spec.unit_means + spec.unit_sigmas * g
