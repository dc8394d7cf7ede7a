"""Domains, the synthetic multi-subject benchmark, and the MELD v1 file format.

MELD v1 layout (all integers little-endian u32)::

    b"MELD" | version=1 | n_domains
    per domain:
        subject_id | n_samples | seq_len | feat_dim | n_classes
        labels      n_samples x u8
        frames      n_samples*seq_len*feat_dim x f64 little-endian, row-major
"""
from __future__ import annotations

import csv
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MELD"
VERSION = 1
_U32 = struct.Struct("<I")
_DOMAIN_HEADER = struct.Struct("<5I")

SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = 0xFFFFFFFFFFFFFFFF


class DatasetFormatError(ValueError):
    pass


class SplitMix64:
    """SplitMix64 stream. Normals come from Box-Muller, two draws per normal
    (cosine branch only), so any implementation following the same recipe
    reproduces the stream."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + k * SPLITMIX_GAMMA
        self.state = (self.state + n * int(SPLITMIX_GAMMA)) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """Uniform doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        u1 = 1.0 - u[:, 0]  # (0, 1], keeps log finite
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[:, 1])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n > 1:
            draws = self.next_u64(n - 1)
            for i, d in zip(range(n - 1, 0, -1), draws):
                j = int(d % np.uint64(i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm


@dataclass
class Domain:
    """One subject: ``x`` is (n_samples, seq_len, feat_dim), ``y`` holds class ids."""

    subject_id: int
    x: np.ndarray
    y: np.ndarray
    n_classes: int = 3
    provenance: str = "synthetic"

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3:
            raise ValueError(f"domain {self.subject_id}: samples must be 3-D, got {self.x.shape}")
        if len(self.y) != len(self.x):
            raise ValueError(f"domain {self.subject_id}: {len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"domain {self.subject_id}: labels outside 0..{self.n_classes - 1}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def seq_len(self) -> int:
        return self.x.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.x.shape[2]


@dataclass
class SynthSpec:
    n_domains: int = 8
    n_classes: int = 3
    feat_dim: int = 20
    seq_len: int = 15
    samples_per_class: int = 120
    shift_strength: float = 0.6
    noise_sigma: float = 0.3
    class_scale: float = 0.25
    seed: int = 42

    def validate(self) -> None:
        for name in ("n_domains", "n_classes", "feat_dim", "seq_len", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.shift_strength < 0:
            raise ValueError("shift_strength must be >= 0")
        if self.noise_sigma < 0 or self.class_scale < 0:
            raise ValueError("noise_sigma and class_scale must be >= 0")


def gen_synthetic(spec: SynthSpec | None = None) -> list[Domain]:
    """Gaussian class-conditional sequences under a per-domain affine shift.

    Draw order from one SplitMix64 stream: class means (n_classes x feat_dim,
    scaled by ``class_scale``); then per domain: R (feat_dim x feat_dim, scaled
    by 1/sqrt(feat_dim)), b (feat_dim), and the noise for every sample, class
    by class. Frames are ``m_c + noise_sigma * z`` mapped through
    ``x -> (I + eps R) x + eps b``.
    """
    spec = spec or SynthSpec()
    spec.validate()
    rng = SplitMix64(spec.seed)
    f, k, t, n = spec.feat_dim, spec.n_classes, spec.seq_len, spec.samples_per_class
    eps = spec.shift_strength
    means = rng.normal(k * f).reshape(k, f) * spec.class_scale
    domains = []
    for s in range(spec.n_domains):
        rot = rng.normal(f * f).reshape(f, f) / np.sqrt(f)
        bias = rng.normal(f)
        z = rng.normal(k * n * t * f).reshape(k, n, t, f)
        clean = means[:, None, None, :] + spec.noise_sigma * z
        x = clean @ (np.eye(f) + eps * rot).T + eps * bias
        y = np.repeat(np.arange(k), n)
        domains.append(Domain(s + 1, x.reshape(k * n, t, f), y, k, "synthetic"))
    return domains


def dumps(domains: list[Domain]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    buf.write(_U32.pack(len(domains)))
    for d in domains:
        n, t, f = d.x.shape
        buf.write(_DOMAIN_HEADER.pack(d.subject_id, n, t, f, d.n_classes))
        buf.write(d.y.astype(np.uint8).tobytes())
        buf.write(d.x.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes, provenance: str = "imported") -> list[Domain]:
    view = memoryview(blob)
    if len(blob) < 12:
        raise DatasetFormatError(f"truncated header: {len(blob)} bytes")
    magic = bytes(view[:4])
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = _U32.unpack_from(view, 4)[0]
    if version != VERSION:
        raise DatasetFormatError(f"unsupported MELD version {version}")
    n_domains = _U32.unpack_from(view, 8)[0]
    pos = 12
    domains = []
    dims = None
    for i in range(n_domains):
        if pos + _DOMAIN_HEADER.size > len(blob):
            raise DatasetFormatError(f"truncated file: header of domain {i} missing")
        sid, n, t, f, k = _DOMAIN_HEADER.unpack_from(view, pos)
        pos += _DOMAIN_HEADER.size
        if dims is not None and (t, f) != dims:
            raise DatasetFormatError(
                f"dimension mismatch: domain {sid} has seq_len={t}, feat_dim={f}; expected {dims}"
            )
        dims = (t, f)
        need = n + 8 * n * t * f
        if pos + need > len(blob):
            have = len(blob) - pos
            raise DatasetFormatError(
                f"truncated file: domain {sid} declares {n} samples ({need} bytes) but {have} remain"
            )
        y = np.frombuffer(view[pos : pos + n], dtype=np.uint8).astype(np.int64)
        pos += n
        x = np.frombuffer(view[pos : pos + 8 * n * t * f], dtype="<f8").reshape(n, t, f).astype(np.float64)
        pos += 8 * n * t * f
        domains.append(Domain(sid, x, y, k, provenance))
    if pos != len(blob):
        raise DatasetFormatError(f"{len(blob) - pos} trailing bytes after last domain")
    return domains


def write_dataset(domains: list[Domain], path) -> None:
    Path(path).write_bytes(dumps(domains))


def read_dataset(path, provenance: str = "imported") -> list[Domain]:
    return loads(Path(path).read_bytes(), provenance)


def dataset_sha256(domains: list[Domain]) -> str:
    return hashlib.sha256(dumps(domains)).hexdigest()


def write_csv(domains: list[Domain], path) -> None:
    """Flat export: one row per (sample, time step) with features f0..f{F-1}."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        feat = domains[0].feat_dim if domains else 0
        w.writerow(["subject_id", "sample", "step", "label"] + [f"f{j}" for j in range(feat)])
        for d in domains:
            for i in range(len(d)):
                for s in range(d.seq_len):
                    w.writerow([d.subject_id, i, s, int(d.y[i])] + [repr(float(v)) for v in d.x[i, s]])


@dataclass
class BatchSampler:
    """Per-domain minibatches without replacement within an epoch.

    Each domain keeps its own shuffled order; when it runs out, a fresh
    permutation starts the next epoch.
    """

    domains: dict[int, Domain]
    batch_size: int
    rng: SplitMix64
    _order: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _pos: dict[int, int] = field(default_factory=dict, repr=False)

    def draw(self, subject_id: int) -> tuple[np.ndarray, np.ndarray]:
        d = self.domains[subject_id]
        n = len(d)
        size = min(self.batch_size, n)
        idx = []
        while len(idx) < size:
            pos = self._pos.get(subject_id, n)
            if pos >= n:
                self._order[subject_id] = self.rng.permutation(n)
                pos = 0
            take = min(size - len(idx), n - pos)
            idx.extend(self._order[subject_id][pos : pos + take])
            self._pos[subject_id] = pos + take
        idx = np.asarray(idx)
        return d.x[idx], d.y[idx]
