"""Feature / annotation / model files, window sampling, synthetic data.

Binary layouts (all little-endian):

SFFT features: magic ``SFFT`` | version u32 | feature_rate f64 | num_frames u32
| dim u32 | num_frames*dim f32 row-major.

SFRU model: magic ``SFRU`` | version u32 | entry count u32 | per entry:
name length u32, utf-8 name, rank u32, rank*u32 dims, f64 payload |
config length u32 | utf-8 JSON config.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import ParamStore

FEATURE_MAGIC = b"SFFT"
FEATURE_VERSION = 1
MODEL_MAGIC = b"SFRU"
MODEL_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIdII")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


# ---------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureFile:
    feature_rate: float
    data: np.ndarray  # (num_frames, dim) float32

    def __post_init__(self):
        if not self.feature_rate > 0:
            raise ValueError(f"feature_rate must be positive, got {self.feature_rate}")
        if self.data.ndim != 2:
            raise ValueError(f"feature payload must be 2-D, got {self.data.shape}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.num_frames / self.feature_rate


def encode_features(f: FeatureFile) -> bytes:
    payload = np.ascontiguousarray(f.data, dtype="<f4").tobytes()
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, float(f.feature_rate),
                                f.num_frames, f.dim) + payload


def decode_features(buf: bytes) -> FeatureFile:
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"not an SFFT feature file (magic {buf[:4]!r})")
    if len(buf) < _FEATURE_HEADER.size:
        raise TruncatedError("feature header truncated")
    _, version, rate, n, dim = _FEATURE_HEADER.unpack_from(buf)
    if version != FEATURE_VERSION:
        raise BadVersionError(f"unsupported feature file version {version}")
    need = _FEATURE_HEADER.size + 4 * n * dim
    if len(buf) < need:
        raise TruncatedError(f"feature payload truncated: {len(buf)} < {need} bytes")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after feature payload")
    data = np.frombuffer(buf, dtype="<f4", count=n * dim,
                         offset=_FEATURE_HEADER.size).reshape(n, dim).astype(np.float32)
    return FeatureFile(rate, data)


def write_features(path, f: FeatureFile) -> None:
    _atomic_write(path, encode_features(f))


def read_features(path) -> FeatureFile:
    return decode_features(Path(path).read_bytes())


def _atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8", newline="")
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- windows

def window_indices(start: float, alpha: float, T: int, rate: float) -> np.ndarray:
    """Frame index feeding each of the T steps before ``start``.

    Step t (1-based) reads the frame at ``start - alpha * (T - t + 1)``,
    mapped to the nearest earlier frame; negative timestamps clamp to 0.
    """
    if not (alpha > 0 and T > 0):
        raise ValueError(f"alpha and T must be positive, got {alpha}, {T}")
    ts = start - alpha * np.arange(T, 0, -1)
    idx = np.floor(ts * rate + 1e-9).astype(np.int64)
    return np.maximum(idx, 0)


def sample_window(f: FeatureFile, start: float, alpha: float, T: int) -> np.ndarray:
    """(T, D) float64 sequence ending ``alpha`` seconds before ``start``."""
    if start > f.duration:
        raise ValueError(f"action start {start}s beyond video end {f.duration}s")
    idx = window_indices(start, alpha, T, f.feature_rate)
    return f.data[np.minimum(idx, f.num_frames - 1)].astype(np.float64)


# ---------------------------------------------------------------- annotations

@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    start_sec: float
    class_id: int

    def __post_init__(self):
        if self.start_sec < 0:
            raise ValueError(f"{self.video_id}: negative start {self.start_sec}")
        if self.class_id < 0:
            raise ValueError(f"{self.video_id}: negative class id {self.class_id}")


def write_annotations(path, records: Iterable[AnnotationRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video_id", "start_sec", "class_id"])
    for r in records:
        w.writerow([r.video_id, repr(float(r.start_sec)), r.class_id])
    _atomic_write(path, buf.getvalue())


def read_annotations(path, num_classes: int | None = None) -> list[AnnotationRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["video_id", "start_sec", "class_id"]:
            raise FormatError(f"bad annotation header {reader.fieldnames}")
        out = [AnnotationRecord(r["video_id"], float(r["start_sec"]), int(r["class_id"]))
               for r in reader]
    if num_classes is not None:
        bad = [r for r in out if r.class_id >= num_classes]
        if bad:
            raise ValueError(f"class id {bad[0].class_id} >= {num_classes} classes")
    return out


def write_classes(path, names: Sequence[str]) -> None:
    _atomic_write(path, "".join(n + "\n" for n in names))


def read_classes(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    """Videos per modality plus one annotation per sample."""
    videos: dict[str, dict[str, FeatureFile]]
    annotations: list[AnnotationRecord]
    classes: list[str]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def modalities(self) -> list[str]:
        return list(self.videos)

    @property
    def labels(self) -> np.ndarray:
        return np.array([a.class_id for a in self.annotations], dtype=np.int64)

    def dim(self, modality: str) -> int:
        return next(iter(self.videos[modality].values())).dim

    def __len__(self) -> int:
        return len(self.annotations)

    def windows(self, alpha: float, T: int, modalities: Sequence[str] | None = None
                ) -> dict[str, np.ndarray]:
        """{modality: (N, T, D)} windows for every annotation."""
        out = {}
        for m in modalities or self.modalities:
            key = (m, round(alpha, 12), T)
            if key not in self._cache:
                vids = self.videos[m]
                self._cache[key] = np.stack(
                    [sample_window(vids[a.video_id], a.start_sec, alpha, T)
                     for a in self.annotations]) if self.annotations else \
                    np.zeros((0, T, self.dim(m)))
            out[m] = self._cache[key]
        return out

    def short_videos(self, window_sec: float) -> list[str]:
        """Videos shorter than ``window_sec`` (cannot hold one window)."""
        m = self.modalities[0]
        return sorted({a.video_id for a in self.annotations
                       if self.videos[m][a.video_id].duration < window_sec - 1e-9})

    def subset(self, idx) -> "Dataset":
        anns = [self.annotations[i] for i in idx]
        keep = {a.video_id for a in anns}
        vids = {m: {k: v for k, v in d.items() if k in keep} for m, d in self.videos.items()}
        return Dataset(vids, anns, self.classes)

    def split(self, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> tuple["Dataset", ...]:
        """Deterministic random partition by annotation."""
        perm = np.random.default_rng(seed).permutation(len(self))
        cuts = np.round(np.cumsum(fractions) / sum(fractions) * len(self)).astype(int)
        parts = np.split(perm, cuts[:-1])
        return tuple(self.subset(np.sort(p)) for p in parts)

    def save(self, root) -> None:
        root = Path(root)
        for m, vids in self.videos.items():
            (root / "features" / m).mkdir(parents=True, exist_ok=True)
            for vid, f in vids.items():
                write_features(root / "features" / m / f"{vid}.sfft", f)
        write_annotations(root / "annotations.csv", self.annotations)
        write_classes(root / "classes.txt", self.classes)

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        classes = read_classes(root / "classes.txt")
        anns = read_annotations(root / "annotations.csv", len(classes))
        videos = {}
        for mdir in sorted(p for p in (root / "features").iterdir() if p.is_dir()):
            videos[mdir.name] = {a.video_id: read_features(mdir / f"{a.video_id}.sfft")
                                 for a in anns}
        if not videos:
            raise FormatError(f"no feature directories under {root / 'features'}")
        return cls(videos, anns, classes)


# ---------------------------------------------------------------- synthetic data

def fold_frequency(f: float, sample_rate: float) -> float:
    """Apparent frequency of a real sinusoid sampled at ``sample_rate``."""
    return abs(f - sample_rate * round(f / sample_rate))


@dataclass(frozen=True)
class SyntheticSpec:
    """Paired-class sinusoid data.

    Classes come in pairs; a pair shares a unit prototype direction in two
    designated coordinates and its two members differ only in frequency.
    The first half of the pairs use ``slow_freqs`` (resolvable at the slow
    step), the rest use ``fast_freqs``, which fold onto the same apparent
    frequency at the slow step and can only be told apart on a finer grid.
    """
    classes: int = 8
    per_class: int = 200
    dim: int = 16
    feature_rate: float = 30.0
    sigma: float = 0.1
    slow_freqs: tuple[float, float] = (0.25, 0.5)
    fast_freqs: tuple[float, float] = (2.5, 3.5)
    alpha_s: float = 0.5
    seed: int = 0
    modalities: tuple[str, ...] = ("rgb",)
    context_periods: float = 3.0
    tail_sec: float = 0.5

    def validate(self) -> None:
        if self.classes < 2 or self.classes % 2:
            raise ValueError(f"class count must be even and >= 2, got {self.classes}")
        if self.dim < self.classes:
            raise ValueError(f"dim={self.dim} < classes={self.classes}: two coordinates per pair")
        if self.per_class < 0 or self.sigma < 0 or not self.feature_rate > 0:
            raise ValueError("per_class, sigma must be >= 0 and feature_rate > 0")
        fs = 1.0 / self.alpha_s
        a, b = self.fast_freqs
        if a == b or abs(fold_frequency(a, fs) - fold_frequency(b, fs)) > 1e-9:
            raise ValueError(f"fast frequencies {self.fast_freqs} do not alias to one "
                             f"apparent frequency at {fs:g} Hz sampling")
        for f in self.slow_freqs:
            if not 0 < f < fs / 2:
                raise ValueError(f"slow frequency {f} not resolvable at {fs:g} Hz sampling")
        if self.slow_freqs[0] == self.slow_freqs[1]:
            raise ValueError("slow frequencies must differ")
        if max(self.fast_freqs) >= self.feature_rate / 2:
            raise ValueError("fast frequencies exceed the feature Nyquist rate")

    @property
    def n_pairs(self) -> int:
        return self.classes // 2

    @property
    def n_slow_pairs(self) -> int:
        return self.n_pairs - self.n_pairs // 2

    def class_frequency(self, c: int) -> float:
        pair = c // 2
        freqs = self.slow_freqs if pair < self.n_slow_pairs else self.fast_freqs
        return freqs[c % 2]

    def is_fast_class(self, c: int) -> bool:
        return c // 2 >= self.n_slow_pairs

    def class_names(self) -> list[str]:
        return [f"{'fast' if self.is_fast_class(c) else 'slow'}{c // 2}_{self.class_frequency(c):g}hz"
                for c in range(self.classes)]


def synth_generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic in ``spec.seed``; one video per sample."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D, rate = spec.dim, spec.feature_rate
    protos = np.zeros((spec.n_pairs, D))
    for p in range(spec.n_pairs):
        beta = rng.uniform(0, 2 * np.pi)
        protos[p, 2 * p], protos[p, 2 * p + 1] = np.cos(beta), np.sin(beta)
    # extra modalities see the clean signal through a fixed random rotation
    mixers = [np.eye(D)] + [np.linalg.qr(rng.normal(size=(D, D)))[0]
                            for _ in spec.modalities[1:]]
    min_context = spec.context_periods / min(spec.slow_freqs)
    base_frames = math.ceil(min_context * rate)

    videos = {m: {} for m in spec.modalities}
    anns = []
    for c in range(spec.classes):
        f = spec.class_frequency(c)
        for i in range(spec.per_class):
            vid = f"v{c:03d}_{i:05d}"
            start_frame = base_frames + int(rng.integers(0, int(rate) + 1))
            start = start_frame / rate
            n = start_frame + math.ceil(spec.tail_sec * rate)
            t = np.arange(n) / rate
            phase = rng.uniform(0, 2 * np.pi)
            clean = np.sin(2 * np.pi * f * t + phase)[:, None] * protos[c // 2]
            for m, mix in zip(spec.modalities, mixers):
                x = clean @ mix + spec.sigma * rng.normal(size=(n, D))
                videos[m][vid] = FeatureFile(rate, x.astype(np.float32))
            anns.append(AnnotationRecord(vid, start, c))
    return Dataset(videos, anns, spec.class_names())


# ---------------------------------------------------------------- models

def encode_store(store: ParamStore, config: dict) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(store))]
    for name in store:
        arr = store[name]
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"model file truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_store(buf: bytes) -> tuple[ParamStore, dict]:
    r = _Reader(buf)
    if r.take(4) != MODEL_MAGIC:
        raise BadMagicError("not an SFRU model file")
    version = r.u32()
    if version != MODEL_VERSION:
        raise BadVersionError(f"unsupported model file version {version}")
    store = ParamStore()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        if name in store:
            raise FormatError(f"duplicate parameter name {name!r}")
        store.add(name, arr)
    cfg = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes in model file")
    return store, cfg


def save_store(path, store: ParamStore, config: dict) -> None:
    _atomic_write(path, encode_store(store, config))


def load_store(path) -> tuple[ParamStore, dict]:
    return decode_store(Path(path).read_bytes())


def save_model(path, model) -> None:
    cfg = model.config.to_dict()
    cfg["tag"] = model.config.tag
    save_store(path, model.store, cfg)


def load_model(path):
    from .model import Model, ModelConfig

    store, cfg = load_store(path)
    cfg = dict(cfg)
    cfg.pop("tag", None)
    config = ModelConfig.from_dict(cfg)
    expected = set(Model(config).store)
    if expected != set(store):
        raise FormatError(f"parameter names do not match the stored config: "
                          f"{sorted(expected ^ set(store))[:5]}")
    return Model(config, store)
