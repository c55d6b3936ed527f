"""Synthetic "clinic" domains: 2D images with disc-shaped lesions.

Each clinic differs in contrast (gamma), lesion intensity, noise, blur
anisotropy and lesion size, so a model trained on one clinic loses accuracy
on another. Labels of target-domain data are sealed: pipelines can see the
images only, and evaluation code must call :meth:`Sample.unseal` explicitly.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MAGIC = b"SDDA"
FORMAT_VERSION = 1

SOURCE_TRAIN = "source_train"
TARGET_UNLABELED = "target_unlabeled"
TARGET_TEST = "target_test"
# labelled target subjects, only used for the upper-bound baseline
TARGET_LABELED = "target_labeled"
ROLES = (SOURCE_TRAIN, TARGET_UNLABELED, TARGET_TEST, TARGET_LABELED)
SEALED_ROLES = (TARGET_UNLABELED, TARGET_TEST)

BASE_LESION_CONTRAST = 0.5
BACKGROUND_SMOOTHING = 3.0


class SealedLabelError(PermissionError):
    """Labels of unlabeled/test target data were requested outside evaluation."""


class DatasetFileError(ValueError):
    pass


class FormatError(DatasetFileError):
    pass


class VersionError(DatasetFileError):
    pass


class TruncatedError(DatasetFileError):
    pass


class ChecksumError(DatasetFileError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    image_size: tuple[int, int] = (32, 32)
    background_mean: float = 0.3
    background_std: float = 0.05
    lesion_intensity_shift: float = 0.0
    contrast_gamma: float = 1.0
    noise_std: float = 0.1
    lesion_count_range: tuple[int, int] = (2, 5)
    lesion_radius_range: tuple[float, float] = (2.0, 4.0)
    anisotropy: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        for name in ("image_size", "lesion_count_range", "lesion_radius_range", "anisotropy"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        h, w = self.image_size
        if h % 4 or w % 4 or h <= 0 or w <= 0:
            raise ValueError(f"image_size {self.image_size} must be positive multiples of 4")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        lo, hi = self.lesion_count_range
        if not 0 <= lo <= hi:
            raise ValueError("lesion_count_range must be ordered and non-negative")
        rlo, rhi = self.lesion_radius_range
        if not 0 < rlo <= rhi:
            raise ValueError("lesion_radius_range must be positive and ordered")
        if self.contrast_gamma <= 0:
            raise ValueError("contrast_gamma must be positive")
        if min(self.anisotropy) < 0:
            raise ValueError("anisotropy blur scales must be >= 0")


@dataclass(frozen=True)
class GroundTruth:
    labels: np.ndarray  # (H, W) uint8
    discs: tuple[tuple[float, float, float], ...]  # (cy, cx, radius)


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # (1, H, W) float32
    domain_id: str
    subject_id: int
    _truth: GroundTruth | None = field(default=None, repr=False)
    sealed: bool = False

    @property
    def has_labels(self) -> bool:
        return self._truth is not None

    @property
    def labels(self) -> np.ndarray | None:
        if self.sealed:
            raise SealedLabelError(
                f"labels of {self.domain_id}/{self.subject_id} are sealed for evaluation"
            )
        return None if self._truth is None else self._truth.labels

    @property
    def discs(self) -> tuple:
        if self.sealed:
            raise SealedLabelError(f"lesion geometry of {self.domain_id}/{self.subject_id} is sealed")
        return () if self._truth is None else self._truth.discs

    def unseal(self) -> np.ndarray:
        """Ground truth for evaluation. The only way past the seal."""
        if self._truth is None:
            raise SealedLabelError(f"{self.domain_id}/{self.subject_id} has no ground truth")
        return self._truth.labels

    def with_seal(self, sealed: bool) -> "Sample":
        return replace(self, sealed=sealed)

    def key(self) -> str:
        return f"{self.domain_id}/{self.subject_id}"

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.domain_id == other.domain_id
            and self.subject_id == other.subject_id
            and self.sealed == other.sealed
            and np.array_equal(self.image, other.image)
            and self.image.dtype == other.image.dtype
            and (self._truth is None) == (other._truth is None)
            and (
                self._truth is None
                or (
                    np.array_equal(self._truth.labels, other._truth.labels)
                    and self._truth.discs == other._truth.discs
                )
            )
        )


@dataclass(eq=False)
class Dataset:
    samples: list[Sample]
    role: str = SOURCE_TRAIN
    spec: DomainSpec | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        sealed = self.role in SEALED_ROLES
        self.samples = [s if s.sealed == sealed else s.with_seal(sealed) for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.role == other.role
            and self.spec == other.spec
            and self.seed == other.seed
            and self.samples == other.samples
        )

    @property
    def labeled(self) -> bool:
        return self.role not in SEALED_ROLES and all(s.has_labels for s in self.samples)

    def images(self) -> np.ndarray:
        """Model-ready (n, 1, H, W) float64 batch, each image standardised."""
        return standardize(np.stack([s.image for s in self.samples]))

    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples])

    def subset(self, indices, role: str | None = None) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], role or self.role, self.spec, self.seed)

    def with_role(self, role: str) -> "Dataset":
        return Dataset(list(self.samples), role, self.spec, self.seed)

    def checksum(self) -> str:
        """Hash of images and identities only, so it never touches sealed labels."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(s.key().encode())
            h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        return h.hexdigest()


def standardize(images: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per image; the fixed input transform of every model."""
    x = np.asarray(images, dtype=np.float64)
    axes = tuple(range(1, x.ndim)) if x.ndim > 2 else None
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return (x - mean) / (std + 1e-6)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _subject_rngs(spec: DomainSpec, n: int, seed: int) -> list[np.random.Generator]:
    tag = zlib.crc32(spec.domain_id.encode())
    return [np.random.default_rng(s) for s in np.random.SeedSequence([int(seed), tag]).spawn(n)]


def _generate_sample(spec: DomainSpec, rng: np.random.Generator, subject_id: int) -> Sample:
    H, W = spec.image_size
    field_ = gaussian_filter(rng.standard_normal((H, W)), BACKGROUND_SMOOTHING, mode="wrap")
    field_ /= field_.std() + 1e-12
    background = spec.background_mean + spec.background_std * field_

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    mask = np.zeros((H, W), dtype=bool)
    layer = np.zeros((H, W))
    lo, hi = spec.lesion_count_range
    discs = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        r = float(rng.uniform(*spec.lesion_radius_range))
        cy = float(rng.uniform(r, H - 1 - r))
        cx = float(rng.uniform(r, W - 1 - r))
        dist = np.hypot(yy - cy, xx - cx)
        mask |= dist <= r
        # anti-aliased edge: full intensity inside r - 0.5, zero beyond r + 0.5
        layer = np.maximum(layer, np.clip(r + 0.5 - dist, 0.0, 1.0))
        discs.append((cy, cx, r))

    contrast = BASE_LESION_CONTRAST + spec.lesion_intensity_shift
    img = np.clip(background + contrast * layer, 0.0, None) ** spec.contrast_gamma
    sy, sx = spec.anisotropy[1], spec.anisotropy[0]
    if sy > 0 or sx > 0:
        img = gaussian_filter(img, (sy, sx), mode="nearest")
    img = img + spec.noise_std * rng.standard_normal((H, W))
    truth = GroundTruth(mask.astype(np.uint8), tuple(discs))
    return Sample(img.astype(np.float32)[None], spec.domain_id, subject_id, truth)


def generate_domain(spec: DomainSpec, n: int, seed: int, role: str = SOURCE_TRAIN) -> Dataset:
    """``n`` subjects from ``spec``; subject i depends only on (spec, seed, i)."""
    if n <= 0:
        raise ValueError("n must be positive")
    rngs = _subject_rngs(spec, n, seed)
    samples = [_generate_sample(spec, rng, i) for i, rng in enumerate(rngs)]
    return Dataset(samples, role, spec, int(seed))


UTRECHT = DomainSpec(
    domain_id="utrecht",
    background_mean=0.30,
    background_std=0.12,
    lesion_intensity_shift=0.15,
    contrast_gamma=0.8,
    noise_std=0.05,
    lesion_radius_range=(2.0, 3.6),
    anisotropy=(0.5, 0.5),
)
SINGAPORE = DomainSpec(
    domain_id="singapore",
    background_mean=0.30,
    background_std=0.05,
    lesion_intensity_shift=-0.05,
    contrast_gamma=1.0,
    noise_std=0.10,
    lesion_radius_range=(2.0, 4.0),
    anisotropy=(1.6, 0.2),
)
AMSTERDAM = DomainSpec(
    domain_id="amsterdam",
    background_mean=0.30,
    background_std=0.05,
    lesion_intensity_shift=-0.15,
    contrast_gamma=1.3,
    noise_std=0.15,
    lesion_radius_range=(2.4, 4.2),
    anisotropy=(0.3, 1.2),
)


def default_clinics() -> tuple[DomainSpec, DomainSpec, DomainSpec]:
    return UTRECHT, SINGAPORE, AMSTERDAM


def clinic_by_name(name: str) -> DomainSpec:
    for spec in default_clinics():
        if spec.domain_id == name.lower():
            return spec
    raise KeyError(f"unknown clinic {name!r}; known: {[s.domain_id for s in default_clinics()]}")


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _sha(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds``: magic, u16 version, u32 manifest length, JSON manifest, buffers."""
    buffers = []
    entries = []
    for s in ds.samples:
        img = np.ascontiguousarray(s.image, dtype="<f4").tobytes()
        entry = {
            "subject_id": s.subject_id,
            "domain_id": s.domain_id,
            "shape": list(s.image.shape),
            "image_sha256": _sha(img),
            "has_labels": s.has_labels,
        }
        buffers.append(img)
        if s.has_labels:
            lab = np.ascontiguousarray(s._truth.labels, dtype="u1").tobytes()
            entry["labels_sha256"] = _sha(lab)
            entry["discs"] = [list(d) for d in s._truth.discs]
            buffers.append(lab)
        entries.append(entry)
    manifest = {
        "role": ds.role,
        "seed": ds.seed,
        "spec": None if ds.spec is None else asdict(ds.spec),
        "samples": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def _take(raw: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(raw):
        raise TruncatedError(f"file ends inside {what}")
    return raw[offset:offset + n]


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if _take(raw, 0, 4, "magic") != MAGIC:
        raise FormatError("bad magic bytes: not a dataset file")
    version, mlen = struct.unpack("<HI", _take(raw, 4, 6, "header"))
    if version != FORMAT_VERSION:
        raise VersionError(f"dataset format version {version}, reader supports {FORMAT_VERSION}")
    try:
        manifest = json.loads(_take(raw, 10, mlen, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from None
    offset = 10 + mlen
    samples = []
    for e in manifest["samples"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape))
        img = _take(raw, offset, 4 * n, f"image of subject {e['subject_id']}")
        offset += 4 * n
        if _sha(img) != e["image_sha256"]:
            raise ChecksumError(f"image checksum mismatch for subject {e['subject_id']}")
        truth = None
        if e["has_labels"]:
            lab = _take(raw, offset, n, f"labels of subject {e['subject_id']}")
            offset += n
            if _sha(lab) != e["labels_sha256"]:
                raise ChecksumError(f"label checksum mismatch for subject {e['subject_id']}")
            labels = np.frombuffer(lab, dtype="u1").reshape(shape[1:]).copy()
            truth = GroundTruth(labels, tuple(tuple(d) for d in e["discs"]))
        image = np.frombuffer(img, dtype="<f4").reshape(shape).astype(np.float32)
        samples.append(Sample(image, e["domain_id"], int(e["subject_id"]), truth))
    if offset != len(raw):
        raise FormatError("trailing bytes after last sample")
    spec = None if manifest["spec"] is None else DomainSpec(**manifest["spec"])
    return Dataset(samples, manifest["role"], spec, manifest["seed"])
