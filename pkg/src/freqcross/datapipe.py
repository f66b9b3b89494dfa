"""Manifests, stratified splits, per-sample feature preparation and batching."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging, spectrum
from .errors import (
    DuplicatePath,
    EmptyClass,
    EmptySplit,
    FreqCrossError,
    IoFailure,
    MalformedRow,
    UnknownLabel,
    UnknownSplit,
)

SPLITS = ("train", "val", "test")
LABEL_NAMES = ("real", "synthetic")
DEFAULT_RATIOS = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=lambda: Path("."))

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise DuplicatePath(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)

    @property
    def counts(self) -> dict[tuple[str, str], int]:
        out = {(s, name): 0 for s in SPLITS for name in LABEL_NAMES}
        for e in self.entries:
            out[(e.split, LABEL_NAMES[e.label])] += 1
        return out

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise UnknownSplit(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def _parse_label(value, line: int) -> int:
    v = str(value).strip().lower()
    if v in ("0", "real"):
        return 0
    if v in ("1", "synthetic"):
        return 1
    raise UnknownLabel(f"line {line}: unknown label {value!r}")


def _parse_split(value, line: int) -> str:
    v = str(value).strip().lower()
    if v not in SPLITS:
        raise UnknownSplit(f"line {line}: unknown split {value!r}")
    return v


def load_manifest(path, fmt: str | None = None) -> DatasetManifest:
    """Read a ``path,label,split`` CSV or a JSONL file with the same keys.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix.lower() in (".jsonl", ".json") else "csv")
    rows: list[tuple[int, dict]] = []
    try:
        with open(path, newline="") as fh:
            if fmt == "csv":
                reader = csv.reader(fh)
                header = next(reader, None)
                if header is None or [h.strip() for h in header] != ["path", "label", "split"]:
                    raise MalformedRow(1, f"expected header 'path,label,split', got {header}")
                for lineno, row in enumerate(reader, start=2):
                    if not row:
                        continue
                    if len(row) != 3:
                        raise MalformedRow(lineno, f"expected 3 fields, got {len(row)}")
                    rows.append((lineno, dict(zip(("path", "label", "split"), row))))
            elif fmt == "jsonl":
                for lineno, text in enumerate(fh, start=1):
                    if not text.strip():
                        continue
                    try:
                        obj = json.loads(text)
                    except json.JSONDecodeError as exc:
                        raise MalformedRow(lineno, f"invalid JSON: {exc.msg}") from exc
                    if not isinstance(obj, dict) or set(obj) != {"path", "label", "split"}:
                        raise MalformedRow(lineno, "expected an object with keys path, label, split")
                    rows.append((lineno, obj))
            else:
                raise ValueError(f"unknown manifest format {fmt!r}")
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for lineno, row in rows:
        p = str(row["path"]).strip()
        if not p:
            raise MalformedRow(lineno, "empty path")
        entries.append(ManifestEntry(p, _parse_label(row["label"], lineno), _parse_split(row["split"], lineno)))
    return DatasetManifest(entries, root=path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        for e in manifest.entries:
            w.writerow([e.path, e.label, e.split])


def _largest_remainder(n: int, ratios) -> list[int]:
    quotas = [r * n for r in ratios]
    base = [math.floor(q + 1e-9) for q in quotas]
    rem = [round(q - b, 9) for q, b in zip(quotas, base)]
    left = n - sum(base)
    # ties go to the earlier split (train, val, test)
    order = sorted(range(len(ratios)), key=lambda i: (-rem[i], i))
    for i in order[:left]:
        base[i] += 1
    return base


def make_split(items, ratios=DEFAULT_RATIOS, seed: int = 0, root=".") -> DatasetManifest:
    """Stratified train/val/test assignment of ``(path, label)`` pairs.

    Each class is shuffled with its own seeded stream and cut by the ratios
    using largest-remainder rounding. Entries keep their input order within
    the resulting manifest.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be 3 non-negative values summing to 1, got {ratios}")
    items = [(str(p), int(lab)) for p, lab in items]
    assigned: dict[str, str] = {}
    for label in (0, 1):
        members = [p for p, lab in items if lab == label]
        if not members:
            raise EmptyClass(f"no items with label {label} ({LABEL_NAMES[label]})")
        rng = np.random.default_rng([seed, label])
        order = rng.permutation(len(members))
        sizes = _largest_remainder(len(members), ratios)
        start = 0
        for split, size in zip(SPLITS, sizes):
            for i in order[start : start + size]:
                assigned[members[i]] = split
            start += size
    entries = [ManifestEntry(p, lab, assigned[p]) for p, lab in items]
    return DatasetManifest(entries, root=Path(root))


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    rgb: np.ndarray  # (3, S, S)
    m_log: np.ndarray  # (1, S, S)
    e: np.ndarray  # (bins,)
    label: int


def features_from_image(img: np.ndarray, radial_bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m_log, profile = spectrum.spectrum_features(imaging.to_grayscale(img), radial_bins)
    return img.transpose(2, 0, 1), m_log[None], profile.energy


def prepare_image(img, side, augment_cfg=None, rng=None, radial_bins=spectrum.DEFAULT_BINS, perturb=None, perturb_rng=None):
    """decode output -> [perturb] -> resize -> [augment] -> (rgb, m_log, e)."""
    if perturb is not None:
        img = imaging.perturb(img, perturb, perturb_rng)
    if img.shape[:2] != (side, side):
        img = imaging.resize_bilinear(img, side, side)
    if augment_cfg is not None and augment_cfg.enabled:
        img = imaging.augment(img, augment_cfg, rng)
    return features_from_image(img, radial_bins)


def prepare_sample(
    entry: ManifestEntry,
    side: int,
    augment_cfg=None,
    rng=None,
    radial_bins: int = spectrum.DEFAULT_BINS,
    root=".",
    perturb=None,
    perturb_rng=None,
    image: np.ndarray | None = None,
) -> Sample:
    """Build the three model views of one manifest entry.

    ``augment_cfg`` should be None (or disabled) outside training.
    """
    path = Path(entry.path)
    if not path.is_absolute():
        path = Path(root) / path
    try:
        img = imaging.read_image(path) if image is None else image
        rgb, m_log, e = prepare_image(img, side, augment_cfg, rng, radial_bins, perturb, perturb_rng)
    except FreqCrossError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return Sample(rgb, m_log, e, entry.label)


@dataclass
class Batch:
    rgb: np.ndarray
    m_log: np.ndarray
    e: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.labels)


def stack_samples(samples, indices) -> Batch:
    return Batch(
        np.stack([s.rgb for s in samples]),
        np.stack([s.m_log for s in samples]),
        np.stack([s.e for s in samples]),
        np.array([s.label for s in samples]),
        np.asarray(indices),
    )


class SampleSource:
    """Prepares samples of one manifest, caching decoded images and any
    deterministic (non-augmented) preparations."""

    def __init__(self, manifest: DatasetManifest, side: int, radial_bins: int = spectrum.DEFAULT_BINS, workers: int = 1):
        self.manifest = manifest
        self.side = side
        self.radial_bins = radial_bins
        self.workers = max(1, int(workers))
        self._images: dict[str, np.ndarray] = {}
        self._prepared: dict[str, Sample] = {}

    def image(self, entry: ManifestEntry) -> np.ndarray:
        img = self._images.get(entry.path)
        if img is None:
            path = self.manifest.resolve(entry)
            try:
                img = imaging.read_image(path)
            except FreqCrossError as exc:
                raise type(exc)(f"{path}: {exc}") from exc
            except OSError as exc:
                raise IoFailure(f"{path}: {exc}") from exc
            self._images[entry.path] = img
        return img

    def sample(self, entry, augment_cfg=None, rng=None, perturb=None, perturb_rng=None) -> Sample:
        cacheable = (augment_cfg is None or not augment_cfg.enabled) and perturb is None
        if cacheable and entry.path in self._prepared:
            return self._prepared[entry.path]
        s = prepare_sample(
            entry, self.side, augment_cfg, rng, self.radial_bins,
            root=self.manifest.root, perturb=perturb, perturb_rng=perturb_rng, image=self.image(entry),
        )
        if cacheable:
            self._prepared[entry.path] = s
        return s

    def map(self, fn, items):
        if self.workers == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index, 1])


def make_batches(
    manifest: DatasetManifest | SampleSource,
    split: str,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    side: int | None = None,
    radial_bins: int = spectrum.DEFAULT_BINS,
    augment_cfg=None,
    perturb=None,
):
    """Yield :class:`Batch` objects covering ``split`` once.

    The train split is shuffled by ``(seed, epoch)`` and augmented with a
    per-sample stream derived from ``(seed, epoch, index)``; other splits
    keep manifest order and are never augmented. The last batch may be short.
    ``perturb`` applies a robustness perturbation to every decoded image,
    with its noise stream derived from ``(seed, index)``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    source = manifest if isinstance(manifest, SampleSource) else SampleSource(manifest, side, radial_bins)
    entries = source.manifest.split(split)
    if not entries:
        raise EmptySplit(f"split {split!r} is empty")
    train = split == "train"
    order = epoch_order(len(entries), seed, epoch) if train else np.arange(len(entries))
    aug = augment_cfg if train else None
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]

        def prep(i):
            rng = sample_rng(seed, epoch, int(i)) if aug is not None else None
            prng = np.random.default_rng([seed, int(i), 2]) if perturb is not None else None
            return source.sample(entries[i], aug, rng, perturb, prng)

        yield stack_samples(source.map(prep, idx), idx)


# ---------------------------------------------------------------------------
# synthetic fixture corpus


@dataclass
class FixtureSpec:
    count_per_class: int = 50
    side: int = 64
    spectral_slope: float = 1.0
    band: tuple[float, float] = (0.1, 0.4)
    band_gain: float = 3.0
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    pixel_std: float = 0.08

    def __post_init__(self):
        lo, hi = self.band
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"band must satisfy 0 <= lo < hi <= 1, got {self.band}")
        if self.band_gain <= 0:
            raise ValueError(f"band_gain must be > 0, got {self.band_gain}")
        if self.count_per_class < 1:
            raise ValueError("count_per_class must be >= 1")
        if self.side < imaging.MIN_SIDE:
            raise ValueError(f"side must be >= {imaging.MIN_SIDE}")


def fixture_amplitude(spec: FixtureSpec, synthetic: bool) -> np.ndarray:
    """Centred amplitude spectrum ``rho**-slope`` with DC removed; the
    synthetic class is boosted by ``band_gain`` inside ``band``."""
    rho = spectrum.normalized_radius(spec.side, spec.side)
    amp = np.zeros_like(rho)
    nz = rho > 0
    amp[nz] = rho[nz] ** -spec.spectral_slope
    if synthetic:
        lo, hi = spec.band
        amp[(rho >= lo) & (rho <= hi)] *= spec.band_gain
    return amp


def fixture_image(spec: FixtureSpec, synthetic: bool, index: int) -> np.ndarray:
    """Random-phase grayscale image with a prescribed amplitude spectrum."""
    n = spec.side
    label = int(synthetic)
    # undo the centring roll to get natural FFT order
    amp_nat = np.roll(fixture_amplitude(spec, synthetic), (-(n // 2), -(n // 2)), axis=(0, 1))
    rng = np.random.default_rng([spec.seed, label, index])
    noise = spectrum.fft2d(rng.normal(size=(n, n)))
    mod = np.abs(noise)
    phase = np.divide(noise, mod, out=np.ones_like(noise), where=mod > 0)
    field_ = spectrum.ifft2d(amp_nat * phase).real
    # one gain for both classes, fixed by the real-class amplitude, so the
    # classes differ only inside the band
    ref = fixture_amplitude(spec, False)
    scale = spec.pixel_std * n * n / np.sqrt(np.sum(ref**2))
    gray = np.clip(0.5 + scale * field_, 0.0, 1.0)
    return np.repeat(gray[:, :, None], 3, axis=2)


def make_fixtures(spec: FixtureSpec, out_dir) -> DatasetManifest:
    """Write ``real_XXXX.ppm`` / ``synthetic_XXXX.ppm`` plus ``manifest.csv``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        items = []
        for label, name in enumerate(LABEL_NAMES):
            for i in range(spec.count_per_class):
                fname = f"{name}_{i:04d}.ppm"
                img = fixture_image(spec, bool(label), i)
                with open(out / fname, "wb") as fh:
                    fh.write(imaging.encode_ppm(img))
                items.append((fname, label))
        manifest = make_split(items, spec.ratios, spec.seed, root=out)
        write_manifest(manifest, out / "manifest.csv")
    except OSError as exc:
        raise IoFailure(f"cannot write fixtures to {out}: {exc}") from exc
    return manifest


def class_profiles(manifest: DatasetManifest, radial_bins: int = spectrum.DEFAULT_BINS, split: str | None = None):
    """Radial profiles of every manifest image, grouped as (real, synthetic)."""
    groups: tuple[list, list] = ([], [])
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        img = imaging.read_image(manifest.resolve(e))
        mag = spectrum.magnitude(spectrum.fft2d(imaging.to_grayscale(img)), centered=True)
        groups[e.label].append(spectrum.radial_profile(mag, radial_bins))
    return groups


def env_seed(default: int = 0) -> int:
    value = os.environ.get("FREQCROSS_SEED")
    return int(value) if value not in (None, "") else default
