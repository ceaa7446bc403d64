"""Optical forward model and modulation-pattern machinery.

A single-pixel detector sees one scalar per displayed pattern: the inner
product of the pattern mask with the scene. This module simulates that
acquisition, injects measurement noise, projects trained weights onto
physically displayable gray-scale patterns, and handles the on-disk
formats (pattern file, measurement CSV, 8-bit DMD frames).

Conventions: scenes and patterns are stored as (height, width) arrays,
i.e. N rows by M columns; flattening is row-major. All operations are
pure functions of their inputs plus an explicit seed.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DegenerateSignalError,
    GeometryError,
    InputError,
    ModeError,
)

DEFAULT_WIDTH = 96   # M, columns
DEFAULT_HEIGHT = 32  # N, rows

PATTERN_MODES = ("optimized_unit", "random_unit", "signed_binary")

PATTERN_FILE_MAGIC = b"SPDP"
PATTERN_FILE_VERSION = 1

CLEAN = "clean"  # sentinel for add_noise: no-op


@dataclass(frozen=True)
class Scene:
    """A grayscale target of shape (height N, width M), values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise GeometryError(f"scene must be 2-D, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise InputError("scene contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InputError(
                f"scene pixels outside [0,1]: min={px.min():g} max={px.max():g}"
            )
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def ravel(self) -> np.ndarray:
        return self.pixels.ravel()


@dataclass(frozen=True)
class PatternSet:
    """K flattened modulation patterns plus the geometry they display at.

    ``patterns`` has shape (K, height*width); each row is one mask in
    row-major order. Entry ranges depend on ``mode``: [0, 1] for the two
    unit modes, exactly {-1, +1} for signed_binary.
    """

    patterns: np.ndarray
    mode: str
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH

    def __post_init__(self):
        pats = np.asarray(self.patterns, dtype=np.float64)
        if pats.ndim != 2:
            raise GeometryError(f"patterns must be 2-D, got shape {pats.shape}")
        if pats.shape[1] != self.height * self.width:
            raise GeometryError(
                f"pattern length {pats.shape[1]} != height*width "
                f"{self.height * self.width}"
            )
        if self.mode not in PATTERN_MODES:
            raise ModeError(f"unknown pattern mode {self.mode!r}")
        if not np.all(np.isfinite(pats)):
            raise InputError("patterns contain non-finite entries")
        if self.mode == "signed_binary":
            if not np.all(np.isin(pats, (-1.0, 1.0))):
                raise ModeError("signed_binary patterns must be exactly -1 or +1")
        else:
            if pats.min() < 0.0 or pats.max() > 1.0:
                raise ModeError(
                    f"{self.mode} patterns must lie in [0,1]: "
                    f"min={pats.min():g} max={pats.max():g}"
                )
        object.__setattr__(self, "patterns", pats)

    @property
    def k(self) -> int:
        return self.patterns.shape[0]

    def as_images(self) -> np.ndarray:
        """View as (K, height, width)."""
        return self.patterns.reshape(self.k, self.height, self.width)


@dataclass(frozen=True)
class MeasurementVector:
    """One value per displayed pattern, in linear intensity units.

    ``acquisitions`` counts physical exposures (2K for signed patterns,
    which need a complementary pair each). ``snr_db`` records the realized
    signal-to-noise ratio once noise has been injected.
    """

    values: np.ndarray
    snr_db: float | None = None
    acquisitions: int = field(default=0)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise GeometryError(f"measurement must be 1-D, got shape {vals.shape}")
        object.__setattr__(self, "values", vals)
        if self.acquisitions == 0:
            object.__setattr__(self, "acquisitions", len(vals))

    @property
    def k(self) -> int:
        return len(self.values)


def measure_raw(pixels: np.ndarray, patterns: np.ndarray) -> np.ndarray:
    """Inner products of each pattern row with the flattened pixel array.

    Unvalidated core shared by :func:`measure` and the linearity tests;
    accepts arbitrary real matrices.
    """
    return patterns @ np.asarray(pixels, dtype=np.float64).ravel()


def measure(scene: Scene, patterns: PatternSet) -> MeasurementVector:
    """Acquire a scene: values[k] = <pattern_k, vec(scene)>, no bias term."""
    if (scene.height, scene.width) != (patterns.height, patterns.width):
        raise GeometryError(
            f"scene {scene.height}x{scene.width} does not match patterns "
            f"{patterns.height}x{patterns.width}"
        )
    values = measure_raw(scene.pixels, patterns.patterns)
    return MeasurementVector(values, acquisitions=patterns.k)


def measure_signed(scene: Scene, patterns: PatternSet) -> MeasurementVector:
    """Acquire with signed patterns via complementary pair differencing.

    Signed modulation is not physically displayable, so each pattern W in
    {-1,+1} is realized as the nonnegative pair (1+W)/2 and (1-W)/2; the
    reported value is the difference of the two exposures, which equals
    <W, x>. Costs 2K acquisitions.
    """
    if patterns.mode != "signed_binary":
        raise ModeError(f"measure_signed requires signed_binary, got {patterns.mode}")
    if (scene.height, scene.width) != (patterns.height, patterns.width):
        raise GeometryError(
            f"scene {scene.height}x{scene.width} does not match patterns "
            f"{patterns.height}x{patterns.width}"
        )
    pos = measure_raw(scene.pixels, (1.0 + patterns.patterns) / 2.0)
    neg = measure_raw(scene.pixels, (1.0 - patterns.patterns) / 2.0)
    return MeasurementVector(pos - neg, acquisitions=2 * patterns.k)


def add_noise(
    m: MeasurementVector, target_snr_db, seed: int
) -> MeasurementVector:
    """Add zero-mean Gaussian noise at a target SNR (per-vector power).

    ``target_snr_db`` may be the sentinel ``"clean"`` (or None), in which
    case the input is returned unchanged. Noise power is
    signal_power / 10^(snr/10) with signal_power the mean squared value of
    this vector. Deterministic given the seed; the realized SNR is
    recorded on the result.
    """
    if target_snr_db is None or target_snr_db == CLEAN:
        return m
    target_snr_db = float(target_snr_db)
    if not np.isfinite(target_snr_db):
        raise InputError(f"target SNR must be finite or 'clean', got {target_snr_db}")
    if m.k == 0:
        raise InputError("cannot add noise to an empty measurement")
    signal_power = float(np.mean(m.values**2))
    if signal_power == 0.0:
        raise DegenerateSignalError("zero-power signal has no finite SNR")
    noise_power = signal_power / 10.0 ** (target_snr_db / 10.0)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, np.sqrt(noise_power), size=m.k)
    realized = 10.0 * np.log10(signal_power / float(np.mean(noise**2)))
    return replace(m, values=m.values + noise, snr_db=realized)


def project_weights(
    weights: np.ndarray,
    strategy: str = "clamp",
    *,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
) -> PatternSet:
    """Project trained weights onto displayable gray-scale patterns.

    ``clamp`` keeps each entry's nearest point in [0, 1] (zeroing
    negatives), the unique least-squares box projection. ``reflect`` flips
    the sign of negative entries instead. Entries outside [-1, 1] are
    clipped first with a warning. Both strategies are idempotent on
    feasible inputs.
    """
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise InputError("weights contain non-finite entries")
    if w.ndim == 1:
        w = w[None, :]
    if w.min() < -1.0 or w.max() > 1.0:
        warnings.warn(
            f"weights outside [-1,1] (min={w.min():g}, max={w.max():g}); clipping",
            stacklevel=2,
        )
        w = np.clip(w, -1.0, 1.0)
    if strategy == "clamp":
        out = np.maximum(w, 0.0)
    elif strategy == "reflect":
        out = np.abs(w)
    else:
        raise InputError(f"unknown projection strategy {strategy!r}")
    return PatternSet(out, mode="optimized_unit", height=height, width=width)


def quantize_for_dmd(patterns: PatternSet) -> list[np.ndarray]:
    """Map unit-range patterns to 8-bit frames, round-half-up on 255*w.

    Returns one (height, width) uint8 array per pattern. Signed patterns
    are expanded into complementary pairs, two frames per pattern in
    (positive, negative) order, so the list holds 2K frames.
    """

    def _q(img):
        return np.floor(255.0 * img + 0.5).astype(np.uint8)

    imgs = patterns.as_images()
    if patterns.mode == "signed_binary":
        frames = []
        for img in imgs:
            frames.append(_q((1.0 + img) / 2.0))
            frames.append(_q((1.0 - img) / 2.0))
        return frames
    return [_q(img) for img in imgs]


def dequantize(frame: np.ndarray) -> np.ndarray:
    """Inverse of quantize_for_dmd for a single frame: w' = q/255."""
    return frame.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")  # magic, version, K, N, M


def write_pattern_file(patterns: PatternSet, path) -> None:
    """Binary pattern file: SPDP header + K*N*M little-endian float32.

    Payload is pattern-major then row-major, matching the in-memory
    layout of ``patterns.patterns`` cast to float32.
    """
    path = Path(path)
    payload = patterns.patterns.astype("<f4").tobytes()
    header = _HEADER.pack(
        PATTERN_FILE_MAGIC,
        PATTERN_FILE_VERSION,
        patterns.k,
        patterns.height,
        patterns.width,
    )
    path.write_bytes(header + payload)


def read_pattern_file(path) -> PatternSet:
    """Read a pattern file; mode is inferred from the entry ranges.

    Entries all in {-1,+1} read back as signed_binary, entries in [0,1]
    as optimized_unit (the file format does not distinguish optimized
    from random); anything else is rejected.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InputError(f"{path}: truncated pattern file")
    magic, version, k, n, m = _HEADER.unpack_from(raw)
    if magic != PATTERN_FILE_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != PATTERN_FILE_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * k * n * m
    if len(raw) != expected:
        raise InputError(f"{path}: expected {expected} bytes, got {len(raw)}")
    pats = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    pats = pats.reshape(k, n * m)
    if np.all(np.isin(pats, (-1.0, 1.0))):
        mode = "signed_binary"
    elif pats.min() >= 0.0 and pats.max() <= 1.0:
        mode = "optimized_unit"
    else:
        raise InputError(f"{path}: entries fit no pattern mode")
    return PatternSet(pats, mode=mode, height=n, width=m)


def export_dmd_pngs(patterns: PatternSet, out_dir) -> dict:
    """Write one 8-bit grayscale PNG per DMD frame plus a manifest.

    Filenames are zero-padded by frame index; signed patterns produce
    pattern_0000_pos.png / pattern_0000_neg.png pairs. The manifest lists
    files in modulation order and is written as manifest.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = quantize_for_dmd(patterns)
    signed = patterns.mode == "signed_binary"
    names = []
    pad = max(4, len(str(patterns.k - 1)))
    for i, frame in enumerate(frames):
        if signed:
            idx, half = divmod(i, 2)
            name = f"pattern_{idx:0{pad}d}_{'pos' if half == 0 else 'neg'}.png"
        else:
            name = f"pattern_{i:0{pad}d}.png"
        Image.fromarray(frame, mode="L").save(out_dir / name)
        names.append(name)
    manifest = {
        "count": len(names),
        "patterns": patterns.k,
        "mode": patterns.mode,
        "height": patterns.height,
        "width": patterns.width,
        "files": names,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def write_measurement_csv(path, rows) -> None:
    """Measurement CSV: one row per sample, ``sample_id,v1,...,vK``.

    ``rows`` is an iterable of (sample_id, values). Values are written
    with shortest round-trip float formatting so read-write cycles are
    byte-identical.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for sample_id, values in rows:
            writer.writerow([sample_id] + [repr(float(v)) for v in values])


def read_measurement_csv(path) -> list[tuple[str, np.ndarray]]:
    """Read a measurement CSV back into (sample_id, values) pairs."""
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                values = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: malformed row: {exc}") from exc
            out.append((row[0], values))
    return out
