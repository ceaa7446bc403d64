"""Dataset provisioning.

Two sources feed the recognizer: a deterministic synthetic plate
renderer (the desk-scale ground truth) and an ingestion adapter for
directories of CCPD-style photographs (crop by corner annotation,
rectify to 96x32, grayscale, parse the label from the filename).

Layout contract of the renderer: 7 equal slots of 12 pixels with a
2-pixel gap (stride 14), so slot i spans columns [14i, 14i+12) and is
centered at 14i+6. Glyphs are painted into a 10x14 box inside the slot.
Latin glyphs come from a bundled 5x7 dot-matrix font; province glyphs
are deterministic 7x7 pseudo-ideographs (best-effort stand-ins, one
fixed pattern per character).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .ctc import CCPD_PROVINCES, Alphabet, LabelSequence
from .errors import InputError, RenderingError
from .sensing import DEFAULT_HEIGHT, DEFAULT_WIDTH, Scene

log = logging.getLogger(__name__)

PLATE_LENGTH = 7
SLOT_WIDTH = 12
SLOT_GAP = 2
SLOT_STRIDE = SLOT_WIDTH + SLOT_GAP
GLYPH_BOX = (14, 10)  # height, width inside a slot
GLYPH_Y = (DEFAULT_HEIGHT - GLYPH_BOX[0]) // 2
GLYPH_X_PAD = (SLOT_WIDTH - GLYPH_BOX[1]) // 2

CONDITION_TAGS = ("base", "dark_bright", "rotate", "tilt", "weather", "blur")

# filename index tables used by the CCPD annotation scheme; 'O' is a
# filler that never appears on real plates, so hitting it means the
# filename is malformed for our alphabet
CCPD_FILENAME_ALPHABET = tuple("ABCDEFGHJKLMNPQRSTUVWXYZO")
CCPD_FILENAME_ADS = tuple("ABCDEFGHJKLMNPQRSTUVWXYZ0123456789O")

_FONT_5X7 = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}


def _bitmap(rows) -> np.ndarray:
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


def _province_glyph(char: str) -> np.ndarray:
    # a fixed 7x7 pattern per character, derived from its codepoint
    rng = np.random.default_rng(ord(char))
    for _ in range(100):
        g = rng.random((7, 7)) < 0.5
        if 10 <= g.sum() <= 39:
            return g
    raise RenderingError(f"could not derive a glyph for {char!r}")


def glyph_atlas(alphabet: Alphabet) -> dict[str, np.ndarray]:
    """Per-symbol boolean bitmaps; Latin from the 5x7 font, provinces
    procedural. Raises if two symbols collide."""
    atlas: dict[str, np.ndarray] = {}
    for char in alphabet.symbols:
        if char in _FONT_5X7:
            atlas[char] = _bitmap(_FONT_5X7[char])
        else:
            atlas[char] = _province_glyph(char)
    keys = list(atlas)
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            if atlas[a].shape == atlas[b].shape and np.array_equal(
                    atlas[a], atlas[b]):
                raise RenderingError(f"glyphs for {a!r} and {b!r} collide")
    return atlas


def slot_centers() -> list[int]:
    return [SLOT_STRIDE * i + SLOT_WIDTH // 2 for i in range(PLATE_LENGTH)]


@dataclass(frozen=True)
class RenderStyle:
    """Rendering knobs: glyph/background intensity, small rotation,
    horizontal shear, gaussian blur sigma, and additive noise sigma."""

    foreground: float = 0.9
    background: float = 0.1
    rotation_deg: float = 0.0
    shear: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        for name in ("foreground", "background"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must be in [0,1], got {v}")
        if abs(self.foreground - self.background) < 0.05:
            raise InputError("foreground/background contrast is degenerate")
        if abs(self.rotation_deg) > 5.0:
            raise InputError(
                f"rotation limited to +-5 degrees, got {self.rotation_deg}")
        if abs(self.shear) > 0.4:
            raise InputError(f"shear limited to +-0.4, got {self.shear}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise InputError("blur/noise sigmas must be >= 0")


@dataclass(frozen=True)
class Sample:
    """One labeled scene plus its provenance."""

    scene: Scene
    label: LabelSequence
    tag: str = "base"
    source: str = "synthetic"
    seed: int | None = None

    def __post_init__(self):
        if len(self.label.indices) != PLATE_LENGTH:
            raise InputError(
                f"plate labels have {PLATE_LENGTH} characters, "
                f"got {len(self.label.indices)}")


def _paint_glyph(canvas: np.ndarray, bitmap: np.ndarray, slot: int,
                 foreground: float) -> None:
    bh, bw = GLYPH_BOX
    gh, gw = bitmap.shape
    # nearest-neighbor stretch of the bitmap into the glyph box
    rows = (np.arange(bh) * gh) // bh
    cols = (np.arange(bw) * gw) // bw
    block = bitmap[np.ix_(rows, cols)]
    y0 = GLYPH_Y
    x0 = SLOT_STRIDE * slot + GLYPH_X_PAD
    region = canvas[y0:y0 + bh, x0:x0 + bw]
    region[block] = foreground


def render_synthetic(
    label: LabelSequence,
    style: RenderStyle = RenderStyle(),
    seed: int = 0,
    *,
    alphabet: Alphabet = Alphabet(),
    tag: str = "base",
    atlas: dict[str, np.ndarray] | None = None,
) -> Sample:
    """Render a 7-character label onto the 96x32 sensor geometry.

    Deterministic per (label, style, seed). The optional ``atlas``
    argument lets corpus generation reuse one atlas across samples.
    """
    if not alphabet.is_valid_plate(label):
        raise InputError("label does not satisfy the plate grammar")
    if atlas is None:
        atlas = glyph_atlas(alphabet)
    canvas = np.full((DEFAULT_HEIGHT, DEFAULT_WIDTH), style.background)
    for slot, idx in enumerate(label.indices):
        char = alphabet.char_of(idx)
        bitmap = atlas.get(char)
        if bitmap is None:
            raise RenderingError(f"no glyph for {char!r}")
        _paint_glyph(canvas, bitmap, slot, style.foreground)
    if style.rotation_deg != 0.0:
        canvas = ndimage.rotate(canvas, style.rotation_deg, reshape=False,
                                order=1, mode="constant",
                                cval=style.background)
    if style.shear != 0.0:
        # output column c samples input column c + shear*(r - center)
        center = (DEFAULT_HEIGHT - 1) / 2.0
        canvas = ndimage.affine_transform(
            canvas, np.array([[1.0, 0.0], [style.shear, 1.0]]),
            offset=[0.0, -style.shear * center], order=1,
            mode="constant", cval=style.background)
    if style.blur_sigma > 0.0:
        canvas = ndimage.gaussian_filter(canvas, style.blur_sigma)
    if style.noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        canvas = canvas + rng.normal(0.0, style.noise_sigma, canvas.shape)
    return Sample(Scene(np.clip(canvas, 0.0, 1.0)), label, tag=tag, seed=seed)


def random_plate_label(rng: np.random.Generator,
                       alphabet: Alphabet = Alphabet()) -> LabelSequence:
    """Province, letter, then five letters-or-digits."""
    chars = [alphabet.provinces[int(rng.integers(len(alphabet.provinces)))],
             alphabet.letters[int(rng.integers(len(alphabet.letters)))]]
    body = tuple(alphabet.letters) + tuple(alphabet.digits)
    chars += [body[int(rng.integers(len(body)))] for _ in range(5)]
    return alphabet.encode("".join(chars))


def style_for_condition(tag: str, rng: np.random.Generator) -> RenderStyle:
    """Draw style knobs standing in for the photographic subsets:
    contrast shifts for dark/bright, geometry for rotate/tilt, noise and
    blur for weather/blur."""
    if tag == "base":
        return RenderStyle(
            foreground=float(rng.uniform(0.75, 0.95)),
            background=float(rng.uniform(0.05, 0.25)),
            rotation_deg=float(rng.uniform(-1.0, 1.0)),
            blur_sigma=float(rng.uniform(0.0, 0.3)),
            noise_sigma=float(rng.uniform(0.0, 0.02)),
        )
    if tag == "dark_bright":
        if rng.random() < 0.5:  # dark: low intensities, thin contrast
            fg, bg = rng.uniform(0.35, 0.5), rng.uniform(0.0, 0.15)
        else:  # bright: everything pushed up
            fg, bg = rng.uniform(0.85, 1.0), rng.uniform(0.5, 0.7)
        return RenderStyle(foreground=float(fg), background=float(bg),
                           noise_sigma=float(rng.uniform(0.0, 0.02)))
    if tag == "rotate":
        return RenderStyle(rotation_deg=float(rng.uniform(-5.0, 5.0)))
    if tag == "tilt":
        return RenderStyle(shear=float(rng.uniform(-0.25, 0.25)))
    if tag == "weather":
        return RenderStyle(noise_sigma=float(rng.uniform(0.05, 0.12)))
    if tag == "blur":
        return RenderStyle(blur_sigma=float(rng.uniform(0.8, 1.5)))
    raise InputError(f"unknown condition tag {tag!r}")


def generate_corpus(
    count: int,
    seed: int = 0,
    *,
    alphabet: Alphabet = Alphabet(),
    tags: tuple[str, ...] = ("base",),
) -> list[Sample]:
    """Deterministic synthetic corpus; condition tags cycle through
    ``tags`` so every tag gets an equal share."""
    rng = np.random.default_rng(seed)
    atlas = glyph_atlas(alphabet)
    samples = []
    for i in range(count):
        tag = tags[i % len(tags)]
        label = random_plate_label(rng, alphabet)
        style = style_for_condition(tag, rng)
        sample_seed = int(rng.integers(2 ** 63))
        samples.append(render_synthetic(
            label, style, sample_seed, alphabet=alphabet, tag=tag,
            atlas=atlas))
    return samples


_TAG_PATTERNS = (
    ("db", "dark_bright"), ("rotate", "rotate"), ("tilt", "tilt"),
    ("weather", "weather"), ("blur", "blur"), ("base", "base"),
)


def _tag_from_directory(name: str) -> str:
    lowered = name.lower()
    for needle, tag in _TAG_PATTERNS:
        if needle in lowered:
            return tag
    return "base"


def parse_ccpd_filename(name: str, alphabet: Alphabet = Alphabet()):
    """Corners and label from a CCPD-style filename.

    Returns (corners, label): corners as four (x, y) pairs ordered
    right-bottom, left-bottom, left-top, right-top. Raises InputError
    on any malformed field.
    """
    stem = Path(name).stem
    fields = stem.split("-")
    if len(fields) < 5:
        raise InputError(f"{name}: expected >= 5 dash fields")
    corner_field, label_field = fields[3], fields[4]
    pairs = corner_field.split("_")
    if len(pairs) != 4:
        raise InputError(f"{name}: expected 4 corner pairs")
    corners = []
    for pair in pairs:
        if not re.fullmatch(r"\d+&\d+", pair):
            raise InputError(f"{name}: bad corner {pair!r}")
        x, y = pair.split("&")
        corners.append((int(x), int(y)))
    raw = label_field.split("_")
    if len(raw) != PLATE_LENGTH:
        raise InputError(f"{name}: expected 7 label indices")
    try:
        indices = [int(v) for v in raw]
    except ValueError:
        raise InputError(f"{name}: non-integer label field") from None
    try:
        chars = [CCPD_PROVINCES[indices[0]],
                 CCPD_FILENAME_ALPHABET[indices[1]]]
        chars += [CCPD_FILENAME_ADS[i] for i in indices[2:]]
    except IndexError:
        raise InputError(f"{name}: label index out of table range") from None
    label = alphabet.encode("".join(chars))  # rejects the 'O' filler
    if not alphabet.is_valid_plate(label):
        raise InputError(f"{name}: label violates the plate grammar")
    return corners, label


def rectify_plate(img: Image.Image, corners) -> Scene:
    """Map the annotated quadrilateral onto the 96x32 sensor geometry and
    convert to [0,1] grayscale (ITU-R BT.601 luma, PIL's "L" mode)."""
    rb, lb, lt, rt = corners
    quad = (*lt, *lb, *rb, *rt)  # NW, SW, SE, NE as QUAD wants
    warped = img.transform((DEFAULT_WIDTH, DEFAULT_HEIGHT), Image.QUAD,
                           quad, resample=Image.BILINEAR)
    gray = np.asarray(warped.convert("L"), dtype=np.float64) / 255.0
    return Scene(gray)


def ingest_ccpd(root_path, limit: int | None = None,
                alphabet: Alphabet = Alphabet()) -> list[Sample]:
    """Walk a directory of CCPD-style images; malformed filenames and
    unreadable files are skipped with a logged warning."""
    root = Path(root_path)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    if limit is not None and limit <= 0:
        return []
    samples: list[Sample] = []
    paths = sorted(p for p in root.rglob("*")
                   if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
    for path in paths:
        try:
            corners, label = parse_ccpd_filename(path.name, alphabet)
        except InputError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        try:
            with Image.open(path) as img:
                scene = rectify_plate(img, corners)
        except OSError as exc:
            log.warning("skipping unreadable %s: %s", path.name, exc)
            continue
        samples.append(Sample(scene, label,
                              tag=_tag_from_directory(path.parent.name),
                              source="ccpd"))
        if limit is not None and len(samples) >= limit:
            break
    return samples


def split(samples, fractions, seed: int = 0):
    """Deterministic disjoint partition, stratified by condition tag with
    largest-remainder allocation (per-tag split counts are within one
    sample of the exact proportions)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise InputError(f"expected 3 fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"fractions must be >= 0 and sum to 1: {fractions}")
    samples = list(samples)
    rng = np.random.default_rng(seed)
    by_tag: dict[str, list] = {}
    for s in samples:
        by_tag.setdefault(s.tag, []).append(s)
    parts: tuple[list, list, list] = ([], [], [])
    for tag in sorted(by_tag):
        group = by_tag[tag]
        order = rng.permutation(len(group))
        quotas = [len(group) * f for f in fractions]
        counts = [int(q) for q in quotas]
        leftover = len(group) - sum(counts)
        by_remainder = sorted(range(3), key=lambda j: quotas[j] - counts[j],
                              reverse=True)
        for j in by_remainder[:leftover]:
            counts[j] += 1
        pos = 0
        for part, cnt in zip(parts, counts):
            part.extend(group[i] for i in order[pos:pos + cnt])
            pos += cnt
    for part in parts:
        rng.shuffle(part)
    return parts


def write_corpus(samples, out_dir, alphabet: Alphabet = Alphabet()) -> Path:
    """Store scenes as 8-bit grayscale PNGs plus a JSONL manifest; returns
    the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, sample in enumerate(samples):
            sid = f"{i:05d}"
            frame = np.floor(sample.scene.pixels * 255.0 + 0.5).astype(np.uint8)
            Image.fromarray(frame, mode="L").save(out / f"{sid}.png")
            fh.write(json.dumps({
                "id": sid,
                "label_string": alphabet.decode_text(sample.label),
                "tag": sample.tag,
                "source": sample.source,
                "seed": sample.seed,
            }, ensure_ascii=False) + "\n")
    return manifest


def read_corpus(dir_path, alphabet: Alphabet = Alphabet()) -> list[Sample]:
    root = Path(dir_path)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise InputError(f"{root} has no manifest.jsonl")
    samples = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = rec["id"]
                label = alphabet.encode(rec["label_string"])
            except (KeyError, ValueError) as exc:
                raise InputError(
                    f"{manifest}:{lineno}: bad manifest record: {exc}")
            png = root / f"{sid}.png"
            with Image.open(png) as img:
                pixels = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
            samples.append(Sample(Scene(pixels), label,
                                  tag=rec.get("tag", "base"),
                                  source=rec.get("source", "synthetic"),
                                  seed=rec.get("seed")))
    return samples
