"""Dataset plumbing: image codecs, manifests, splits, and the synthetic generator.

The generator replaces an external corpus with procedural images. The "real"
class is a Gaussian random field whose amplitude spectrum falls off as a
power law (natural-image-like 1/f statistics) plus a few soft blobs. The
"fake" class starts from the same construction and then imprints one of
three artifact families:

  checkerboard   additive period-2 +/- grid (upsampling-style signature)
  spectral_notch an annulus of frequency bins zeroed, then inverted back
  resample_grid  2x box downsample followed by nearest-neighbor upsample

Every image is fully determined by (seed, label, index), so datasets are
byte-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataFormatError

SPLIT_NAMES = ("train", "val", "test")
ARTIFACT_FAMILIES = ("checkerboard", "spectral_notch", "resample_grid")

LABEL_REAL = 1
LABEL_FAKE = 0


@dataclass(frozen=True)
class ImageRecord:
    """One dataset entry: where the image lives and how it is used."""

    path: str
    label: int          # 1 = real, 0 = fake
    domain: str
    split: str = ""     # "" until split_dataset assigns one


# ---------------------------------------------------------------------------
# raster helpers


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize of HxW or HxWxC data, edge-clamped, float64 output."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    if image.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = image[np.ix_(y0c, x0c)] * (1 - fx) + image[np.ix_(y0c, x1c)] * fx
    bottom = image[np.ix_(y1c, x0c)] * (1 - fx) + image[np.ix_(y1c, x1c)] * fx
    return top * (1 - fy) + bottom * fy


def _read_pnm(path, raw):
    """Binary PGM (P5) / PPM (P6) with maxval 255."""
    magic = raw[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise DataFormatError(f"{path}: truncated PNM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise DataFormatError(f"{path}: non-numeric PNM header fields") from None
    if width < 1 or height < 1:
        raise DataFormatError(f"{path}: zero-dimension image {width}x{height}")
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported PNM maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    data = raw[pos : pos + need]
    if len(data) < need:
        raise DataFormatError(
            f"{path}: truncated pixel data ({len(data)} of {need} bytes)"
        )
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def decode_image(path):
    """Decode a PNG or binary PPM/PGM file to an HxWx3 float32 array in [0,1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read image {path}: {exc}") from exc
    if raw[:2] in (b"P5", b"P6"):
        arr = _read_pnm(path, raw)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as img:
                if img.mode not in ("L", "RGB", "RGBA"):
                    raise DataFormatError(
                        f"{path}: unsupported PNG mode {img.mode!r}"
                    )
                if img.mode == "RGBA":
                    img = img.convert("RGB")
                arr = np.asarray(img, dtype=np.uint8)
        except DataFormatError:
            raise
        except Exception as exc:
            raise DataFormatError(f"{path}: broken PNG ({exc})") from exc
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataFormatError(f"{path}: zero-dimension image")
    else:
        raise DataFormatError(
            f"{path}: unrecognized image magic bytes {raw[:8]!r}"
        )
    return arr.astype(np.float32) / np.float32(255.0)


def _quantize(values):
    return np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def save_png(image01, path):
    """Write an HxWx3 (RGB) or HxW (grayscale) [0,1] array as 8-bit PNG."""
    arr = _quantize(image01)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def save_pgm(gray01, path):
    """Write an HxW [0,1] array as binary PGM (P5, maxval 255)."""
    arr = _quantize(gray01)
    if arr.ndim != 2:
        raise ValueError(f"PGM output needs a 2-d array, got shape {arr.shape}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def save_gray_image(gray01, path):
    """Dispatch a grayscale dump to PGM or PNG by file extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        save_pgm(gray01, path)
    elif suffix == ".png":
        save_png(gray01, path)
    else:
        raise ValueError(f"spectrum dumps support .pgm or .png, got {suffix!r}")


# ---------------------------------------------------------------------------
# manifests


def write_manifest(records, path):
    """Write JSON-lines records; paths under the manifest dir are relativized."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for rec in records:
        p = Path(rec.path)
        try:
            rel = str(p.resolve().relative_to(base))
        except ValueError:
            rel = str(p)
        lines.append(
            json.dumps(
                {"path": rel, "label": rec.label, "domain": rec.domain,
                 "split": rec.split},
                separators=(", ", ": "),
            )
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path):
    """Parse a JSON-lines manifest into ImageRecords (paths resolved)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(
                f"{path}:{lineno}: malformed JSON ({exc.msg})"
            ) from exc
        if not isinstance(obj, dict):
            raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
        extra = set(obj) - {"path", "label", "domain", "split"}
        if extra:
            raise DataFormatError(
                f"{path}:{lineno}: unknown key(s) {sorted(extra)}"
            )
        missing = {"path", "label", "domain", "split"} - set(obj)
        if missing:
            raise DataFormatError(
                f"{path}:{lineno}: missing key(s) {sorted(missing)}"
            )
        if obj["label"] not in (0, 1):
            raise DataFormatError(
                f"{path}:{lineno}: label must be 0 or 1, got {obj['label']!r}"
            )
        if obj["split"] not in SPLIT_NAMES:
            raise DataFormatError(
                f"{path}:{lineno}: split must be one of {SPLIT_NAMES}, "
                f"got {obj['split']!r}"
            )
        rec_path = Path(obj["path"])
        if not rec_path.is_absolute():
            rec_path = base / rec_path
        records.append(
            ImageRecord(
                path=str(rec_path),
                label=int(obj["label"]),
                domain=str(obj["domain"]),
                split=obj["split"],
            )
        )
    return records


# ---------------------------------------------------------------------------
# splitting


def split_dataset(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Assign train/val/test stratified by (label, domain).

    Within each stratum the records are shuffled with a seeded generator and
    sliced contiguously; val and test get floor(n * ratio) records each and
    the remainder goes to train. Strata with fewer than 3 records cannot
    populate all three splits and go entirely to train, with a warning.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    already = [r for r in records if r.split]
    if already:
        raise ValueError(
            f"{len(already)} record(s) already have a split assigned"
        )
    strata = {}
    for idx, rec in enumerate(records):
        strata.setdefault((rec.label, rec.domain), []).append(idx)
    assigned = [None] * len(records)
    for key in sorted(strata, key=lambda k: (k[0], k[1])):
        indices = strata[key]
        n = len(indices)
        if n < 3:
            warnings.warn(
                f"stratum {key} has only {n} record(s); assigning all to train",
                stacklevel=2,
            )
            for i in indices:
                assigned[i] = "train"
            continue
        stratum_rng = np.random.default_rng(
            [seed, key[0], zlib.crc32(key[1].encode("utf-8"))]
        )
        order = [indices[i] for i in stratum_rng.permutation(n)]
        n_val = int(n * ratios[1])
        n_test = int(n * ratios[2])
        n_train = n - n_val - n_test
        for i in order[:n_train]:
            assigned[i] = "train"
        for i in order[n_train : n_train + n_val]:
            assigned[i] = "val"
        for i in order[n_train + n_val :]:
            assigned[i] = "test"
    return [
        dataclasses.replace(rec, split=assigned[i])
        for i, rec in enumerate(records)
    ]


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class GeneratorConfig:
    count_per_class: int
    side: int = 64
    alpha_range: tuple = (1.5, 2.5)
    blob_count_range: tuple = (2, 8)
    artifact_family: str = "checkerboard"
    artifact_amplitude_range: tuple = (0.02, 0.06)
    seed: int = 0

    def __post_init__(self):
        if self.count_per_class < 1:
            raise ValueError("count_per_class must be >= 1")
        if self.side < 2 or self.side & (self.side - 1):
            raise ValueError(f"side must be a power of two, got {self.side}")
        for name in ("alpha_range", "blob_count_range", "artifact_amplitude_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got ({lo}, {hi})")
        if self.artifact_family not in ARTIFACT_FAMILIES:
            raise ValueError(
                f"artifact_family must be one of {ARTIFACT_FAMILIES}, "
                f"got {self.artifact_family!r}"
            )


def _sample_rng(config, label, index):
    return np.random.default_rng([config.seed, label, index])


def _base_field(config, rng):
    """Power-law random field plus soft blobs, min-max normalized to [0,1]."""
    side = config.side
    alpha = rng.uniform(*config.alpha_range)
    noise = rng.standard_normal((side, side))
    freq = np.hypot(
        np.fft.fftfreq(side)[:, None], np.fft.fftfreq(side)[None, :]
    )
    freq[0, 0] = 1.0
    shaping = freq ** (-alpha / 2.0)
    shaping[0, 0] = 0.0
    field = np.fft.ifft2(np.fft.fft2(noise) * shaping).real
    spread = field.std()
    if spread > 0:
        field /= spread
    yy, xx = np.mgrid[0:side, 0:side]
    lo, hi = config.blob_count_range
    blob_count = int(rng.integers(lo, hi + 1))
    for _ in range(blob_count):
        cy = rng.uniform(0, side)
        cx = rng.uniform(0, side)
        sigma = rng.uniform(side / 16.0, side / 6.0)
        amp = rng.uniform(0.5, 1.5)
        field = field + amp * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2)
        )
    lo_v, hi_v = field.min(), field.max()
    if hi_v > lo_v:
        field = (field - lo_v) / (hi_v - lo_v)
    else:
        field = np.zeros_like(field)
    return field


def _tint(gray, rng):
    tint = rng.uniform(0.55, 1.0, size=3)
    return gray[:, :, None] * tint[None, None, :]


def _imprint_artifact(image, family, rng, amplitude_range):
    h, w = image.shape[:2]
    if family == "checkerboard":
        amplitude = rng.uniform(*amplitude_range)
        parity = (np.indices((h, w)).sum(axis=0) % 2) * 2 - 1
        out = image + amplitude * parity[:, :, None]
    elif family == "spectral_notch":
        radius = rng.uniform(0.25, 0.55)    # of the Nyquist frequency
        width = rng.uniform(0.10, 0.25)
        freq = np.hypot(
            np.fft.fftfreq(h)[:, None], np.fft.fftfreq(w)[None, :]
        ) / 0.5
        mask = (freq >= radius - width / 2.0) & (freq <= radius + width / 2.0)
        out = np.empty_like(image)
        for c in range(image.shape[2]):
            spec = np.fft.fft2(image[:, :, c])
            spec[mask] = 0.0
            out[:, :, c] = np.fft.ifft2(spec).real
    elif family == "resample_grid":
        small = image.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
        out = np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)
    else:
        raise ValueError(f"unknown artifact family {family!r}")
    return np.clip(out, 0.0, 1.0)


def synthesize_real(config, index):
    """The index-th real-class image (HxWx3 float in [0,1])."""
    rng = _sample_rng(config, LABEL_REAL, index)
    return _tint(_base_field(config, rng), rng)


def synthesize_fake_pair(config, index):
    """(pre-artifact base, imprinted fake) for the index-th fake-class image."""
    rng = _sample_rng(config, LABEL_FAKE, index)
    base = _tint(_base_field(config, rng), rng)
    fake = _imprint_artifact(
        base, config.artifact_family, rng, config.artifact_amplitude_range
    )
    return base, fake


def nyquist_energy_ratio(gray):
    """Mean |X| over the Nyquist row/column divided by the mid-band mean
    (bins with radial frequency in [0.2, 0.8] of Nyquist). Grid artifacts
    raise the numerator, notch artifacts gut the denominator, and resampling
    zeroes the numerator outright; one scalar, three separable families."""
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    mag = np.abs(np.fft.fft2(gray))
    band = np.zeros((h, w), dtype=bool)
    band[h // 2, :] = True
    band[:, w // 2] = True
    radial = np.hypot(
        np.fft.fftfreq(h)[:, None], np.fft.fftfreq(w)[None, :]
    ) / 0.5
    mid = (radial >= 0.2) & (radial <= 0.8) & ~band
    return float(mag[band].mean() / (mag[mid].mean() + 1e-12))


def generate_synthetic(config, out_dir, domain=None, split=None,
                       split_ratios=(0.8, 0.1, 0.1)):
    """Write 2*count_per_class PNGs plus a manifest; return the records.

    split=None assigns stratified splits from split_ratios using the
    generator seed; split="train"/"val"/"test" assigns that split to every
    record (used for held-out evaluation-only domains).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if domain is None:
        domain = f"main_{config.artifact_family}"
    records = []
    for index in range(config.count_per_class):
        image = synthesize_real(config, index)
        name = f"real_{index:05d}.png"
        save_png(image, out_dir / name)
        records.append(ImageRecord(str(out_dir / name), LABEL_REAL, domain))
    for index in range(config.count_per_class):
        _, fake = synthesize_fake_pair(config, index)
        name = f"fake_{index:05d}.png"
        save_png(fake, out_dir / name)
        records.append(ImageRecord(str(out_dir / name), LABEL_FAKE, domain))
    if split is None:
        records = split_dataset(records, split_ratios, seed=config.seed)
    else:
        if split not in SPLIT_NAMES:
            raise ValueError(f"split must be one of {SPLIT_NAMES}, got {split!r}")
        records = [dataclasses.replace(r, split=split) for r in records]
    write_manifest(records, out_dir / "manifest.jsonl")
    return records
