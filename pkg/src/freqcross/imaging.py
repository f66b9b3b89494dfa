"""Image decoding, resizing, augmentation and the robustness perturbations.

Images are plain numpy arrays: RGB images have shape ``(H, W, 3)`` and
grayscale images ``(H, W)``, float64 with every value in ``[0, 1]``.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionTooSmall, InvalidSpec, MalformedImage, UnsupportedFormat

MIN_SIDE = 8
FORMATS = ("png", "jpeg", "ppm")

# BT.601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise MalformedImage(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise DimensionTooSmall(f"image is {h}x{w}; minimum is {MIN_SIDE}x{MIN_SIDE}")
    return img


# ---------------------------------------------------------------------------
# decoding / encoding


def _parse_ppm(data: bytes) -> np.ndarray:
    # P6 header: magic, width, height, maxval separated by whitespace, comments allowed
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedImage("truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise MalformedImage(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedImage("non-integer PPM header field") from exc
    if maxval != 255:
        raise MalformedImage(f"only 8-bit PPM is supported (maxval {maxval})")
    if w <= 0 or h <= 0:
        raise MalformedImage(f"invalid PPM dimensions {w}x{h}")
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise MalformedImage(f"PPM body has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def _decode_pillow(data: bytes, fmt: str) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format is None or im.format.lower() not in {"png": ("png",), "jpeg": ("jpeg", "mpo")}[fmt]:
                raise MalformedImage(f"bytes are not a {fmt} file (found {im.format})")
            if im.mode in ("I;16", "I;16B", "I", "F"):
                raise MalformedImage(f"unsupported bit depth (mode {im.mode})")
            arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise MalformedImage(str(exc)) from exc
    return arr


def decode_image(data: bytes, fmt: str) -> np.ndarray:
    """Decode PNG/JPEG/PPM bytes into an ``(H, W, 3)`` float image in [0, 1]."""
    fmt = fmt.lower()
    if fmt == "jpg":
        fmt = "jpeg"
    if fmt not in FORMATS:
        raise UnsupportedFormat(f"unsupported image format {fmt!r}")
    arr = _parse_ppm(data) if fmt == "ppm" else _decode_pillow(data, fmt)
    img = arr.astype(np.float64) / 255.0
    return check_image(img)


def format_from_path(path) -> str:
    suffix = str(path).rsplit(".", 1)[-1].lower()
    return {"jpg": "jpeg", "jpeg": "jpeg", "png": "png", "ppm": "ppm"}.get(suffix, suffix)


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_image(data, format_from_path(path))


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode as binary PPM, rounding each channel to the nearest 8-bit level."""
    h, w = img.shape[:2]
    q = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    return f"P6 {w} {h} 255\n".encode("ascii") + q.tobytes()


# ---------------------------------------------------------------------------
# geometry


def _resize_axis(img: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == out:
        return img
    # half-pixel centres, edge clamped
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * img.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    return a + (b - a) * frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < MIN_SIDE or out_w < MIN_SIDE:
        raise DimensionTooSmall(f"target size {out_h}x{out_w} below {MIN_SIDE}x{MIN_SIDE}")
    res = _resize_axis(_resize_axis(img, out_h, 0), out_w, 1)
    return np.clip(res, 0.0, 1.0)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def _sample_zero(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear sampling at real coordinates; neighbours outside the grid read as 0."""
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    out = np.zeros(ys.shape + img.shape[2:], dtype=img.dtype)
    for dy, fy in ((0, 1 - wy), (1, wy)):
        for dx, fx in ((0, 1 - wx), (1, wx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(ok[..., None], vals, 0.0) * (fy * fx)
    return out


def rotation_source_coords(h: int, w: int, degrees: float) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-mapped source coordinates for each pixel of a rotated image."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    return s * dx + c * dy + cy, c * dx - s * dy + cx


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre, black fill outside."""
    if degrees == 0:
        return img.copy()
    src_y, src_x = rotation_source_coords(img.shape[0], img.shape[1], degrees)
    return _sample_zero(img, src_y, src_x)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    max_rotation: float = 15.0
    jitter_range: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise InvalidSpec(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.max_rotation < 0:
            raise InvalidSpec(f"max_rotation must be >= 0, got {self.max_rotation}")
        if not 0.0 <= self.jitter_range < 1.0:
            raise InvalidSpec(f"jitter_range must be in [0, 1), got {self.jitter_range}")


def _blend(a: np.ndarray, b, factor: float) -> np.ndarray:
    return np.clip(b + (a - b) * factor, 0.0, 1.0)


def color_jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    out = img
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        out = _blend(out, float(to_grayscale(out).mean()), contrast)
    if saturation != 1.0:
        out = _blend(out, to_grayscale(out)[..., None], saturation)
    return out


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flip, rotation and colour jitter.

    Five draws are always taken from ``rng`` (flip, angle, three jitter
    factors) so the stream position after the call does not depend on which
    transforms fired.
    """
    if not cfg.enabled:
        return img.copy()
    flip_u = rng.random()
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    j = cfg.jitter_range
    factors = rng.uniform(1.0 - j, 1.0 + j, size=3)
    out = hflip(img) if flip_u < cfg.hflip_prob else img
    if cfg.max_rotation > 0:
        out = rotate(out, angle)
    if j > 0:
        out = color_jitter(out, *factors)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# perturbations

PERTURB_KINDS = ("jpeg_sim", "gaussian_noise", "gaussian_blur", "resize_roundtrip")


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    quality: int | None = None
    sigma: float | None = None
    target_side: int | None = None

    def __post_init__(self):
        fields = {"quality": self.quality, "sigma": self.sigma, "target_side": self.target_side}
        needed = {
            "jpeg_sim": {"quality"},
            "gaussian_noise": {"sigma"},
            "gaussian_blur": {"sigma"},
            "resize_roundtrip": {"target_side"},
        }
        if self.kind not in needed:
            raise InvalidSpec(f"unknown perturbation kind {self.kind!r}")
        set_fields = {k for k, v in fields.items() if v is not None}
        if set_fields != needed[self.kind]:
            raise InvalidSpec(
                f"{self.kind} takes exactly {sorted(needed[self.kind])}, got {sorted(set_fields)}"
            )
        if self.quality is not None and not (isinstance(self.quality, int) and 1 <= self.quality <= 100):
            raise InvalidSpec(f"quality must be an integer in [1, 100], got {self.quality}")
        if self.sigma is not None and not self.sigma > 0:
            raise InvalidSpec(f"sigma must be > 0, got {self.sigma}")
        if self.target_side is not None and self.target_side < MIN_SIDE:
            raise InvalidSpec(f"target_side must be >= {MIN_SIDE}, got {self.target_side}")

    @property
    def name(self) -> str:
        if self.kind == "jpeg_sim":
            return f"jpeg_q{self.quality}"
        if self.kind == "gaussian_noise":
            return f"noise_sigma{self.sigma:g}"
        if self.kind == "gaussian_blur":
            return f"blur_sigma{self.sigma:g}"
        return f"resize_{self.target_side}"


# ITU-T T.81 Annex K tables
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ]
)
JPEG_CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
    ]
    + [[99] * 8] * 4
)


def quality_scaled_table(table: np.ndarray, quality: int) -> np.ndarray:
    # libjpeg jpeg_quality_scaling + jpeg_add_quant_table (integer arithmetic)
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((table * scale + 50) // 100, 1, 255).astype(np.float64)


def _dct_matrix() -> np.ndarray:
    u = np.arange(8)[:, None]
    x = np.arange(8)[None, :]
    d = np.cos((2 * x + 1) * u * np.pi / 16.0) * np.sqrt(2.0 / 8.0)
    d[0] /= np.sqrt(2.0)
    return d


DCT8 = _dct_matrix()

_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def jpeg_sim(img: np.ndarray, quality: int) -> np.ndarray:
    """Quantisation round trip of baseline JPEG without entropy coding or subsampling."""
    h, w = img.shape[:2]
    ph, pw = -h % 8, -w % 8
    x = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge") * 255.0
    ycc = x @ _RGB2YCC.T
    ycc[..., 1:] += 128.0
    ycc -= 128.0  # level shift
    H, W = ycc.shape[:2]
    # (by, bx, channel, 8, 8) blocks
    blocks = ycc.reshape(H // 8, 8, W // 8, 8, 3).transpose(0, 2, 4, 1, 3)
    coef = DCT8 @ blocks @ DCT8.T
    q = np.stack(
        [
            quality_scaled_table(JPEG_LUMA_TABLE, quality),
            quality_scaled_table(JPEG_CHROMA_TABLE, quality),
            quality_scaled_table(JPEG_CHROMA_TABLE, quality),
        ]
    )
    coef = np.round(coef / q) * q
    rec = DCT8.T @ coef @ DCT8
    ycc = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, 3) + 128.0
    ycc[..., 1:] -= 128.0
    rgb = ycc @ _YCC2RGB.T / 255.0
    return np.clip(rgb[:h, :w], 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            acc += kv * np.take(p, np.arange(i, i + n), axis=axis)
        out = acc
    return np.clip(out, 0.0, 1.0)


def perturb(img: np.ndarray, spec: PerturbSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    if not isinstance(spec, PerturbSpec):
        raise InvalidSpec(f"expected PerturbSpec, got {type(spec).__name__}")
    if spec.kind == "jpeg_sim":
        return jpeg_sim(img, spec.quality)
    if spec.kind == "gaussian_noise":
        if rng is None:
            raise InvalidSpec("gaussian_noise needs a seeded random stream")
        return np.clip(img + rng.normal(0.0, spec.sigma, size=img.shape), 0.0, 1.0)
    if spec.kind == "gaussian_blur":
        return gaussian_blur(img, spec.sigma)
    h, w = img.shape[:2]
    small = resize_bilinear(img, spec.target_side, spec.target_side)
    return resize_bilinear(small, h, w)


# default robustness sweep, in report order
DEFAULT_PERTURBATIONS = (
    PerturbSpec("jpeg_sim", quality=90),
    PerturbSpec("jpeg_sim", quality=70),
    PerturbSpec("jpeg_sim", quality=50),
    PerturbSpec("gaussian_noise", sigma=0.01),
    PerturbSpec("gaussian_noise", sigma=0.02),
    PerturbSpec("gaussian_blur", sigma=1.0),
    PerturbSpec("resize_roundtrip", target_side=128),
)
