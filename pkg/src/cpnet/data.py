"""Image and mask I/O, bilinear resizing, geometric augmentation and a
deterministic synthetic shadow-scene generator.

Images travel as float32 arrays of shape (3, H, W) scaled to [0, 1];
masks as uint8 arrays of shape (1, H, W) with values {0, 1} where 1 is
shadow. On disk, masks use 255 for shadow. Supported formats: 8-bit PNG
(via Pillow) and binary PPM/PGM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

ROTATION_RANGE = (-20.0, 20.0)
ZOOM_RANGE = (1.2, 2.5)
MASK_THRESHOLD = 128  # 8-bit values >= this load as shadow


@dataclass
class ImageSample:
    rgb: np.ndarray                  # float32 (3,H,W) in [0,1]
    mask: np.ndarray                 # uint8 (1,H,W) in {0,1}
    original_size: tuple[int, int]   # (H0, W0)
    source_id: str

    def __post_init__(self):
        if self.rgb.shape[0] != 3 or self.rgb.ndim != 3:
            raise ValueError(f"rgb must be (3,H,W), got {self.rgb.shape}")
        if self.mask.shape != (1,) + self.rgb.shape[1:]:
            raise ValueError(f"mask shape {self.mask.shape} does not match rgb {self.rgb.shape}")


@dataclass
class AugmentParams:
    flip_h: bool = False
    rotation_deg: float = 0.0
    zoom_scale: float = ZOOM_RANGE[0]
    apply_zoom: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not ROTATION_RANGE[0] <= self.rotation_deg <= ROTATION_RANGE[1]:
            raise ValueError(f"rotation {self.rotation_deg} outside {ROTATION_RANGE}")
        if not ZOOM_RANGE[0] <= self.zoom_scale <= ZOOM_RANGE[1]:
            raise ValueError(f"zoom scale {self.zoom_scale} outside {ZOOM_RANGE}")


def draw_augment_params(seed: int) -> AugmentParams:
    """Sample one augmentation configuration from a seed: flip with
    probability 0.5, rotation uniform in range, zoom applied with
    probability 0.5 with uniform scale."""
    rng = np.random.default_rng(seed)
    return AugmentParams(
        flip_h=bool(rng.random() < 0.5),
        rotation_deg=float(rng.uniform(*ROTATION_RANGE)),
        apply_zoom=bool(rng.random() < 0.5),
        zoom_scale=float(rng.uniform(*ZOOM_RANGE)),
        rng_seed=seed,
    )


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def load_manifest(path) -> list[tuple[Path, Path | None]]:
    """Parse a manifest of `image<TAB>mask` lines.

    Relative paths resolve against the manifest's directory; `#` lines
    are comments. A line with only an image path gets mask None (ground
    truth unavailable); more than two fields is an error.
    """
    path = Path(path)
    base = path.parent
    pairs: list[tuple[Path, Path | None]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) > 2:
                raise ValueError(
                    f"{path}:{lineno}: expected `image<TAB>mask`, got {len(fields)} fields")
            img = Path(fields[0])
            if not img.is_absolute():
                img = base / img
            mask = None
            if len(fields) == 2 and fields[1].strip():
                mask = Path(fields[1])
                if not mask.is_absolute():
                    mask = base / mask
            pairs.append((img, mask))
    return pairs


def save_manifest(path, pairs) -> None:
    path = Path(path)
    base = path.parent
    lines = []
    for img, mask in pairs:
        img = Path(img)
        rel_img = img.relative_to(base) if img.is_absolute() and img.is_relative_to(base) else img
        if mask is None:
            lines.append(str(rel_img))
        else:
            mask = Path(mask)
            rel_mask = mask.relative_to(base) if mask.is_absolute() and mask.is_relative_to(base) else mask
            lines.append(f"{rel_img}\t{rel_mask}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# pixel I/O
# ---------------------------------------------------------------------------

def _read_pnm(path: Path) -> np.ndarray:
    """Binary PPM (P6) -> (H,W,3) uint8 or PGM (P5) -> (H,W) uint8."""
    blob = path.read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported format (expected binary PGM/PPM)")
    pos = 2
    vals: list[int] = []
    while len(vals) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        vals.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = vals
    if maxval != 255:
        raise ValueError(f"{path}: unsupported format (maxval {maxval}, need 8-bit)")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(blob) - pos < need:
        raise ValueError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, 3) if channels == 3 else data.reshape(h, w)


def _write_pnm(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
        h, w = arr.shape[:2]
    elif arr.ndim == 2:
        magic = b"P5"
        h, w = arr.shape
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PNM")
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + arr.tobytes())


def load_image_rgb(path) -> np.ndarray:
    """Load an 8-bit RGB image as float32 (3,H,W) in [0,1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        arr = _read_pnm(path)
        if arr.ndim != 3:
            raise ValueError(f"{path}: expected a color PPM image")
    else:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ValueError(f"{path}: unsupported format (mode {im.mode}, need 8-bit RGB)")
            arr = np.asarray(im)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def load_mask(path) -> np.ndarray:
    """Load an 8-bit grayscale mask as uint8 (1,H,W) in {0,1}."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        arr = _read_pnm(path)
        if arr.ndim != 2:
            raise ValueError(f"{path}: expected a grayscale PGM mask")
    else:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ValueError(f"{path}: unsupported format (mode {im.mode}, need 8-bit grayscale)")
            arr = np.asarray(im)
    return (arr >= MASK_THRESHOLD).astype(np.uint8)[None]


def save_image_rgb(path, rgb: np.ndarray) -> None:
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        _write_pnm(path, arr)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask)[0] > 0).astype(np.uint8) * 255
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        _write_pnm(path, arr)
    else:
        Image.fromarray(arr, mode="L").save(path)


def load_sample(image_path, mask_path) -> ImageSample:
    rgb = load_image_rgb(image_path)
    mask = load_mask(mask_path)
    if rgb.shape[1:] != mask.shape[1:]:
        raise ValueError(
            f"size mismatch: image {image_path} is {rgb.shape[1:]}, mask {mask_path} is {mask.shape[1:]}")
    return ImageSample(rgb=rgb, mask=mask, original_size=rgb.shape[1:],
                       source_id=Path(image_path).stem)


def save_sample(sample: ImageSample, image_path, mask_path) -> None:
    save_image_rgb(image_path, sample.rgb)
    save_mask(mask_path, sample.mask)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def _source_coords(out_n: int, in_n: int) -> np.ndarray:
    scale = in_n / out_n
    return np.clip((np.arange(out_n) + 0.5) * scale - 0.5, 0.0, in_n - 1.0)


def resize_bilinear(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C,H,W) array; sample centers follow the
    half-pixel convention and are clamped at the borders."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    c, h, w = t.shape
    if (out_h, out_w) == (h, w):
        return t.copy()
    sy = _source_coords(out_h, h)
    sx = _source_coords(out_w, w)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(t.dtype)[None, :, None]
    fx = (sx - x0).astype(t.dtype)[None, None, :]
    top = t[:, y0[:, None], x0[None, :]] * (1 - fx) + t[:, y0[:, None], x1[None, :]] * fx
    bot = t[:, y1[:, None], x0[None, :]] * (1 - fx) + t[:, y1[:, None], x1[None, :]] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(out, t.min(), t.max())


def resize_nearest(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a (C,H,W) array (same center convention)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    c, h, w = t.shape
    if (out_h, out_w) == (h, w):
        return t.copy()
    iy = np.floor(_source_coords(out_h, h) + 0.5).astype(np.intp)
    ix = np.floor(_source_coords(out_w, w) + 0.5).astype(np.intp)
    return t[:, iy[:, None], ix[None, :]].copy()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _rotate_pair(rgb: np.ndarray, mask: np.ndarray, deg: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = rgb.shape[1:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    dy, dx = yy - cy, xx - cx
    src_y = cos_t * dy + sin_t * dx + cy
    src_x = -sin_t * dy + cos_t * dx + cx

    # rgb: bilinear with edge clamping
    syc = np.clip(src_y, 0.0, h - 1.0)
    sxc = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(syc).astype(np.intp)
    x0 = np.floor(sxc).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (syc - y0).astype(rgb.dtype)
    fx = (sxc - x0).astype(rgb.dtype)
    top = rgb[:, y0, x0] * (1 - fx) + rgb[:, y0, x1] * fx
    bot = rgb[:, y1, x0] * (1 - fx) + rgb[:, y1, x1] * fx
    rgb_out = top * (1 - fy) + bot * fy

    # mask: nearest, out-of-bounds pixels become non-shadow
    ny = np.floor(src_y + 0.5).astype(np.intp)
    nx = np.floor(src_x + 0.5).astype(np.intp)
    valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    mask_out = np.zeros_like(mask)
    mask_out[:, valid] = mask[:, ny[valid], nx[valid]]
    return rgb_out, mask_out


def _zoom_pair(rgb: np.ndarray, mask: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = rgb.shape[1:]
    ch = max(1, int(round(h / scale)))
    cw = max(1, int(round(w / scale)))
    y0 = (h - ch) // 2
    x0 = (w - cw) // 2
    rgb_crop = rgb[:, y0 : y0 + ch, x0 : x0 + cw]
    mask_crop = mask[:, y0 : y0 + ch, x0 : x0 + cw]
    return resize_bilinear(rgb_crop, h, w), resize_nearest(mask_crop, h, w)


def augment(sample: ImageSample, params: AugmentParams) -> ImageSample:
    """Apply flip/rotation/zoom identically to image and mask; the
    output keeps the input size and the mask stays binary."""
    rgb, mask = sample.rgb, sample.mask
    if params.flip_h:
        rgb = rgb[:, :, ::-1].copy()
        mask = mask[:, :, ::-1].copy()
    if params.rotation_deg != 0.0:
        rgb, mask = _rotate_pair(rgb, mask, params.rotation_deg)
    if params.apply_zoom:
        rgb, mask = _zoom_pair(rgb, mask, params.zoom_scale)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    mask = (mask > 0).astype(np.uint8)
    return ImageSample(rgb=rgb, mask=mask, original_size=sample.original_size,
                       source_id=sample.source_id)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _convex_polygon_mask(rng: np.random.Generator, h: int, w: int,
                         radius_lo: float, radius_hi: float) -> np.ndarray:
    """Rasterize a random convex polygon (vertices on a rotated ellipse)."""
    m = min(h, w)
    cy = rng.uniform(0.15 * h, 0.85 * h)
    cx = rng.uniform(0.15 * w, 0.85 * w)
    ry = rng.uniform(radius_lo, radius_hi) * m
    rx = rng.uniform(radius_lo, radius_hi) * m
    tilt = rng.uniform(0, 2 * np.pi)
    k = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    py = cy + ry * np.sin(angles) * np.cos(tilt) + rx * np.cos(angles) * np.sin(tilt)
    px = cx + rx * np.cos(angles) * np.cos(tilt) - ry * np.sin(angles) * np.sin(tilt)

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    pos = np.ones((h, w), dtype=bool)
    neg = np.ones((h, w), dtype=bool)
    for i in range(k):
        y0, x0 = py[i], px[i]
        y1, x1 = py[(i + 1) % k], px[(i + 1) % k]
        cross = (xx - x0) * (y1 - y0) - (yy - y0) * (x1 - x0)
        pos &= cross >= 0
        neg &= cross <= 0
    return pos | neg


def _render_scene(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    direction = rng.uniform(0, 2 * np.pi)
    t = (np.cos(direction) * yy + np.sin(direction) * xx + 1) / 2
    c0 = rng.uniform(0.35, 0.85, size=3)
    c1 = rng.uniform(0.35, 0.85, size=3)
    rgb = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]

    for _ in range(int(rng.integers(1, 5))):
        poly = _convex_polygon_mask(rng, h, w, 0.06, 0.20)
        color = rng.uniform(0.6, 1.0, size=3)
        rgb = np.where(poly[None], color[:, None, None], rgb)

    shadow = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        poly = _convex_polygon_mask(rng, h, w, 0.10, 0.30)
        factor = rng.uniform(0.3, 0.7)
        rgb = np.where(poly[None], rgb * factor, rgb)
        shadow |= poly
    return np.clip(rgb, 0.0, 1.0), shadow


def synth_generate(seed: int, count: int, size: tuple[int, int]) -> list[ImageSample]:
    """Deterministic synthetic shadow scenes: a smooth background, a few
    bright convex objects, and darkened polygonal shadow regions whose
    union is the mask. Scenes are redrawn until the shadow fraction
    falls in (0.02, 0.6) and the mean luminance inside the mask is below
    the mean outside."""
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w = size
    if h % 32 or w % 32:
        raise ValueError(f"spatial dims must be divisible by 32, got {h}x{w}")
    samples = []
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(idx,)))
        for _ in range(64):
            rgb, shadow = _render_scene(rng, h, w)
            frac = shadow.mean()
            if not 0.03 <= frac <= 0.55:
                continue
            lum = rgb.mean(axis=0)
            if lum[shadow].mean() < lum[~shadow].mean():
                break
        else:
            raise RuntimeError(f"could not draw a valid scene for sample {idx}")
        samples.append(ImageSample(
            rgb=rgb.astype(np.float32),
            mask=shadow.astype(np.uint8)[None],
            original_size=(h, w),
            source_id=f"synth_{seed}_{idx:04d}",
        ))
    return samples


def write_synth_dataset(samples: list[ImageSample], out_dir) -> Path:
    """Write samples as PNG images + PGM masks and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, sample in enumerate(samples):
        img_path = out_dir / f"img_{i:04d}.png"
        mask_path = out_dir / f"img_{i:04d}.pgm"
        save_sample(sample, img_path, mask_path)
        pairs.append((img_path, mask_path))
    manifest = out_dir / "manifest.txt"
    save_manifest(manifest, pairs)
    return manifest
