"""
Image planes and everything needed to turn image files into aligned
(LR, HR, boundary) training triplets.

A plane is a 2-D numpy array with values in [0, 1]. The LR grid is placed on
the HR grid at stride s: LR sample i sits exactly on HR sample s * i. Both the
resampler and the network's transposed convolution use that geometry.
"""
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from cmsr import settings
from cmsr.exceptions import InvalidArgument, MissingFiles


log = logging.getLogger(__name__)

"""
Dihedral variants that augment() can add on top of the identity.
"""
AUGMENTATIONS = ('rot90', 'rot180', 'rot270', 'hflip', 'vflip', 'transpose',
                 'antitranspose')

_DIHEDRAL = {
    'identity': lambda p: p,
    'rot90': lambda p: np.rot90(p, 1),
    'rot180': lambda p: np.rot90(p, 2),
    'rot270': lambda p: np.rot90(p, 3),
    'hflip': lambda p: p[:, ::-1],
    'vflip': lambda p: p[::-1, :],
    'transpose': lambda p: p.T,
    'antitranspose': lambda p: np.rot90(p, 2).T,
}

# ITU-R BT.601 studio swing, RGB in [0, 1] -> YCbCr in 8-bit levels
_YCBCR_MATRIX = np.array([
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
])
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])
_RGB_MATRIX = np.linalg.inv(_YCBCR_MATRIX)


@dataclass
class TrainingTriplet:
    """
    LR plane, HR plane and one or more HR boundary planes. HR and boundary
    planes share dimensions, which are exactly scale times the LR ones.
    """
    lr: np.ndarray
    hr: np.ndarray
    boundaries: Tuple[np.ndarray, ...]

    def __post_init__(self):
        self.boundaries = tuple(self.boundaries)
        if not self.boundaries:
            raise InvalidArgument("a triplet needs at least one boundary map")
        for b in self.boundaries:
            if b.shape != self.hr.shape:
                raise InvalidArgument(
                    "boundary map %s does not match HR plane %s"
                    % (b.shape, self.hr.shape))
        scale = self.scale
        if (self.lr.shape[0] * scale, self.lr.shape[1] * scale) != \
                self.hr.shape:
            raise InvalidArgument(
                "HR plane %s is not an integer multiple of LR plane %s"
                % (self.hr.shape, self.lr.shape))

    @property
    def scale(self):
        return self.hr.shape[0] // self.lr.shape[0]


@dataclass
class ManifestEntry:
    hr_path: str
    boundary_paths: List[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    scale: int = 3
    augment: Tuple[str, ...] = ()
    patch_size: int = settings.CMSR_PATCH_SIZE
    stride: int = settings.CMSR_PATCH_STRIDE


def rgb_to_ycbcr(image):
    """
    Converts an 8-bit RGB array (H, W, 3) to (Y, Cb, Cr) planes in [0, 1],
    i.e. studio-swing levels divided by 255 (Y spans 16/255 .. 235/255).
    """
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    ycc = rgb @ _YCBCR_MATRIX.T + _YCBCR_OFFSET
    ycc /= 255.0
    return ycc[..., 0], ycc[..., 1], ycc[..., 2]


def ycbcr_to_rgb(y, cb, cr):
    """Inverse of rgb_to_ycbcr. Returns float RGB in [0, 1], unclamped."""
    ycc = np.stack([y, cb, cr], axis=-1) * 255.0 - _YCBCR_OFFSET
    return ycc @ _RGB_MATRIX.T


def luminance(image):
    """Y plane of an RGB image, or the plane itself for grayscale input."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64) / 255.0
    return rgb_to_ycbcr(image)[0]


def bicubic_weight(x, a=-0.5):
    """
    Cubic convolution kernel. With a = -0.5 it interpolates (w(0) = 1,
    w(+-1) = w(+-2) = 0) and reproduces quadratics.
    """
    t = np.abs(np.asarray(x, dtype=np.float64))
    near = (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    far = a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    w = np.where(t <= 1, near, np.where(t < 2, far, 0.0))
    if w.ndim == 0:
        return float(w)
    return w


def _as_factor(factor):
    if isinstance(factor, Fraction):
        ratio = factor
    elif isinstance(factor, int):
        ratio = Fraction(factor)
    else:
        ratio = Fraction(factor).limit_denominator(1000)
    if ratio <= 0:
        raise InvalidArgument("resize factor must be positive, got %s" % factor)
    return ratio


def resize_weights(in_len, out_len, factor):
    """
    Row-stochastic (out_len, in_len) matrix of the 1-D resampler. Output
    sample Y reads source coordinate Y / factor; borders are edge-clamped;
    when downscaling the kernel is stretched by 1 / factor.
    """
    stretch = max(1.0, 1.0 / float(factor))
    radius = 2.0 * stretch
    weights = np.zeros((out_len, in_len))
    for y in range(out_len):
        u = float(Fraction(y) / factor)
        first = int(np.floor(u - radius)) + 1
        taps = np.arange(first, int(np.floor(u + radius)) + 1)
        w = bicubic_weight((u - taps) / stretch)
        w = w / w.sum()
        np.add.at(weights[y], np.clip(taps, 0, in_len - 1), w)
    return weights


def resize_bicubic(plane, factor):
    """
    Separable bicubic resampling of a 2-D plane by a rational factor.
    """
    ratio = _as_factor(factor)
    plane = np.asarray(plane)
    height, width = plane.shape
    out_h = int(round(height * ratio))
    out_w = int(round(width * ratio))
    if out_h < 1 or out_w < 1:
        raise InvalidArgument(
            "resizing %ix%i by %s leaves no pixels" % (height, width, ratio))
    rows = resize_weights(height, out_h, ratio)
    cols = resize_weights(width, out_w, ratio)
    out = rows @ plane.astype(np.float64) @ cols.T
    if plane.dtype in (np.float32, np.float64):
        return out.astype(plane.dtype)
    return out


def crop_to_multiple(plane, scale):
    height, width = plane.shape[:2]
    return plane[:height - height % scale, :width - width % scale]


def make_lr(hr, scale):
    """Bicubic downscale by the integer factor scale."""
    if hr.shape[0] % scale or hr.shape[1] % scale:
        raise InvalidArgument(
            "HR plane %s is not divisible by %i; crop it first"
            % (hr.shape, scale))
    return resize_bicubic(hr, Fraction(1, scale))


def boundary_target(image, annotations=()):
    """
    Returns the list of boundary maps used as training target for image.

    Annotations are kept one map each, scaled into [0, 1]. Without
    annotations the map is synthesized: pixels whose central-difference
    gradient magnitude reaches the 90th percentile (and is non-zero), dilated
    by one pixel, values in {0, 1}.
    """
    if annotations:
        maps = []
        for plane in annotations:
            plane = np.clip(np.asarray(plane, dtype=np.float64), 0, None)
            peak = plane.max()
            if peak > 1:
                plane = plane / peak
            maps.append(plane)
        return maps

    plane = np.asarray(image, dtype=np.float64)
    padded = np.pad(plane, 1, mode='edge')
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    magnitude = np.hypot(gx, gy)
    threshold = np.percentile(magnitude, 90)
    edges = (magnitude >= threshold) & (magnitude > 0)
    edges = ndimage.binary_dilation(edges, structure=np.ones((3, 3), bool))
    return [edges.astype(np.float64)]


def extract_patches(triplet, lr_patch, stride=settings.CMSR_PATCH_STRIDE):
    """
    Cuts a triplet into aligned patches: lr_patch-sized LR windows at the
    given stride and the matching scale-times-larger HR and boundary windows.
    """
    height, width = triplet.lr.shape
    if lr_patch > height or lr_patch > width:
        log.warning("skipping %ix%i image smaller than the %i patch",
                    height, width, lr_patch)
        return []
    s = triplet.scale
    hr_patch = lr_patch * s
    patches = []
    for top in range(0, height - lr_patch + 1, stride):
        for left in range(0, width - lr_patch + 1, stride):
            hr_top, hr_left = top * s, left * s
            hr_window = (slice(hr_top, hr_top + hr_patch),
                         slice(hr_left, hr_left + hr_patch))
            patches.append(TrainingTriplet(
                lr=triplet.lr[top:top + lr_patch, left:left + lr_patch].copy(),
                hr=triplet.hr[hr_window].copy(),
                boundaries=[b[hr_window].copy() for b in triplet.boundaries]))
    return patches


def augment(patches, flags=()):
    """
    Returns the patches followed by one transformed copy per enabled flag;
    every plane of a triplet gets the same transform.
    """
    unknown = set(flags) - set(AUGMENTATIONS)
    if unknown:
        raise InvalidArgument("unknown augmentation %s" % sorted(unknown))
    variants = ['identity'] + [f for f in AUGMENTATIONS if f in flags]
    out = []
    for name in variants:
        transform = _DIHEDRAL[name]
        for p in patches:
            out.append(TrainingTriplet(
                lr=np.ascontiguousarray(transform(p.lr)),
                hr=np.ascontiguousarray(transform(p.hr)),
                boundaries=[np.ascontiguousarray(transform(b))
                            for b in p.boundaries]))
    return out


def read_png(path):
    """
    Reads an 8-bit grayscale or RGB image as a uint8 array (H, W) or
    (H, W, 3). Deeper images are rejected instead of truncated.
    """
    with Image.open(path) as img:
        if img.mode in ('I', 'I;16', 'I;16B', 'I;16L', 'F'):
            raise InvalidArgument(
                "%s: only 8-bit images are supported (mode %s)"
                % (path, img.mode))
        if img.mode not in ('L', 'RGB'):
            img = img.convert('RGB' if 'A' in img.mode or img.mode == 'P'
                              else 'L')
        return np.array(img)


def to_uint8(array):
    return np.clip(np.round(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, array):
    """Writes a [0, 1] plane or RGB array, clamping at write time."""
    data = to_uint8(array)
    Image.fromarray(data, mode='L' if data.ndim == 2 else 'RGB').save(path)


def load_manifest(path, scale=3, augment=(), patch_size=None, stride=None):
    """
    Parses a manifest: one `hr_path[,boundary_path...]` per line, `#` starts
    a comment, relative paths are resolved against the manifest's directory.
    Every missing file is reported in a single MissingFiles error.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as f:
        for line in f:
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            paths = [os.path.join(base, p.strip())
                     for p in line.split(',') if p.strip()]
            entries.append(ManifestEntry(paths[0], paths[1:]))
    if not entries:
        raise InvalidArgument("empty manifest")
    missing = [p for e in entries for p in [e.hr_path] + e.boundary_paths
               if not os.path.exists(p)]
    if missing:
        raise MissingFiles(missing)
    return DatasetManifest(
        entries=entries, scale=scale, augment=tuple(augment),
        patch_size=patch_size or settings.CMSR_PATCH_SIZE,
        stride=stride or settings.CMSR_PATCH_STRIDE)


def load_entry(entry, scale):
    """
    Returns the full-image triplet for one manifest entry: luminance HR
    cropped to a multiple of scale, its bicubic LR and the boundary maps.
    """
    hr = crop_to_multiple(luminance(read_png(entry.hr_path)), scale)
    annotations = [crop_to_multiple(read_png(p).astype(np.float64) / 255.0,
                                    scale)
                   for p in entry.boundary_paths]
    for p, a in zip(entry.boundary_paths, annotations):
        if a.ndim != 2 or a.shape != hr.shape:
            raise InvalidArgument(
                "%s: boundary map must be a grayscale image the size of %s"
                % (p, entry.hr_path))
    return TrainingTriplet(
        lr=make_lr(hr, scale).astype(np.float32),
        hr=hr.astype(np.float32),
        boundaries=[b.astype(np.float32)
                    for b in boundary_target(hr, annotations)])


def load_triplets(manifest):
    return [load_entry(e, manifest.scale) for e in manifest.entries]


def build_patches(manifest):
    """Full pipeline from a manifest to the augmented training patches."""
    patches = []
    for triplet in load_triplets(manifest):
        patches.extend(extract_patches(triplet, manifest.patch_size,
                                       manifest.stride))
    return augment(patches, manifest.augment)


def synthetic_image(rng, size=96):
    """
    A grayscale test scene: shaded background with a handful of rectangles
    and discs of random intensity, lightly blurred so it has both smooth
    regions and sharp-ish boundaries. Values stay within [0.05, 0.95].
    """
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    plane = 0.5 + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(rng.integers(3, 7)):
        value = rng.uniform(0.1, 0.9)
        if rng.random() < 0.5:
            y0, x0 = rng.uniform(0, 0.8, size=2)
            h, w = rng.uniform(0.1, 0.5, size=2)
            inside = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        else:
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            r = rng.uniform(0.05, 0.3)
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        plane = np.where(inside, value, plane)
    ripple = 0.05 * np.sin(2 * np.pi * rng.uniform(2, 6) * xx) * \
        np.cos(2 * np.pi * rng.uniform(2, 6) * yy)
    plane = ndimage.gaussian_filter(plane + ripple, sigma=0.7, mode='nearest')
    return np.clip(plane, 0.05, 0.95)
