"""
Image quality scores: PSNR, SSIM and the edge-restricted EPSNR.

Planes come in [0, 1] and are scored in 8-bit levels, i.e. multiplied by
MAX_I = 255. A perfect match scores math.inf.
"""
import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.metrics import structural_similarity

from cmsr import settings
from cmsr.exceptions import EmptyMask, InvalidArgument


log = logging.getLogger(__name__)

MAX_I = 255.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_FIELDS = ('image', 'psnr', 'ssim', 'epsnr', 'edge_pixels')


@dataclass
class EvalPair:
    """Ground truth G and prediction P; shave pixels are cut off each side."""
    G: np.ndarray
    P: np.ndarray
    shave: int = 0

    def __post_init__(self):
        self.G = np.asarray(self.G, dtype=np.float64)
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.G.shape != self.P.shape or self.G.ndim != 2:
            raise InvalidArgument(
                "cannot compare planes of shapes %s and %s"
                % (self.G.shape, self.P.shape))
        if self.shave < 0:
            raise InvalidArgument("shave must be non-negative")

    def crop(self, plane):
        if not self.shave:
            return plane
        s = self.shave
        return plane[s:-s, s:-s]

    def levels(self):
        """(G, P) shaved and in 8-bit levels."""
        g, p = self.crop(self.G) * MAX_I, self.crop(self.P) * MAX_I
        if g.size == 0:
            raise InvalidArgument(
                "nothing left of a %s plane after shaving %i pixels"
                % (self.G.shape, self.shave))
        return g, p


@dataclass
class EdgeMask:
    mask: np.ndarray
    boundary: np.ndarray
    radius: float = settings.CMSR_EDGE_RADIUS

    @property
    def count(self):
        return int(self.mask.sum())


def _psnr_from_mse(mse):
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(MAX_I ** 2 / mse)


def psnr(pair):
    g, p = pair.levels()
    return _psnr_from_mse(float(np.mean(np.square(g - p))))


def ssim(pair):
    """
    Mean structural similarity over every full 11x11 Gaussian window
    (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 255).
    """
    g, p = pair.levels()
    if min(g.shape) < SSIM_WINDOW:
        raise InvalidArgument(
            "SSIM needs at least %ix%i pixels, got %s"
            % (SSIM_WINDOW, SSIM_WINDOW, g.shape))
    return float(structural_similarity(
        g, p, win_size=SSIM_WINDOW, gaussian_weights=True, sigma=SSIM_SIGMA,
        use_sample_covariance=False, data_range=MAX_I, K1=SSIM_K1,
        K2=SSIM_K2))


def edge_mask(boundary, radius=settings.CMSR_EDGE_RADIUS):
    """
    Pixels whose exact Euclidean distance to the nearest boundary pixel
    (value >= 0.5) is strictly below radius.
    """
    boundary = np.asarray(boundary)
    edges = boundary >= 0.5
    if not edges.any():
        raise EmptyMask("boundary plane has no boundary pixels")
    distance = ndimage.distance_transform_edt(~edges)
    return EdgeMask(mask=distance < radius, boundary=boundary, radius=radius)


def union_mask(masks):
    """One mask covering every annotation of an image."""
    masks = list(masks)
    if not masks:
        raise EmptyMask("no boundary annotations")
    combined = np.logical_or.reduce([m.mask for m in masks])
    return EdgeMask(mask=combined, boundary=masks[0].boundary,
                    radius=masks[0].radius)


def epsnr(pair, mask):
    g, p = pair.levels()
    selected = pair.crop(mask.mask)
    if selected.shape != g.shape:
        raise InvalidArgument(
            "mask %s does not match the planes %s"
            % (mask.mask.shape, pair.G.shape))
    if not selected.any():
        raise EmptyMask("edge mask is empty")
    return _psnr_from_mse(float(np.mean(np.square(g[selected] -
                                                  p[selected]))))


@dataclass
class ImageScores:
    image: str
    psnr: float
    ssim: float
    epsnr: Optional[float]
    edge_pixels: int


def evaluate_image(image, hr, prediction, boundaries, shave=0,
                   radius=settings.CMSR_EDGE_RADIUS):
    """
    Scores one prediction against its HR plane. EPSNR uses the union of the
    edge masks of all boundary maps; it is None when the image has no
    boundary pixels at all.
    """
    pair = EvalPair(hr, prediction, shave=shave)
    masks = []
    for b in boundaries:
        try:
            masks.append(edge_mask(b, radius))
        except EmptyMask:
            continue
    score, edge_pixels = None, 0
    if masks:
        mask = union_mask(masks)
        edge_pixels = int(pair.crop(mask.mask).sum())
        try:
            score = epsnr(pair, mask)
        except EmptyMask:
            score = None
    if score is None:
        log.warning("%s: no boundary pixels, EPSNR left empty", image)
    return ImageScores(image=image, psnr=psnr(pair), ssim=ssim(pair),
                       epsnr=score, edge_pixels=edge_pixels)


def format_score(value):
    if value is None:
        return ''
    if isinstance(value, float):
        if math.isinf(value):
            return 'inf'
        return '%.6f' % value
    return str(value)


def finite_mean(values):
    """Mean of the finite values and the number of inf values left out."""
    present = [v for v in values if v is not None]
    finite = [v for v in present if not math.isinf(v)]
    skipped = len(present) - len(finite)
    if not present:
        return None, 0
    if not finite:
        return math.inf, 0
    return float(np.mean(finite)), skipped


def write_report(path, model, bicubic=None):
    """
    Writes the evaluation CSV: one row per image in the given order, then a
    "mean" row. Baseline scores, when given, sit in bicubic_* columns next to
    the model's. inf values are written as "inf" and left out of the means;
    the mean row's label counts how many were left out.
    """
    model = list(model)
    bicubic = list(bicubic) if bicubic is not None else None
    metrics = REPORT_FIELDS[1:]
    header = list(REPORT_FIELDS)
    if bicubic is not None:
        header += ['bicubic_%s' % m for m in metrics]
    rows = []
    for i, scores in enumerate(model):
        row = [scores.image] + [format_score(getattr(scores, m)) for m in metrics]
        if bicubic is not None:
            row += [format_score(getattr(bicubic[i], m)) for m in metrics]
        rows.append(row)

    columns = [[getattr(s, m) for s in model] for m in metrics]
    if bicubic is not None:
        columns += [[getattr(s, m) for s in bicubic] for m in metrics]
    means, skipped = [], 0
    for values in columns:
        mean, left_out = finite_mean(values)
        means.append(mean)
        skipped += left_out
    label = 'mean'
    if skipped:
        label = 'mean (%i inf excluded)' % skipped
        log.info("%i inf scores left out of the means", skipped)
    rows.append([label] + [format_score(m) for m in means])

    with open(path, 'w') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    return rows
