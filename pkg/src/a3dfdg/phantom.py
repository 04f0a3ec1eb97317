"""Synthetic multi-organ CT phantoms for a small simulated federation.

Every client renders the same schematic anatomy (a body ellipsoid with five
organ ellipsoids) through its own appearance transform and its own
slice-score window.  Geometry depends only on the seed and the window, so
re-rendering a volume under another appearance leaves its labels untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ._rng import make_rng
from .errors import NotFoundError
from .volume import Volume

AIR_HU = -1000.0
BODY_HU = 30.0
TAU_AIR = -200.0


@dataclass(frozen=True)
class Organ:
    class_id: int
    name: str
    z_center: float
    radius_range: Tuple[float, float]
    intensity: float
    # in-plane centre(s) as fractions of (H, W); several entries draw paired organs
    positions: Tuple[Tuple[float, float], ...]
    aspect: Tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class ClientDomain:
    offset: float = 0.0
    contrast: float = 1.0
    smoothing: float = 0.0
    noise: float = 0.0
    z_window: Tuple[float, float] = (0.0, 100.0)


DEFAULT_ORGANS: Tuple[Organ, ...] = (
    Organ(1, "liver", 62.0, (12.0, 14.0), 100.0, ((0.35, 0.30),), (1.0, 1.0, 0.9)),
    Organ(2, "kidney", 40.0, (7.0, 8.0), 310.0, ((0.72, 0.22), (0.72, 0.78)), (0.9, 0.7, 1.2)),
    Organ(3, "pancreas", 50.0, (6.0, 7.0), 170.0, ((0.62, 0.50),), (0.8, 1.6, 0.8)),
    Organ(4, "spleen", 58.0, (8.0, 10.0), 380.0, ((0.35, 0.75),), (1.0, 0.9, 1.0)),
    Organ(5, "gallbladder", 54.0, (5.0, 6.0), 240.0, ((0.85, 0.50),), (1.0, 1.0, 1.2)),
)

# five training clients with staggered coverage, patterned after dataset mixes
# where each source images a different stretch of the abdomen
DEFAULT_DOMAINS: Tuple[ClientDomain, ...] = (
    ClientDomain(offset=-25.0, contrast=1.00, smoothing=0.6, noise=10.0, z_window=(45.0, 85.0)),
    ClientDomain(offset=12.0, contrast=0.98, smoothing=0.9, noise=12.0, z_window=(20.0, 60.0)),
    ClientDomain(offset=-8.0, contrast=1.02, smoothing=0.7, noise=8.0, z_window=(30.0, 70.0)),
    ClientDomain(offset=25.0, contrast=0.99, smoothing=0.8, noise=10.0, z_window=(48.0, 78.0)),
    ClientDomain(offset=0.0, contrast=1.01, smoothing=0.5, noise=10.0, z_window=(15.0, 85.0)),
)

DEFAULT_OOF_DOMAIN = ClientDomain(offset=45.0, contrast=1.0, smoothing=0.7, noise=10.0, z_window=(25.0, 80.0))


@dataclass(frozen=True)
class PhantomSpec:
    organs: Tuple[Organ, ...] = DEFAULT_ORGANS
    domains: Tuple[ClientDomain, ...] = DEFAULT_DOMAINS
    oof_domain: ClientDomain = DEFAULT_OOF_DOMAIN
    volumes_per_client: int = 20
    oof_volumes: int = 10
    shape: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    crop_size: Tuple[int, int, int] = (32, 32, 32)
    val_fraction: float = 0.1
    test_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        validate_spec(self)

    @property
    def n_classes(self) -> int:
        return 1 + max(o.class_id for o in self.organs)

    @property
    def class_names(self) -> dict:
        return {o.class_id: o.name for o in self.organs}

    def split_counts(self) -> Tuple[int, int, int]:
        n = self.volumes_per_client
        n_test = int(round(self.test_fraction * n))
        n_val = int(round(self.val_fraction * n))
        return n - n_val - n_test, n_val, n_test


def validate_spec(spec: PhantomSpec) -> None:
    if any(s < c for s, c in zip(spec.shape, spec.crop_size)):
        raise ValueError(f"volume shape {spec.shape} smaller than crop size {spec.crop_size}")
    for o in spec.organs:
        if not 0.0 <= o.z_center <= 100.0:
            raise ValueError(f"organ {o.name}: z-center {o.z_center} outside [0, 100]")
        r = o.radius_range[1] * max(o.aspect)
        if 2 * r > min(spec.shape):
            raise ValueError(f"organ {o.name}: radius {r:.1f} voxels does not fit volume {spec.shape}")
    for d in (*spec.domains, spec.oof_domain):
        lo, hi = d.z_window
        if not 0.0 <= lo <= hi <= 100.0:
            raise ValueError(f"z-window {d.z_window} not inside [0, 100]")
    if spec.domains and spec.oof_domain.offset <= max(d.offset for d in spec.domains):
        raise ValueError("out-of-federation offset must exceed every training offset")
    n_train, _, _ = spec.split_counts()
    if n_train < 1:
        raise ValueError("every client needs at least one training volume")


class LabeledVolume(NamedTuple):
    volume: Volume
    labels: np.ndarray


def _ellipsoid(grid, center, radii) -> np.ndarray:
    h, w, d = grid
    return (
        ((h - center[0]) / radii[0]) ** 2
        + ((w - center[1]) / radii[1]) ** 2
        + ((d - center[2]) / radii[2]) ** 2
    ) <= 1.0


def render_anatomy(spec: PhantomSpec, z_window, rng: np.random.Generator):
    """Base HU image, label map and body mask for one synthetic patient."""
    H, W, D = spec.shape
    grid = np.meshgrid(np.arange(H), np.arange(W), np.arange(D), indexing="ij")
    z_min, z_max = z_window
    # jitter draws happen for every organ, present or not, so the stream does
    # not depend on the window
    body_c = ((H - 1) / 2 + rng.uniform(-1, 1), (W - 1) / 2 + rng.uniform(-1, 1), (D - 1) / 2)
    body_r = (0.62 * H * rng.uniform(0.95, 1.0), 0.62 * W * rng.uniform(0.95, 1.0), 4.0 * D)
    body = _ellipsoid(grid, body_c, body_r)

    image = np.where(body, BODY_HU, AIR_HU).astype(np.float64)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    for organ in spec.organs:
        radius = rng.uniform(*organ.radius_range)
        jitters = [rng.uniform(-2, 2, size=2) for _ in organ.positions]
        if not z_min <= organ.z_center <= z_max:
            continue
        span = max(z_max - z_min, 1e-6)
        d_c = (organ.z_center - z_min) / span * D - 0.5
        d_c = min(max(d_c, 0.0), D - 1.0)
        radii = tuple(radius * a for a in organ.aspect)
        for (fh, fw), jit in zip(organ.positions, jitters):
            c = (fh * H + jit[0], fw * W + jit[1], d_c)
            blob = _ellipsoid(grid, c, radii) & body
            centre_voxel = tuple(int(round(min(max(v, 0), n - 1))) for v, n in zip(c, spec.shape))
            blob[centre_voxel] = True
            image[blob] = organ.intensity
            labels[blob] = organ.class_id
    return image, labels, body


def apply_domain(image: np.ndarray, body: np.ndarray, domain: ClientDomain, rng: np.random.Generator) -> np.ndarray:
    """Appearance transform; air voxels are clamped below the air threshold."""
    out = image
    if domain.smoothing > 0:
        out = ndimage.gaussian_filter(out, domain.smoothing, mode="nearest")
    out = domain.offset + domain.contrast * out
    out = out + domain.noise * rng.standard_normal(image.shape)
    out[~body] = np.minimum(out[~body], TAU_AIR - 1.0)
    return out.astype(np.float32)


def _render(spec: PhantomSpec, domain: ClientDomain, stream: str, index: int, meta: dict) -> LabeledVolume:
    image, labels, body = render_anatomy(spec, domain.z_window, make_rng(spec.seed, stream, "anatomy", index))
    data = apply_domain(image, body, domain, make_rng(spec.seed, stream, "noise", index))
    meta = dict(meta, z_window=tuple(domain.z_window), body_fraction=float(body.mean()))
    vol = Volume(data, spec.spacing, domain.z_window, meta=meta)
    return LabeledVolume(vol, labels)


def generate_client_splits(spec: PhantomSpec, client_id: int) -> dict:
    """Train/val/test lists for one training client."""
    domain = spec.domains[client_id]
    n_train, n_val, _ = spec.split_counts()
    splits = {"train": [], "val": [], "test": []}
    for i in range(spec.volumes_per_client):
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        uid = f"client{client_id}/{split}/{i:03d}"
        meta = {"uid": uid, "client": client_id, "split": split}
        splits[split].append(_render(spec, domain, "fed", i, meta))
    return splits


def generate_client_dataset(spec: PhantomSpec, client_id: int):
    splits = generate_client_splits(spec, client_id)
    return splits["train"], splits["test"]


def make_out_of_federation_client(spec: PhantomSpec) -> List[LabeledVolume]:
    """Held-out client whose appearance lies outside the training range."""
    client_id = len(spec.domains)
    out = []
    for i in range(spec.oof_volumes):
        meta = {"uid": f"oof/{i:03d}", "client": client_id, "split": "oof"}
        out.append(_render(spec, spec.oof_domain, "oof", i, meta))
    return out


def analytic_slice_scores(v: Volume) -> Tuple[float, float]:
    """Slice-score extent of a phantom volume, read from its provenance."""
    try:
        z_min, z_max = v.meta["z_window"]
    except KeyError:
        raise NotFoundError("volume carries no phantom z-window; cannot score it") from None
    return float(z_min), float(z_max)


class AnalyticSliceScoreProvider:
    def score_extent(self, v: Volume) -> Tuple[float, float]:
        return analytic_slice_scores(v)


def foreground_mean(v: Volume, tau_air: float = TAU_AIR) -> float:
    """Mean intensity over non-air voxels."""
    return float(v.data[v.data >= tau_air].mean())
