"""Synthetic CT-like volumes, preprocessing, and patch extraction.

Arrays are indexed ``(z, y, x)``: axis 0 runs across slices, axes 1-2 are
in-plane. Spacing tuples follow the same order.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GenerationError, ValidationError

AIR_LEVEL = -1000.0
TISSUE_LEVEL = 40.0
BONE_LEVEL = 700.0


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self) -> None:
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3:
            raise ValidationError(f"volume {self.id!r}: expected 3-d voxels, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValidationError(f"volume {self.id!r}: spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class Mask:
    voxels: np.ndarray
    id: str = ""

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels)
        if not np.isin(self.voxels, (0, 1)).all():
            raise ValidationError(f"mask {self.id!r} is not binary")
        self.voxels = self.voxels.astype(np.uint8, copy=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class SceneSpec:
    """One synthetic scene: a blurred low-contrast ellipsoid inside a body
    cylinder, flanked by two bright spheres standing in for femur heads."""

    volume_shape: tuple[int, int, int] = (64, 96, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blob_center: tuple[float, float, float] = (32.0, 48.0, 48.0)
    blob_semi_axes: tuple[float, float, float] = (9.0, 10.0, 11.0)
    blob_angle: float = 0.0
    blur: float = 3.0
    contrast: float = 20.0
    landmark_centers: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (32.0, 48.0, 22.0),
        (32.0, 48.0, 74.0),
    )
    landmark_radius: float = 6.0
    body_semi_axes: tuple[float, float] = (42.0, 46.0)
    noise_sigma: float = 8.0
    seed: int = 0


@dataclass
class SceneDistribution:
    """Ranges from which :func:`generate_dataset` draws per-volume scenes."""

    volume_shape: tuple[int, int, int] = (64, 96, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    semi_axes_min: tuple[float, float, float] = (7.0, 8.0, 8.0)
    semi_axes_max: tuple[float, float, float] = (11.0, 13.0, 13.0)
    center_jitter: tuple[float, float, float] = (6.0, 6.0, 6.0)
    landmark_offset: tuple[float, float, float] = (3.0, 3.0, 3.0)
    landmark_half_separation: tuple[float, float] = (24.0, 28.0)
    landmark_radius: float = 6.0
    body_margin: tuple[float, float] = (6.0, 2.0)
    blur: float = 3.0
    contrast: float = 20.0
    noise_sigma: float = 8.0

    def scaled(self, factor: float) -> SceneDistribution:
        """Same scene layout with every length multiplied by ``factor``."""
        s = lambda t: tuple(float(v) * factor for v in t)  # noqa: E731
        return replace(
            self,
            volume_shape=tuple(int(round(v * factor)) for v in self.volume_shape),
            semi_axes_min=s(self.semi_axes_min),
            semi_axes_max=s(self.semi_axes_max),
            center_jitter=s(self.center_jitter),
            landmark_offset=s(self.landmark_offset),
            landmark_half_separation=s(self.landmark_half_separation),
            landmark_radius=self.landmark_radius * factor,
            body_margin=s(self.body_margin),
            blur=self.blur * factor,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneDistribution:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def sample(self, rng: np.random.Generator, seed: int) -> SceneSpec:
        shape = np.asarray(self.volume_shape, dtype=float)
        mid = (shape - 1) / 2
        center = mid + rng.uniform(-1, 1, 3) * np.asarray(self.center_jitter)
        axes = rng.uniform(self.semi_axes_min, self.semi_axes_max)
        angle = rng.uniform(0, math.pi)
        ref = center + rng.uniform(-1, 1, 3) * np.asarray(self.landmark_offset)
        half = rng.uniform(*self.landmark_half_separation)
        left = (ref[0], ref[1], ref[2] - half)
        right = (ref[0], ref[1], ref[2] + half)
        body = (mid[1] - self.body_margin[0], mid[2] - self.body_margin[1])
        return SceneSpec(
            volume_shape=tuple(int(v) for v in self.volume_shape),
            spacing=self.spacing,
            blob_center=tuple(float(v) for v in center),
            blob_semi_axes=tuple(float(v) for v in axes),
            blob_angle=float(angle),
            blur=self.blur,
            contrast=self.contrast,
            landmark_centers=(tuple(map(float, left)), tuple(map(float, right))),
            landmark_radius=self.landmark_radius,
            body_semi_axes=tuple(float(v) for v in body),
            noise_sigma=self.noise_sigma,
            seed=seed,
        )


@dataclass
class PatchSample:
    input: np.ndarray
    label: np.ndarray
    origin: tuple[str, int, tuple[int, int]]


def _grid(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.meshgrid(*(np.arange(n, dtype=float) for n in shape), indexing="ij", sparse=True)


def ellipsoid_mask(shape, center, semi_axes, angle: float = 0.0) -> np.ndarray:
    """Voxels whose centre lies inside an ellipsoid rotated by ``angle`` in-plane."""
    z, y, x = _grid(shape)
    dz, dy, dx = z - center[0], y - center[1], x - center[2]
    c, s = math.cos(angle), math.sin(angle)
    u = c * dy + s * dx
    v = -s * dy + c * dx
    r = (dz / semi_axes[0]) ** 2 + (u / semi_axes[1]) ** 2 + (v / semi_axes[2]) ** 2
    return r <= 1.0


def _sphere(shape, center, radius) -> np.ndarray:
    z, y, x = _grid(shape)
    return (z - center[0]) ** 2 + (y - center[1]) ** 2 + (x - center[2]) ** 2 <= radius**2


def generate_scene(spec: SceneSpec) -> tuple[Volume, Mask]:
    shape = tuple(int(n) for n in spec.volume_shape)
    blob = ellipsoid_mask(shape, spec.blob_center, spec.blob_semi_axes, spec.blob_angle)
    if not blob.any():
        raise GenerationError("blob does not cover any voxel")
    faces = [blob[0], blob[-1], blob[:, 0], blob[:, -1], blob[:, :, 0], blob[:, :, -1]]
    if any(f.any() for f in faces):
        raise GenerationError(f"blob at {spec.blob_center} with semi-axes {spec.blob_semi_axes} exceeds volume {shape}")
    bones = np.zeros(shape, dtype=bool)
    for c in spec.landmark_centers:
        sphere = _sphere(shape, c, spec.landmark_radius)
        if (sphere & blob).any():
            raise GenerationError("landmark sphere overlaps the blob")
        if not sphere.any():
            raise GenerationError(f"landmark at {c} lies outside the volume")
        bones |= sphere
    _, y, x = _grid(shape)
    cy, cx = (shape[1] - 1) / 2, (shape[2] - 1) / 2
    body = ((y - cy) / spec.body_semi_axes[0]) ** 2 + ((x - cx) / spec.body_semi_axes[1]) ** 2 <= 1.0
    body = np.broadcast_to(body, shape)

    soft = blob.astype(float)
    if spec.blur > 0:
        # blur is the 10-90% edge width; a Gaussian edge spans 2.563 sigma.
        soft = ndimage.gaussian_filter(soft, sigma=spec.blur / 2.563, mode="constant")
    vol = np.where(body, TISSUE_LEVEL, AIR_LEVEL) + spec.contrast * soft * body
    vol = np.where(bones, BONE_LEVEL, vol)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        vol = vol + body * rng.normal(0.0, spec.noise_sigma, size=shape)
    vid = f"case{spec.seed:04d}"
    return Volume(vol.astype(np.float32), spec.spacing, vid), Mask(blob.astype(np.uint8), vid)


def generate_dataset(
    distribution: SceneDistribution | None = None, n: int = 10, seed: int = 0
) -> list[tuple[Volume, Mask]]:
    """``n`` scenes; volume ``i`` depends only on ``(seed, i)``."""
    if n <= 0:
        raise ValidationError(f"n must be positive, got {n}")
    distribution = distribution or SceneDistribution()
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        spec = distribution.sample(rng, seed=int(rng.integers(0, 2**31 - 1)))
        vol, mask = generate_scene(spec)
        vol.id = mask.id = f"case{i:04d}"
        out.append((vol, mask))
    return out


def _resample_array(voxels: np.ndarray, spacing, target) -> tuple[np.ndarray, tuple[float, ...]]:
    if min(voxels.shape) < 2:
        raise ValidationError(f"cannot interpolate a volume with a degenerate axis: {voxels.shape}")
    if min(spacing) <= 0 or min(target) <= 0:
        raise ValidationError("spacing must be positive")
    # Output voxel i sits at physical i*target, sampled from input index i*target/spacing.
    steps = [t / s for s, t in zip(spacing, target)]
    out_shape = [int(math.floor((n - 1) / st + 1e-9)) + 1 for n, st in zip(voxels.shape, steps)]
    if all(abs(st - 1.0) < 1e-12 for st in steps):
        return voxels.copy(), tuple(float(t) for t in target)
    coords = np.meshgrid(*(np.arange(n) * st for n, st in zip(out_shape, steps)), indexing="ij")
    out = ndimage.map_coordinates(voxels.astype(np.float64), coords, order=1, mode="nearest")
    return out, tuple(float(t) for t in target)


def resample_isotropic(volume: Volume, target: float = 1.0) -> Volume:
    """Trilinear resampling to ``target`` mm spacing on every axis."""
    out, spacing = _resample_array(volume.voxels, volume.spacing, (target,) * 3)
    return Volume(out.astype(volume.voxels.dtype), spacing, volume.id)


def downsample(volume: Volume, factor: int = 4) -> Volume:
    """Trilinear down-sampling by ``factor`` along every axis."""
    target = tuple(s * factor for s in volume.spacing)
    out, spacing = _resample_array(volume.voxels, volume.spacing, target)
    return Volume(out.astype(volume.voxels.dtype), spacing, volume.id)


def downsample_quarter(volume: Volume) -> Volume:
    return downsample(volume, 4)


def resample_mask(mask: Mask, spacing, target) -> Mask:
    """Resample a mask the same way as its volume (trilinear, then >= 0.5)."""
    out, _ = _resample_array(mask.voxels.astype(np.float64), spacing, target)
    return Mask((out >= 0.5).astype(np.uint8), mask.id)


def normalize_intensity(volume: Volume) -> Volume:
    """Affine map of ``[min, max]`` onto ``[0, 255]``; a constant volume maps to 0."""
    v = volume.voxels.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) * (255.0 / (hi - lo))
    return Volume(out.astype(np.float32), volume.spacing, volume.id)


def crop_body(volume: Volume, threshold: float = 10.0) -> tuple[Volume, tuple[int, int, int]]:
    """Crop to the bounding box of voxels above ``threshold``; returns the crop offset."""
    above = volume.voxels > threshold
    if not above.any():
        raise ValidationError(f"volume {volume.id!r}: no voxel above body threshold {threshold}")
    lo = [int(np.flatnonzero(above.any(axis=tuple(a for a in range(3) if a != ax)))[0]) for ax in range(3)]
    hi = [int(np.flatnonzero(above.any(axis=tuple(a for a in range(3) if a != ax)))[-1]) + 1 for ax in range(3)]
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    return Volume(volume.voxels[sl].copy(), volume.spacing, volume.id), tuple(lo)


def crop_like(array: np.ndarray, offset, shape) -> np.ndarray:
    return array[tuple(slice(o, o + n) for o, n in zip(offset, shape))].copy()


def uncrop(array: np.ndarray, offset, full_shape) -> np.ndarray:
    """Place ``array`` back into a zero array of ``full_shape`` at ``offset``."""
    out = np.zeros(full_shape, dtype=array.dtype)
    out[tuple(slice(o, o + n) for o, n in zip(offset, array.shape))] = array
    return out


def slice_stack(voxels: np.ndarray, z: int, channels: int) -> np.ndarray:
    """``channels`` consecutive slices centred on ``z``; edge slices are replicated."""
    half = channels // 2
    idx = np.clip(np.arange(z - half, z + half + 1), 0, voxels.shape[0] - 1)
    return voxels[idx]


def sample_patch_origins(
    shape: tuple[int, int, int], count: int, size: int, channels: int, rng: np.random.Generator
) -> np.ndarray:
    """``(count, 3)`` array of (middle slice, row, col) crop origins."""
    if channels % 2 == 0 or channels < 1:
        raise ValidationError(f"channel count must be odd, got {channels}")
    nz, ny, nx = shape
    if nz < channels:
        raise ValidationError(f"volume has {nz} slices, fewer than the {channels}-slice stack")
    if size > ny or size > nx:
        raise ValidationError(f"patch size {size} exceeds in-plane size {ny}x{nx}")
    half = channels // 2
    z = rng.integers(half, nz - half, size=count)
    y = rng.integers(0, ny - size + 1, size=count)
    x = rng.integers(0, nx - size + 1, size=count)
    return np.stack([z, y, x], axis=1)


def crop_patch(voxels: np.ndarray, labels: np.ndarray, origin, size: int, channels: int) -> tuple[np.ndarray, np.ndarray]:
    z, y, x = (int(v) for v in origin)
    half = channels // 2
    inp = voxels[z - half : z + half + 1, y : y + size, x : x + size]
    lab = labels[z, y : y + size, x : x + size]
    return inp, lab


def extract_patches(
    volume: Volume, mask: Mask, count: int = 500, size: int = 64, channels: int = 3, seed: int = 0
) -> list[PatchSample]:
    """Random in-plane crops at random slices; the label is the middle slice's mask."""
    if mask.shape != volume.shape:
        raise ValidationError(f"mask shape {mask.shape} != volume shape {volume.shape}")
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    origins = sample_patch_origins(volume.shape, count, size, channels, rng)
    out = []
    for o in origins:
        inp, lab = crop_patch(volume.voxels, mask.voxels, o, size, channels)
        out.append(PatchSample(inp.copy(), lab.copy(), (volume.id, int(o[0]), (int(o[1]), int(o[2])))))
    return out


# --- VVOL files -------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_vvol(path: str | Path, voxels: np.ndarray, spacing=(1.0, 1.0, 1.0), dtype: str = "f32") -> None:
    """Write ``VVOL nx ny nz sx sy sz dtype`` + little-endian row-major voxels."""
    if dtype not in _DTYPES:
        raise ValidationError(f"unknown VVOL dtype {dtype!r}")
    nz, ny, nx = voxels.shape
    sz, sy, sx = spacing
    header = f"VVOL {nx} {ny} {nz} {sx!r} {sy!r} {sz!r} {dtype}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(voxels, dtype=_DTYPES[dtype]).tobytes())


def read_vvol(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 8 or header[0] != "VVOL":
            raise ValidationError(f"{path}: not a VVOL file")
        nx, ny, nz = (int(v) for v in header[1:4])
        sx, sy, sz = (float(v) for v in header[4:7])
        dt = _DTYPES.get(header[7])
        if dt is None:
            raise ValidationError(f"{path}: unknown dtype {header[7]!r}")
        data = np.frombuffer(fh.read(), dtype=dt)
    if data.size != nx * ny * nz:
        raise ValidationError(f"{path}: expected {nx * ny * nz} voxels, found {data.size}")
    arr = data.reshape(nz, ny, nx)
    return (arr.astype(np.float32) if dt.kind == "f" else arr.copy()), (sz, sy, sx)


def save_dataset(pairs: list[tuple[Volume, Mask]], out_dir: str | Path) -> Path:
    """Write volumes, masks and ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    entries = []
    for vol, mask in pairs:
        vpath = Path("volumes") / f"{vol.id}.vvol"
        mpath = Path("masks") / f"{vol.id}.vvol"
        write_vvol(out_dir / vpath, vol.voxels, vol.spacing, "f32")
        write_vvol(out_dir / mpath, mask.voxels, vol.spacing, "u8")
        entries.append({"id": vol.id, "volume_path": str(vpath), "mask_path": str(mpath)})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2))
    return manifest


def load_dataset(manifest: str | Path) -> list[tuple[Volume, Mask]]:
    manifest = Path(manifest)
    root = manifest.parent
    pairs = []
    for e in json.loads(manifest.read_text()):
        vox, spacing = read_vvol(root / e["volume_path"])
        mvox, _ = read_vvol(root / e["mask_path"])
        if mvox.shape != vox.shape:
            raise ValidationError(f"{e['id']}: mask shape {mvox.shape} != volume shape {vox.shape}")
        pairs.append((Volume(vox, spacing, e["id"]), Mask(mvox, e["id"])))
    return pairs


@dataclass
class Case:
    """A preprocessed volume/mask pair (isotropic, normalised, body-cropped)."""

    id: str
    volume: Volume
    mask: Mask
    body_offset: tuple[int, int, int] = (0, 0, 0)
    full_shape: tuple[int, int, int] = ()

    def uncropped(self, array: np.ndarray) -> np.ndarray:
        """Map an array on the cropped grid back onto the resampled, uncropped grid."""
        return uncrop(array, self.body_offset, self.full_shape or array.shape)


def preprocess(volume: Volume, mask: Mask, body_threshold: float = 10.0, spacing: float = 1.0) -> Case:
    if mask.shape != volume.shape:
        raise ValidationError(f"mask shape {mask.shape} != volume shape {volume.shape}")
    iso = resample_isotropic(volume, spacing)
    iso_mask = resample_mask(mask, volume.spacing, iso.spacing)
    norm = normalize_intensity(iso)
    body, offset = crop_body(norm, body_threshold)
    cropped_mask = Mask(crop_like(iso_mask.voxels, offset, body.shape), mask.id)
    return Case(volume.id, body, cropped_mask, offset, iso.shape)
