"""Synthetic phantom volumes, normalization, augmentation, .mctv files.

Phantoms are nested ellipsoids on a voxel grid: an edema shell (class 2)
around a necrosis shell (class 1) around an enhancing core (class 3).
Each modality images the classes with its own contrast profile plus
Gaussian noise, so no single modality separates every class pair cleanly.
All generation is a pure function of (spec, seed, sample index).
"""

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, CropTooLarge, InvalidSpec, TruncatedFile, VersionUnsupported
from .model import MODALITIES

# class x modality mean intensities (synthetic, not clinical): flair pops
# edema, t1ce pops enhancing, t1 darkens necrosis, t2 brightens the whole
# tumor; the near-ties make the ambiguous pairs genuinely modality-dependent
DEFAULT_CONTRAST = (
    (0.00, 0.00, 0.60, 0.00),  # background
    (0.50, 0.20, 0.00, 0.70),  # necrosis / non-enhancing
    (1.00, 0.22, 0.35, 0.80),  # edema
    (0.52, 1.00, 0.37, 0.75),  # enhancing
)


@dataclass
class PhantomSpec:
    grid: int = 48
    wt_radii: tuple = (10.0, 14.0)
    tc_radii: tuple = (6.0, 8.0)
    et_radii: tuple = (3.0, 4.5)
    contrast: tuple = DEFAULT_CONTRAST
    noise_sigma: float = 0.08
    seed: int = 0

    def validate(self):
        for name, (lo, hi) in (("wt", self.wt_radii), ("tc", self.tc_radii),
                               ("et", self.et_radii)):
            if not (0 < lo <= hi):
                raise InvalidSpec(f"{name} radii range {lo}..{hi} invalid")
        if not (self.et_radii[1] < self.tc_radii[0] and self.tc_radii[1] < self.wt_radii[0]):
            raise InvalidSpec("radius ranges must nest: et < tc < wt componentwise")
        if self.wt_radii[1] + 1.0 > self.grid / 2:
            raise InvalidSpec(
                f"wt radius up to {self.wt_radii[1]} does not fit grid {self.grid}")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise sigma must be >= 0")
        if len(self.contrast) != 4 or any(len(row) != 4 for row in self.contrast):
            raise InvalidSpec("contrast table must be 4 classes x 4 modalities")


@dataclass
class VolumeSample:
    """Four aligned modality volumes [1, D, H, W] plus a label volume."""

    images: dict
    labels: np.ndarray
    sample_id: str


def _ellipsoid_mask(coords, center, radii):
    zz, yy, xx = coords
    return ((zz - center[0]) / radii[0]) ** 2 \
        + ((yy - center[1]) / radii[1]) ** 2 \
        + ((xx - center[2]) / radii[2]) ** 2 <= 1.0


def generate_phantom(spec, n):
    """n deterministic samples; every sample contains all four classes and
    the regions nest voxelwise (ET within TC within WT)."""
    if n < 1:
        raise InvalidSpec("need n >= 1 samples")
    spec.validate()
    g = spec.grid
    coords = np.meshgrid(np.arange(g), np.arange(g), np.arange(g), indexing="ij")
    coords = [c.astype(np.float64) for c in coords]
    margin = g / 2 - spec.wt_radii[1] - 1.0
    contrast = np.asarray(spec.contrast, dtype=np.float64)

    samples = []
    for i, child in enumerate(np.random.SeedSequence(spec.seed).spawn(n)):
        rng = np.random.default_rng(child)
        center = g / 2 + rng.uniform(-margin, margin, size=3)
        wt_r = rng.uniform(*spec.wt_radii, size=3)
        tc_r = rng.uniform(*spec.tc_radii, size=3)
        et_r = rng.uniform(*spec.et_radii, size=3)

        labels = np.zeros((g, g, g), dtype=np.uint8)
        labels[_ellipsoid_mask(coords, center, wt_r)] = 2
        labels[_ellipsoid_mask(coords, center, tc_r)] = 1
        labels[_ellipsoid_mask(coords, center, et_r)] = 3
        if len(np.unique(labels)) != 4:
            raise InvalidSpec(f"sample {i} lost a class; radii too small for the grid")

        images = {}
        for m in MODALITIES:
            base = contrast[labels, int(m)]
            noise = rng.normal(0.0, spec.noise_sigma, size=base.shape) if spec.noise_sigma > 0 else 0.0
            images[m] = (base + noise).astype(np.float32)[None]
        samples.append(VolumeSample(images=images, labels=labels, sample_id=f"phantom{i:04d}"))
    return samples


def zscore_normalize(x):
    """(x - mean) / max(std, 1e-8) over all voxels of one volume."""
    x = np.asarray(x, dtype=np.float32)
    std = float(x.std())
    return ((x - x.mean()) / max(std, 1e-8)).astype(np.float32)


def _orientations24():
    out = []
    for perm in itertools.permutations(range(3)):
        for flips in itertools.product((1, -1), repeat=3):
            mat = np.zeros((3, 3))
            for i, p in enumerate(perm):
                mat[i, p] = flips[i]
            if np.linalg.det(mat) > 0:
                out.append((perm, flips))
    return tuple(out)


ROTATIONS24 = _orientations24()


def apply_orientation(vol, idx):
    """Rotate the trailing three axes of vol by one of the 24 proper cube
    rotations (axis permutation + paired flips)."""
    perm, flips = ROTATIONS24[idx]
    lead = vol.ndim - 3
    axes = tuple(range(lead)) + tuple(lead + p for p in perm)
    out = np.transpose(vol, axes)
    flip_axes = tuple(lead + i for i, f in enumerate(flips) if f < 0)
    if flip_axes:
        out = np.flip(out, axis=flip_axes)
    return np.ascontiguousarray(out)


def augment(sample, crop, rng):
    """Random crop -> random 90-degree orientation -> per-modality intensity
    shift in [-0.1, 0.1] -> per-axis mirror flips (p = 0.5).

    Images and labels receive identical spatial transforms; labels never see
    the intensity shift.
    """
    dims = sample.labels.shape
    if any(crop > d for d in dims):
        raise CropTooLarge(f"crop {crop} exceeds volume {dims}")
    corner = [int(rng.integers(0, d - crop + 1)) for d in dims]
    sl = tuple(slice(c, c + crop) for c in corner)

    labels = sample.labels[sl]
    images = {m: sample.images[m][(slice(None),) + sl] for m in MODALITIES}

    rot = int(rng.integers(0, len(ROTATIONS24)))
    labels = apply_orientation(labels, rot)
    images = {m: apply_orientation(img, rot) for m, img in images.items()}

    for m in MODALITIES:
        shift = rng.uniform(-0.1, 0.1)
        images[m] = (images[m] + np.float32(shift)).astype(np.float32)

    for axis in range(3):
        if rng.random() < 0.5:
            labels = np.flip(labels, axis=axis)
            images = {m: np.flip(img, axis=axis + 1) for m, img in images.items()}

    return VolumeSample(
        images={m: np.ascontiguousarray(img) for m, img in images.items()},
        labels=np.ascontiguousarray(labels),
        sample_id=sample.sample_id,
    )


# ---------------------------------------------------------------------------
# .mctv file format
# ---------------------------------------------------------------------------

VOL_MAGIC = b"MCTV"
VOL_VERSION = 1


def write_volume(path, sample):
    d, h, w = sample.labels.shape
    with open(path, "wb") as f:
        f.write(VOL_MAGIC)
        f.write(struct.pack("<I", VOL_VERSION))
        f.write(struct.pack("<3I", d, h, w))
        for m in MODALITIES:
            f.write(np.ascontiguousarray(sample.images[m][0], dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"volume file ends inside {what}")
    return buf


def read_volume(path):
    path = str(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != VOL_MAGIC:
            raise BadMagic(f"{path} is not a volume file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VOL_VERSION:
            raise VersionUnsupported(f"volume version {version}")
        d, h, w = struct.unpack("<3I", _read_exact(f, 12, "dims"))
        nvox = d * h * w
        images = {}
        for m in MODALITIES:
            raw = _read_exact(f, 4 * nvox, f"{m.key} volume")
            images[m] = np.frombuffer(raw, dtype="<f4").reshape(1, d, h, w).copy()
        raw = _read_exact(f, nvox, "labels")
        labels = np.frombuffer(raw, dtype=np.uint8).reshape(d, h, w).copy()
    sample_id = path.rsplit("/", 1)[-1]
    if sample_id.endswith(".mctv"):
        sample_id = sample_id[:-5]
    return VolumeSample(images=images, labels=labels, sample_id=sample_id)


def write_dataset(root, split, samples):
    """<root>/<split>/<id>.mctv plus a manifest listing ids, one per line."""
    split_dir = root / split
    split_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_volume(split_dir / f"{s.sample_id}.mctv", s)
    manifest = "".join(f"{s.sample_id}\n" for s in samples)
    (split_dir / "manifest.txt").write_text(manifest)


def read_dataset(root, split):
    split_dir = root / split
    ids = [line.strip() for line in (split_dir / "manifest.txt").read_text().splitlines()
           if line.strip()]
    return [read_volume(split_dir / f"{i}.mctv") for i in ids]


def normalized_images(sample):
    """Z-scored copies of all four modality volumes."""
    return {m: zscore_normalize(sample.images[m]) for m in MODALITIES}


def center_crop(sample, crop):
    """Deterministic centered crop of images and labels."""
    dims = sample.labels.shape
    if any(crop > d for d in dims):
        raise CropTooLarge(f"crop {crop} exceeds volume {dims}")
    sl = tuple(slice((d - crop) // 2, (d - crop) // 2 + crop) for d in dims)
    return VolumeSample(
        images={m: np.ascontiguousarray(sample.images[m][(slice(None),) + sl])
                for m in MODALITIES},
        labels=np.ascontiguousarray(sample.labels[sl]),
        sample_id=sample.sample_id,
    )
