"""Synthetic striped-person dataset, image formats, and manifest loading.

Every identity is a fixed vertical color-band signature.  Individual
images perturb that signature with the four retrieval stressors: vertical
shift (inaccurate crop box), vertical stretch (pose), a top/bottom
occlusion band, and pixel noise.  Confuser identity pairs share all bands
except one, so telling them apart requires the one differing stripe.

Images are stored as binary PPM (P6); a raw float32 tensor format (.art)
is accepted alongside.  A dataset is described by a manifest CSV with
columns path,identity,camera,split.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

BACKGROUND = 0.05  # fill value for vacated and occluded rows

MANIFEST_HEADER = ["path", "identity", "camera", "split"]
SPLITS = ("train", "query", "gallery")


# ---------------------------------------------------------------------------
# image formats


def write_ppm(path, image) -> None:
    """Write a float (3, H, W) image in [0, 1] as binary PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3, H, W) image, got {img.shape}")
    h, w = img.shape[1], img.shape[2]
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a float (3, H, W) array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


ART_MAGIC = b"ARTF"


def write_art(path, tensor) -> None:
    """Write a float tensor as raw little-endian f32 with an ARTF header."""
    arr = np.asarray(tensor, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(ART_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(arr.astype("<f4").tobytes())


def read_art(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != ART_MAGIC:
            raise ValueError(f"{path}: not an ARTF tensor file")
        (rank,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(4 * size), dtype="<f4")
        return data.reshape(shape).astype(np.float64)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix == ".art":
        return read_art(path)
    return read_ppm(path)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the striped-person generator.

    Perturbation magnitudes are maxima: each image draws its own shift,
    stretch, and occlusion within them.
    """

    num_identities: int = 48
    images_per_identity: int = 10
    image_size: int = 56
    signature_length: int = 14
    shift_rows: int = 10
    occlusion_fraction: float = 0.25
    stretch_range: tuple = (0.85, 1.15)
    confuser_fraction: float = 0.25
    noise: float = 0.03
    seed: int = 7
    train_identities: int = 32
    queries_per_identity: int = 3
    cameras: int = 4
    # "independent": every band color drawn fresh per identity.
    # "shared": all identities permute one common palette, so color
    # histograms match across identities and only band ORDER separates
    # them; this is what makes alignment matter.
    palette_mode: str = "shared"

    def __post_init__(self):
        if self.signature_length > self.image_size:
            raise ValueError(
                f"SyntheticConfig: image of {self.image_size} rows is too small "
                f"for a {self.signature_length}-band signature"
            )
        if self.image_size % self.signature_length:
            raise ValueError(
                "SyntheticConfig: image size must be divisible by the signature length"
            )
        if not (0 <= self.shift_rows < self.image_size):
            raise ValueError("SyntheticConfig: shift must be below the image height")
        if not (0.0 <= self.occlusion_fraction < 1.0):
            raise ValueError("SyntheticConfig: occlusion fraction must be in [0, 1)")
        if not (self.stretch_range[0] <= 1.0 <= self.stretch_range[1]):
            raise ValueError("SyntheticConfig: stretch range must bracket 1")
        if not (0 < self.train_identities < self.num_identities):
            raise ValueError("SyntheticConfig: need train and test identities")
        if self.queries_per_identity >= self.images_per_identity:
            raise ValueError("SyntheticConfig: queries must leave gallery images")
        if self.palette_mode not in ("independent", "shared"):
            raise ValueError(f"SyntheticConfig: unknown palette mode {self.palette_mode!r}")

    @property
    def band_height(self) -> int:
        return self.image_size // self.signature_length


def identity_signatures(config: SyntheticConfig) -> tuple[np.ndarray, list]:
    """Per-identity band colors plus the list of confuser pairs.

    Confuser pairs are consecutive identity ids; the second member copies
    the first except for one recolored band.
    """
    rng = np.random.default_rng(config.seed)
    if config.palette_mode == "shared":
        palette = rng.uniform(0.15, 0.95, size=(config.signature_length, 3))
        sigs = np.stack(
            [palette[rng.permutation(config.signature_length)]
             for _ in range(config.num_identities)]
        )
    else:
        sigs = rng.uniform(
            0.15, 0.95, size=(config.num_identities, config.signature_length, 3)
        )
    num_pairs = int(config.num_identities * config.confuser_fraction / 2)
    pairs = []
    for k in range(num_pairs):
        a, b = 2 * k, 2 * k + 1
        band = int(rng.integers(0, config.signature_length))
        sigs[b] = sigs[a]
        sigs[b, band] = rng.uniform(0.15, 0.95, size=3)
        pairs.append({"first": a, "second": b, "band": band})
    return sigs, pairs


def render_canonical(signature, image_size: int) -> np.ndarray:
    """Paint a band signature into a (3, size, size) image."""
    signature = np.asarray(signature, dtype=np.float64)
    bands = signature.shape[0]
    band_height = image_size // bands
    img = np.empty((3, image_size, image_size))
    for b in range(bands):
        img[:, b * band_height : (b + 1) * band_height, :] = signature[b][:, None, None]
    return img


def apply_stretch(image, factor: float) -> np.ndarray:
    """Vertical stretch about the image center; vacated rows -> background."""
    img = np.asarray(image, dtype=np.float64)
    h = img.shape[1]
    center = (h - 1) / 2.0
    rows = np.round((np.arange(h) - center) / factor + center).astype(int)
    out = np.full_like(img, BACKGROUND)
    valid = (rows >= 0) & (rows < h)
    out[:, valid, :] = img[:, rows[valid], :]
    return out


def apply_vertical_shift(image, shift: int) -> np.ndarray:
    """Move content down by ``shift`` rows (up when negative)."""
    img = np.asarray(image, dtype=np.float64)
    out = np.full_like(img, BACKGROUND)
    h = img.shape[1]
    if shift >= 0:
        out[:, shift:, :] = img[:, : h - shift, :]
    else:
        out[:, :shift, :] = img[:, -shift:, :]
    return out


def apply_occlusion(image, rows: int, side: str) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64).copy()
    if rows <= 0:
        return img
    if side == "top":
        img[:, :rows, :] = BACKGROUND
    elif side == "bottom":
        img[:, img.shape[1] - rows :, :] = BACKGROUND
    else:
        raise ValueError(f"apply_occlusion: unknown side {side!r}")
    return img


def perturbed_image(canonical, rng, config: SyntheticConfig) -> tuple[np.ndarray, dict]:
    """One random draw of the generator's perturbation stack."""
    factor = float(rng.uniform(*config.stretch_range))
    shift = int(rng.integers(-config.shift_rows, config.shift_rows + 1))
    max_occ = int(config.occlusion_fraction * config.image_size)
    occ_rows = int(rng.integers(0, max_occ + 1)) if max_occ else 0
    side = "top" if rng.random() < 0.5 else "bottom"
    img = apply_stretch(canonical, factor)
    img = apply_vertical_shift(img, shift)
    img = apply_occlusion(img, occ_rows, side)
    if config.noise > 0:
        img = img + rng.normal(0.0, config.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    params = {"stretch": factor, "shift": shift, "occlusion": occ_rows, "side": side}
    return img, params


def generate_synthetic(config: SyntheticConfig, out_dir) -> Path:
    """Write the dataset under ``out_dir``; returns the manifest path.

    Identity ids below ``train_identities`` form the train split; the
    remaining identities are split into query/gallery images.  Cameras
    are assigned round-robin within each identity.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    sigs, pairs = identity_signatures(config)
    rng = np.random.default_rng(config.seed + 1)
    rows = []
    image_meta = []
    for identity in range(config.num_identities):
        canonical = render_canonical(sigs[identity], config.image_size)
        for k in range(config.images_per_identity):
            img, params = perturbed_image(canonical, rng, config)
            name = f"images/id{identity:04d}_{k:02d}.ppm"
            write_ppm(out_dir / name, img)
            camera = k % config.cameras
            if identity < config.train_identities:
                split = "train"
            else:
                split = "query" if k < config.queries_per_identity else "gallery"
            rows.append((name, identity, camera, split))
            image_meta.append({"path": name, **params})
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    meta = {
        "config": asdict(config),
        "confuser_pairs": pairs,
        "images": image_meta,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Dataset:
    """Lazy-loading view over a manifest."""

    root: Path
    paths: list
    identities: np.ndarray
    cameras: np.ndarray
    splits: list
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.paths)

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=int)

    @property
    def num_train_identities(self) -> int:
        train = self.indices("train")
        return int(self.identities[train].max()) + 1 if train.size else 0

    def load_image(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = load_image(self.root / self.paths[index])
        return self._cache[index]


def load_manifest(path) -> Dataset:
    """Parse and validate a manifest CSV; errors name the offending row."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    paths, identities, cameras, splits = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: bad manifest header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            p, ident, cam, split = row
            try:
                identities.append(int(ident))
                cameras.append(int(cam))
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: identity/camera must be integers, "
                    f"got {ident!r}/{cam!r}"
                ) from None
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            paths.append(p)
            splits.append(split)
    identities = np.asarray(identities, dtype=np.int64)
    cameras = np.asarray(cameras, dtype=np.int64)
    ds = Dataset(path.parent, paths, identities, cameras, splits)

    train_ids = sorted(set(identities[ds.indices("train")].tolist()))
    if train_ids and train_ids != list(range(len(train_ids))):
        raise ValueError(f"{path}: train identities must be contiguous from 0, got {train_ids[:8]}...")
    gallery_ids = set(identities[ds.indices("gallery")].tolist())
    for i in ds.indices("query"):
        if identities[i] not in gallery_ids:
            raise ValueError(
                f"{path}: query row {i + 2} (identity {identities[i]}) "
                f"has no gallery image"
            )
    return ds


# ---------------------------------------------------------------------------
# augmentation


def horizontal_flip(image) -> np.ndarray:
    return np.asarray(image)[:, :, ::-1].copy()


def augment(image, rng, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus pad-and-random-crop to the same size."""
    img = np.asarray(image, dtype=np.float64)
    if rng.random() < 0.5:
        img = horizontal_flip(img)
    offy, offx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    h, w = img.shape[1], img.shape[2]
    return padded[:, offy : offy + h, offx : offx + w].copy()
