"""Synthetic grayscale dataset with a designed "most discriminative part".

Each object is a class-unique high-contrast core glyph (square, plus,
disc, diagonal cross, ...) attached to a low-contrast elongated body
ellipse. The body looks the same for every class; only its position
relative to the core is class-consistent (one attachment direction per
class). A classifier therefore locks onto the cores first, and a network
trained with the cores suppressed has to pick up the body/junction
context instead.

Ground truth per object: class id, full binary mask (core union body),
core bounding box, body bounding box. Boxes are inclusive
(row0, col0, row1, col1).
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .io import read_pgm, write_pgm


class DatasetError(ValueError):
    """Raised on invalid specs or malformed dataset directories."""


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 4
    image_size: int = 64
    samples: int = 500
    objects_per_image: tuple = (1, 2)
    core_radius: int = 6
    body_length: int = 10   # ellipse semi-major axis
    body_width: int = 4     # ellipse semi-minor axis
    background_level: int = 60
    background_noise: int = 8
    core_level: int = 235
    body_level: int = 105
    multi_label_prob: float = 0.15
    rng_seed: int = 0

    def validate(self):
        if self.class_count < 2:
            raise DatasetError(f"class_count must be >= 2, got {self.class_count}")
        if self.samples < 0:
            raise DatasetError("samples must be >= 0")
        extent = 2 * (self.core_radius + 2 * self.body_length)
        if extent + 4 > self.image_size:
            raise DatasetError(
                f"objects (extent ~{extent}px) do not fit in a "
                f"{self.image_size}px image")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise DatasetError(f"bad objects_per_image range {self.objects_per_image}")

    def to_dict(self):
        d = self.__dict__.copy()
        d["objects_per_image"] = list(self.objects_per_image)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["objects_per_image"] = tuple(d["objects_per_image"])
        return cls(**d)


@dataclass
class SynthObject:
    class_id: int
    mask: np.ndarray       # (H, W) bool, core union body
    core_box: tuple        # (r0, c0, r1, c1) inclusive
    body_box: tuple

    @property
    def full_box(self):
        a, b = self.core_box, self.body_box
        return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


@dataclass
class Sample:
    image: np.ndarray      # (H, W) uint8
    labels: np.ndarray     # (C,) uint8
    objects: list = field(default_factory=list)

    def to_tensor(self):
        # center around the nominal background level so the background
        # contributes ~nothing to pooled activations
        return ((self.image.astype(np.float32) / 255.0 - 0.25) * 2.0)[None, :, :]


# ---------------------------------------------------------------------------
# glyph and body geometry

def glyph_mask(class_id, radius):
    """Class-unique boolean stamp in a (2r+1) x (2r+1) box."""
    r = radius
    n = 2 * r + 1
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    kind = class_id % 6
    if kind == 0:      # filled square
        return np.ones((n, n), dtype=bool)
    if kind == 1:      # plus
        return (np.abs(yy) <= 1) | (np.abs(xx) <= 1)
    if kind == 2:      # ring (hollow disc); wide hole keeps it far from the
                       # filled square even at coarse feature resolution
        d2 = yy * yy + xx * xx
        return (d2 <= r * r) & (d2 >= (r - 2) ** 2)
    if kind == 3:      # diagonal cross
        return (np.abs(yy - xx) <= 1) | (np.abs(yy + xx) <= 1)
    if kind == 4:      # filled disc
        return yy * yy + xx * xx <= r * r
    # kind == 5: triangle
    return (yy >= -r // 2) & (np.abs(xx) <= (yy + r) // 2 + 1)


def class_direction(class_id, class_count):
    # spread over a half turn so every class gets a distinct body orientation
    # (an ellipse at angle a looks identical at a + pi); the attachment side
    # alone would not survive core suppression as a class cue
    angle = np.pi * class_id / class_count
    return np.sin(angle), np.cos(angle)  # (dy, dx)


def body_mask(class_id, class_count, spec, center, size):
    """Rotated-ellipse boolean mask on the full image grid."""
    dy, dx = class_direction(class_id, class_count)
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx - cx) * dx + (yy - cy) * dy        # along-axis coordinate
    v = -(xx - cx) * dy + (yy - cy) * dx       # cross-axis coordinate
    a, b = spec.body_length, spec.body_width
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _tight_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def _place_object(rng, spec, class_id, occupied, size):
    """Rejection-sample a placement whose rendering stays inside the image."""
    dy, dx = class_direction(class_id, spec.class_count)
    offset = spec.core_radius + spec.body_length - 1
    r = spec.core_radius
    for _ in range(100):
        cy = int(rng.integers(2 + r, size - 2 - r))
        cx = int(rng.integers(2 + r, size - 2 - r))
        by = int(round(cy + dy * offset))
        bx = int(round(cx + dx * offset))
        # conservative bound on the body ellipse extent
        m = spec.body_length + 1
        if not (1 <= by - m and by + m < size - 1 and 1 <= bx - m and bx + m < size - 1):
            continue
        core = np.zeros((size, size), dtype=bool)
        core[cy - r:cy + r + 1, cx - r:cx + r + 1] = glyph_mask(class_id, r)
        body = body_mask(class_id, spec.class_count, spec, (by, bx), size)
        full = core | body
        if occupied is not None and (full & occupied).any():
            continue
        return core, body
    return None


def _render_sample(rng, spec):
    size = spec.image_size
    img = np.clip(
        rng.normal(spec.background_level, spec.background_noise, (size, size)),
        0, 255).astype(np.uint8)

    multi = rng.random() < spec.multi_label_prob
    lo, hi = spec.objects_per_image
    if multi:
        n_obj = max(2, int(rng.integers(lo, hi + 1)))
        first = int(rng.integers(spec.class_count))
        others = [c for c in range(spec.class_count) if c != first]
        classes = [first, int(rng.choice(others))]
        classes += [first] * (n_obj - 2)
    else:
        n_obj = int(rng.integers(lo, hi + 1))
        classes = [int(rng.integers(spec.class_count))] * n_obj

    objects = []
    occupied = np.zeros((size, size), dtype=bool)
    for class_id in classes:
        placed = _place_object(rng, spec, class_id, occupied, size)
        if placed is None:
            continue  # crowded image; keep what fits
        core, body = placed
        full = core | body
        occupied |= full
        body_px = np.clip(
            rng.normal(spec.body_level, 4, (size, size)), 0, 255).astype(np.uint8)
        core_px = np.clip(
            rng.normal(spec.core_level, 4, (size, size)), 0, 255).astype(np.uint8)
        img = np.where(body, body_px, img)
        img = np.where(core, core_px, img)
        objects.append(SynthObject(class_id=class_id, mask=full,
                                   core_box=_tight_box(core),
                                   body_box=_tight_box(body)))

    if not objects:  # should not happen with a validated spec
        raise DatasetError("failed to place any object; spec too crowded")
    labels = np.zeros(spec.class_count, dtype=np.uint8)
    for o in objects:
        labels[o.class_id] = 1
    return Sample(image=img, labels=labels, objects=objects)


def generate_dataset(spec: SynthSpec):
    """Deterministic in spec: sample i uses the PRNG stream (rng_seed, i)."""
    spec.validate()
    return [_render_sample(np.random.default_rng((spec.rng_seed, i)), spec)
            for i in range(spec.samples)]


# ---------------------------------------------------------------------------
# on-disk layout: images/*.pgm, masks/*.pgm, manifest.json (schema 1)

def dataset_checksum(samples):
    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.tobytes())
        h.update(s.labels.tobytes())
        for o in s.objects:
            h.update(bytes([o.class_id]))
            h.update(np.packbits(o.mask).tobytes())
            h.update(json.dumps([o.core_box, o.body_box]).encode())
    return h.hexdigest()


def save_dataset(path, samples, spec: SynthSpec):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "masks"), exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name = f"images/img_{i:05d}.pgm"
        write_pgm(os.path.join(path, img_name), s.image)
        objs = []
        for j, o in enumerate(s.objects):
            mask_name = f"masks/img_{i:05d}_obj{j}.pgm"
            write_pgm(os.path.join(path, mask_name), o.mask.astype(np.uint8) * 255)
            objs.append({"class_id": o.class_id, "mask": mask_name,
                         "mask_pixels": int(o.mask.sum()),
                         "core_box": list(o.core_box), "body_box": list(o.body_box)})
        entries.append({"image": img_name, "labels": [int(v) for v in s.labels],
                        "objects": objs})
    manifest = {"schema": 1, "spec": spec.to_dict(), "seed": spec.rng_seed,
                "samples": entries}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(path):
    """Returns (samples, spec); fails naming the first bad manifest entry."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("schema") != 1:
        raise DatasetError(f"unsupported manifest schema: {manifest.get('schema')}")
    spec = SynthSpec.from_dict(manifest["spec"])
    samples = []
    for entry in manifest["samples"]:
        img_path = os.path.join(path, entry["image"])
        if not os.path.exists(img_path):
            raise DatasetError(f"manifest references missing file: {entry['image']}")
        image = read_pgm(img_path)
        objects = []
        for od in entry["objects"]:
            mask_path = os.path.join(path, od["mask"])
            if not os.path.exists(mask_path):
                raise DatasetError(f"manifest references missing file: {od['mask']}")
            mask = read_pgm(mask_path) > 0
            objects.append(SynthObject(class_id=od["class_id"], mask=mask,
                                       core_box=tuple(od["core_box"]),
                                       body_box=tuple(od["body_box"])))
        samples.append(Sample(image=image,
                              labels=np.array(entry["labels"], dtype=np.uint8),
                              objects=objects))
    return samples, spec
