"""Synthetic two-domain glyph datasets and their on-disk container.

Each class is a glyph made of a few thick strokes. The source domain renders
glyphs filled and smoothly shaded; the target domain renders only their
outlines and adds speckle and Gaussian noise. A dataset directory holds
``manifest.json`` and one tensor file per (class, domain).
"""

import json
import os
import shutil
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .fileformat import FormatError, decode_tensor, write_tensor

GENERATOR_VERSION = 1
DOMAINS = ("source", "target")
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    strokes: tuple = (2, 4)
    thickness: tuple = (0.05, 0.09)
    jitter: float = 0.03
    rotation: float = 0.25
    outline_width: float = 1.6
    noise: float = 0.4

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class DatasetManifest:
    classes: int = 60
    samples: int = 30
    height: int = 32
    width: int = 32
    split_sizes: tuple = (40, 10, 10)
    seed: int = 0
    domains: tuple = DOMAINS
    generator_version: int = GENERATOR_VERSION
    splits: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)

    def assign_splits(self):
        if sum(self.split_sizes) != self.classes:
            raise DatasetError(f"split sizes {self.split_sizes} do not add up to {self.classes} classes")
        order = np.random.default_rng([self.seed, 0x5]).permutation(self.classes)
        bounds = np.cumsum((0,) + tuple(self.split_sizes))
        self.splits = {name: sorted(int(c) for c in order[a:b])
                       for name, a, b in zip(SPLITS, bounds[:-1], bounds[1:])}
        return self

    def to_json(self):
        d = asdict(self)
        d["split_sizes"] = list(self.split_sizes)
        d["domains"] = list(self.domains)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["split_sizes"] = tuple(d["split_sizes"])
        d["domains"] = tuple(d["domains"])
        return cls(**d)


def tensor_filename(class_id, domain):
    return f"class{class_id:04d}_{domain}.fsud"


# -- rendering -------------------------------------------------------------

def _glyph(spec, seed, class_id):
    rng = np.random.default_rng([seed, class_id, 0x61])
    count = rng.integers(spec.strokes[0], spec.strokes[1] + 1)
    strokes = []
    for _ in range(count):
        a = rng.uniform(0.22, 0.78, size=2)
        b = rng.uniform(0.22, 0.78, size=2)
        while np.hypot(*(a - b)) < 0.2:
            b = rng.uniform(0.22, 0.78, size=2)
        strokes.append((a, b, rng.uniform(*spec.thickness)))
    return strokes


def _segment_distance(px, py, a, b):
    d = b - a
    t = ((px - a[0]) * d[0] + (py - a[1]) * d[1]) / max(d @ d, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def _sdf(strokes, px, py):
    return np.min([_segment_distance(px, py, a, b) - r for a, b, r in strokes], axis=0)


def render(spec, seed, class_id, index, domain, height=32, width=32):
    """One grayscale image in [0, 1]; a pure function of its arguments."""
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    rng = np.random.default_rng([seed, class_id, index, DOMAINS.index(domain)])
    theta = rng.uniform(-spec.rotation, spec.rotation)
    scale = rng.uniform(0.88, 1.12)
    shift = rng.uniform(-0.05, 0.05, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]) * scale
    strokes = []
    for a, b, r in _glyph(spec, seed, class_id):
        a = rot @ (a - 0.5) + 0.5 + shift + rng.normal(0, spec.jitter, 2)
        b = rot @ (b - 0.5) + 0.5 + shift + rng.normal(0, spec.jitter, 2)
        strokes.append((a, b, r * scale))
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = (xs + 0.5) / width, (ys + 0.5) / height
    sdf = _sdf(strokes, px, py) * width  # in pixels
    if domain == "source":
        alpha = np.clip(0.5 - sdf, 0.0, 1.0)
        ang = rng.uniform(0, 2 * np.pi)
        ramp = (px - 0.5) * np.cos(ang) + (py - 0.5) * np.sin(ang)
        shade = 0.7 + 0.6 * ramp
        img = alpha * np.clip(shade, 0.3, 1.0)
    else:
        alpha = np.clip(1.0 - np.abs(sdf) / spec.outline_width, 0.0, 1.0)
        img = alpha + rng.normal(0, 0.08 * spec.noise, size=alpha.shape)
        speckle = rng.random(alpha.shape) < 0.06 * spec.noise
        img = np.where(speckle, rng.random(alpha.shape), img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_class(spec, seed, class_id, domain, samples, height=32, width=32):
    return np.stack([render(spec, seed, class_id, i, domain, height, width) for i in range(samples)])


# -- container -------------------------------------------------------------

def gen_synthetic(path, manifest=None, spec=SyntheticSpec(), force=False):
    """Write a synthetic dataset directory; byte-identical for equal arguments."""
    manifest = manifest or DatasetManifest()
    path = os.fspath(path)
    if os.path.exists(path):
        if not force:
            raise FileExistsError(f"{path} exists; pass force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path)
    manifest.assign_splits()
    manifest.synthetic = spec.to_dict()
    files = {}
    for c in range(manifest.classes):
        for domain in manifest.domains:
            arr = render_class(spec, manifest.seed, c, domain, manifest.samples, manifest.height, manifest.width)
            name = tensor_filename(c, domain)
            write_tensor(os.path.join(path, name), arr)
            with open(os.path.join(path, name), "rb") as fh:
                files[name] = zlib.crc32(fh.read())
    manifest.files = files
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        fh.write(manifest.to_json())
    return manifest


class Dataset:
    """In-memory dataset: images[domain][class_id] is (samples, H, W) float32."""

    def __init__(self, manifest, images):
        self.manifest = manifest
        self.images = images

    @property
    def image_shape(self):
        return self.manifest.height, self.manifest.width

    def split_classes(self, split):
        try:
            return list(self.manifest.splits[split])
        except KeyError:
            raise DatasetError(f"unknown split {split!r}") from None

    def samples(self, class_id, domain):
        return self.images[domain][class_id]

    def labeled(self, split, domain="source"):
        xs, ys = [], []
        for c in self.split_classes(split):
            arr = self.samples(c, domain)
            xs.append(arr)
            ys.extend([c] * len(arr))
        return np.concatenate(xs), np.asarray(ys)


def validate_splits(splits, classes):
    seen = {}
    for name in SPLITS:
        if name not in splits:
            raise DatasetError(f"manifest lacks the {name!r} split")
        for c in splits[name]:
            if c in seen:
                raise DatasetError(f"class {c} appears in both {seen[c]!r} and {name!r} splits")
            seen[c] = name
    if sorted(seen) != list(range(classes)):
        raise DatasetError("split class lists do not cover every class exactly once")


def load_dataset(path):
    path = os.fspath(path)
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = DatasetManifest.from_json(fh.read())
    except FileNotFoundError:
        raise DatasetError(f"{mpath} not found") from None
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DatasetError(f"{mpath}: malformed manifest ({exc})") from None
    if tuple(manifest.domains) != DOMAINS:
        raise DatasetError(f"manifest domains {manifest.domains} != {DOMAINS}")
    validate_splits(manifest.splits, manifest.classes)
    images = {d: {} for d in DOMAINS}
    expected = (manifest.samples, manifest.height, manifest.width)
    for c in range(manifest.classes):
        for domain in DOMAINS:
            name = tensor_filename(c, domain)
            fpath = os.path.join(path, name)
            if not os.path.exists(fpath):
                raise DatasetError(f"missing {domain} file {name} for class {c}")
            with open(fpath, "rb") as fh:
                payload = fh.read()
            if name in manifest.files and zlib.crc32(payload) != manifest.files[name]:
                raise DatasetError(f"{name}: checksum does not match manifest")
            try:
                arr = decode_tensor(payload, label=name)
            except FormatError as exc:
                raise DatasetError(str(exc)) from None
            if arr.shape != expected:
                raise DatasetError(f"{name}: extents {arr.shape} != {expected}")
            images[domain][c] = arr
    return Dataset(manifest, images)
