"""Synthetic person-search scenes.

A "person" is a textured body rectangle under a head disc. The body texture is
a fixed basis expansion of the identity's appearance vector, so identity is
learnable from pixels but blurred by per-instance nuisance (brightness, pixel
noise, size, position). Clutter shapes share the body textures' statistics but
never carry a head, which is what the detector has to pick up on.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNLABELED = -1
FORMAT_VERSION = 1
_MAGIC = b"PSDS"
_TEXTURE_SHAPE = (12, 6)
_HEAD_COLOR = np.array([0.95, 0.78, 0.62])


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class IdentitySpec:
    identity: int  # global index across the labeled, unlabeled and test pools
    id_label: int  # training label in [0, P) or UNLABELED
    appearance: tuple[float, ...]


@dataclass
class Person:
    identity: int
    id_label: int
    box: tuple[float, float, float, float]


@dataclass
class Scene:
    image: np.ndarray  # (H, W, C) uint8
    persons: list[Person]
    clutter: list[tuple[float, float, float, float]] = field(default_factory=list)

    def boxes(self) -> np.ndarray:
        return np.array([p.box for p in self.persons], dtype=np.float64).reshape(-1, 4)

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image)
                and self.persons == other.persons and self.clutter == other.clutter)


@dataclass
class Query:
    identity: int
    scene: int  # index into gallery scenes holding the query crop
    box: tuple[float, float, float, float]
    gallery: tuple[int, ...]  # gallery scene indices searched for this query


@dataclass
class SceneConfig:
    num_labeled: int = 16
    num_unlabeled: int = 8
    num_test_identities: int = 16
    n_train_scenes: int = 160
    n_gallery_scenes: int = 60
    gallery_size_per_query: int = 20
    n_queries: int = 32
    image_size: int = 96
    channels: int = 3
    max_persons: int = 3
    min_person_height: int = 26
    max_person_height: int = 38
    appearance_dim: int = 8
    min_appearance_distance: float = 0.5
    max_person_iou: float = 0.2
    n_clutter: tuple[int, int] = (2, 4)
    brightness_noise: float = 0.15
    pixel_noise: float = 0.08
    texture_gain: float = 0.22


@dataclass
class DatasetSplit:
    config: SceneConfig
    identities: list[IdentitySpec]
    train: list[Scene]
    gallery: list[Scene]
    queries: list[Query]

    @property
    def num_labeled(self) -> int:
        return self.config.num_labeled

    def __eq__(self, other):
        return (isinstance(other, DatasetSplit) and self.config == other.config
                and self.identities == other.identities and self.train == other.train
                and self.gallery == other.gallery and self.queries == other.queries)


# ---------------------------------------------------------------------------
# rendering

def texture_basis(appearance_dim: int = 8, channels: int = 3) -> np.ndarray:
    """Fixed (K, C, h, w) basis: a color direction times a low-frequency spatial pattern."""
    h, w = _TEXTURE_SHAPE
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    patterns = [
        np.ones_like(yy),
        np.sign(yy + 1e-9),
        np.sign(xx + 1e-9),
        np.cos(np.pi * 2.0 * yy),
        np.cos(np.pi * 1.5 * xx),
        np.sign(yy + 1e-9) * np.sign(xx + 1e-9),
        1.0 - 2.0 * (yy ** 2 + xx ** 2 < 0.4),
        np.cos(np.pi * (yy + xx)),
    ]
    rng = np.random.default_rng(1234)
    basis = np.empty((appearance_dim, channels, h, w))
    for k in range(appearance_dim):
        pat = patterns[k % len(patterns)]
        color = rng.normal(size=channels)
        color /= np.linalg.norm(color)
        basis[k] = color[:, None, None] * pat[None]
    return basis


def _resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, h, w) array."""
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def body_texture(appearance, basis: np.ndarray, gain: float) -> np.ndarray:
    a = np.asarray(appearance)
    return np.clip(0.5 + gain * np.tensordot(a, basis, axes=1), 0.0, 1.0)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def _background(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    s, c = cfg.image_size, cfg.channels
    base = rng.uniform(0.25, 0.75, size=c)
    grad = rng.normal(scale=0.12, size=(c, 2))
    yy, xx = np.meshgrid(np.linspace(-1, 1, s), np.linspace(-1, 1, s), indexing="ij")
    img = base[:, None, None] + grad[:, 0, None, None] * yy + grad[:, 1, None, None] * xx
    blotch = _resize(rng.normal(scale=0.08, size=(c, 6, 6)), s, s)
    return img + blotch


def _draw_clutter(img, rng, cfg, basis) -> tuple[float, float, float, float]:
    s = cfg.image_size
    kind = rng.integers(3)
    if kind == 0:
        # headless body: person-like texture, non-person silhouette
        h = int(rng.integers(cfg.min_person_height // 2, cfg.max_person_height))
        w = int(rng.integers(8, 24))
        tex = body_texture(rng.uniform(-1, 1, size=cfg.appearance_dim), basis, cfg.texture_gain)
        patch = _resize(tex, h, w)
    elif kind == 1:
        h = int(rng.integers(8, 28))
        w = int(rng.integers(8, 28))
        patch = np.broadcast_to(rng.uniform(0.05, 0.95, size=cfg.channels)[:, None, None],
                                (cfg.channels, h, w))
    else:
        # a lone disc of head color
        r = int(rng.integers(3, 6))
        h = w = 2 * r + 1
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        mask = (yy ** 2 + xx ** 2) <= r * r
        x1 = int(rng.integers(0, s - w))
        y1 = int(rng.integers(0, s - h))
        region = img[:, y1:y1 + h, x1:x1 + w]
        region[:, mask] = (_HEAD_COLOR * rng.uniform(0.8, 1.1))[:, None]
        return (float(x1), float(y1), float(x1 + w), float(y1 + h))
    x1 = int(rng.integers(0, s - w))
    y1 = int(rng.integers(0, s - h))
    img[:, y1:y1 + h, x1:x1 + w] = patch
    return (float(x1), float(y1), float(x1 + w), float(y1 + h))


def _draw_person(img, box, appearance, rng, cfg, basis, brightness: float) -> None:
    x1, y1, x2, y2 = (int(v) for v in box)
    h, w = y2 - y1, x2 - x1
    head_h = max(4, int(round(0.28 * h)))
    body = _resize(body_texture(appearance, basis, cfg.texture_gain), h - head_h, w) * brightness
    img[:, y1 + head_h:y2, x1:x2] = body
    r = head_h / 2.0
    yy, xx = np.mgrid[0:head_h, 0:w]
    mask = ((yy + 0.5 - r) ** 2 + (xx + 0.5 - w / 2.0) ** 2) <= r * r
    head = img[:, y1:y1 + head_h, x1:x2]
    head[:, mask] = (_HEAD_COLOR * brightness)[:, None]


def _sample_box(rng, cfg, existing: list) -> tuple[float, float, float, float] | None:
    s = cfg.image_size
    for _ in range(50):
        h = int(rng.integers(cfg.min_person_height, cfg.max_person_height + 1))
        w = max(8, int(round(h * rng.uniform(0.38, 0.5))))
        x1 = int(rng.integers(0, s - w + 1))
        y1 = int(rng.integers(0, s - h + 1))
        box = (float(x1), float(y1), float(x1 + w), float(y1 + h))
        if not existing or box_iou(np.array([box]), np.array(existing)).max() <= cfg.max_person_iou:
            return box
    return None


def render_scene(identities: list[IdentitySpec], rng: np.random.Generator, cfg: SceneConfig,
                 basis: np.ndarray) -> Scene:
    img = _background(rng, cfg)
    clutter = [_draw_clutter(img, rng, cfg, basis)
               for _ in range(int(rng.integers(cfg.n_clutter[0], cfg.n_clutter[1] + 1)))]
    persons: list[Person] = []
    for ident in identities:
        box = _sample_box(rng, cfg, [p.box for p in persons])
        if box is None:
            continue
        brightness = float(np.clip(1.0 + rng.normal(scale=cfg.brightness_noise), 0.5, 1.5))
        _draw_person(img, box, ident.appearance, rng, cfg, basis, brightness)
        persons.append(Person(ident.identity, ident.id_label, box))
    if cfg.pixel_noise > 0:
        img = img + rng.normal(scale=cfg.pixel_noise, size=img.shape)
    image = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    return Scene(np.ascontiguousarray(image), persons, clutter)


# ---------------------------------------------------------------------------
# generation

def _sample_appearances(n: int, rng: np.random.Generator, dim: int, min_dist: float,
                        max_tries: int = 20000) -> np.ndarray:
    out: list[np.ndarray] = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise DatasetError(
                f"cannot draw {n} appearance vectors of dim {dim} with pairwise distance > {min_dist} "
                f"(got {len(out)} after {max_tries} draws)")
        cand = rng.uniform(-1.0, 1.0, size=dim)
        if all(np.linalg.norm(cand - o) > min_dist for o in out):
            out.append(cand)
    return np.array(out).reshape(n, dim)


def _scene_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    # one independent stream per scene so generation order does not matter
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def generate_dataset(seed: int, cfg: SceneConfig | None = None, **overrides) -> DatasetSplit:
    cfg = cfg or SceneConfig()
    if overrides:
        cfg = SceneConfig(**{**cfg.__dict__, **overrides})
    if cfg.num_labeled < 2:
        raise DatasetError(f"need at least 2 labeled identities, got {cfg.num_labeled}")
    if cfg.gallery_size_per_query > cfg.n_gallery_scenes:
        raise DatasetError(f"gallery_size_per_query {cfg.gallery_size_per_query} exceeds "
                           f"n_gallery_scenes {cfg.n_gallery_scenes}")
    id_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    n_total = cfg.num_labeled + cfg.num_unlabeled + cfg.num_test_identities
    apps = _sample_appearances(n_total, id_rng, cfg.appearance_dim, cfg.min_appearance_distance)
    identities = []
    for i in range(n_total):
        label = i if i < cfg.num_labeled else UNLABELED
        identities.append(IdentitySpec(i, label, tuple(float(v) for v in apps[i])))
    train_pool = identities[:cfg.num_labeled + cfg.num_unlabeled]
    # no separate test pool: galleries reuse the labeled training identities
    test_pool = identities[cfg.num_labeled + cfg.num_unlabeled:] or identities[:cfg.num_labeled]
    basis = texture_basis(cfg.appearance_dim, cfg.channels)

    train = []
    for i in range(cfg.n_train_scenes):
        rng = _scene_rng(seed, 1, i)
        k = int(rng.integers(1, cfg.max_persons + 1))
        # first slot cycles through labeled ids so every label is seen
        chosen = [identities[i % cfg.num_labeled]]
        others = [p for p in train_pool if p is not chosen[0]]
        chosen += [others[j] for j in rng.choice(len(others), size=k - 1, replace=False)]
        train.append(render_scene(chosen, rng, cfg, basis))

    gallery = []
    for i in range(cfg.n_gallery_scenes):
        rng = _scene_rng(seed, 2, i)
        k = int(rng.integers(1, cfg.max_persons + 1))
        chosen = [test_pool[i % len(test_pool)]] if test_pool else []
        others = [p for p in test_pool if not chosen or p is not chosen[0]]
        chosen += [others[j] for j in rng.choice(len(others), size=min(k - 1, len(others)), replace=False)]
        gallery.append(render_scene(chosen, rng, cfg, basis))

    queries = _make_queries(gallery, cfg, np.random.default_rng(np.random.SeedSequence([seed, 3])))
    return DatasetSplit(cfg, identities, train, gallery, queries)


def _make_queries(gallery: list[Scene], cfg: SceneConfig, rng: np.random.Generator) -> list[Query]:
    where: dict[int, list[int]] = {}
    for si, scene in enumerate(gallery):
        for p in scene.persons:
            where.setdefault(p.identity, []).append(si)
    candidates = sorted(i for i, scenes in where.items() if len(set(scenes)) >= 2)
    queries = []
    for q in range(min(cfg.n_queries, 4 * len(candidates))):
        ident = candidates[q % len(candidates)]
        scenes = sorted(set(where[ident]))
        qscene = scenes[(q // len(candidates)) % len(scenes)]
        positives = [s for s in scenes if s != qscene]
        positives = positives[:cfg.gallery_size_per_query]
        rest = [s for s in range(len(gallery)) if s != qscene and s not in positives]
        n_fill = max(0, min(cfg.gallery_size_per_query - len(positives), len(rest)))
        fill = [rest[j] for j in rng.choice(len(rest), size=n_fill, replace=False)] if n_fill else []
        box = next(p.box for p in gallery[qscene].persons if p.identity == ident)
        queries.append(Query(ident, qscene, box, tuple(sorted(positives + fill))))
    return queries


# ---------------------------------------------------------------------------
# serialization
#
# File layout (all integers little-endian):
#   b"PSDS" | u32 version | u32 header_len | header JSON
#   per section in (TRAIN, GALLERY): 4-byte tag | u32 scene count |
#       per scene: u32 meta_len | meta JSON | H*W*C uint8 image
#   b"QRYS" | u32 len | queries JSON

def _config_to_json(cfg: SceneConfig) -> dict:
    d = dict(cfg.__dict__)
    d["n_clutter"] = list(cfg.n_clutter)
    return d


def _write_scene(buf, scene: Scene) -> None:
    meta = {"persons": [[p.identity, p.id_label, list(p.box)] for p in scene.persons],
            "clutter": [list(c) for c in scene.clutter]}
    raw = json.dumps(meta, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(np.ascontiguousarray(scene.image, dtype=np.uint8).tobytes())


def dataset_bytes(split: DatasetSplit) -> bytes:
    cfg = split.config
    header = {
        "version": FORMAT_VERSION,
        "P": cfg.num_labeled,
        "Q": cfg.num_unlabeled,
        "image": [cfg.image_size, cfg.image_size, cfg.channels],
        "config": _config_to_json(cfg),
        "identities": [[i.identity, i.id_label, list(i.appearance)] for i in split.identities],
    }
    buf = io.BytesIO()
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf.write(_MAGIC + struct.pack("<II", FORMAT_VERSION, len(raw)) + raw)
    for tag, scenes in ((b"TRAN", split.train), (b"GALL", split.gallery)):
        buf.write(tag + struct.pack("<I", len(scenes)))
        for scene in scenes:
            _write_scene(buf, scene)
    qraw = json.dumps([[q.identity, q.scene, list(q.box), list(q.gallery)] for q in split.queries],
                      separators=(",", ":")).encode()
    buf.write(b"QRYS" + struct.pack("<I", len(qraw)) + qraw)
    return buf.getvalue()


def write_dataset(split: DatasetSplit, path) -> None:
    Path(path).write_bytes(dataset_bytes(split))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.section = "HEADER"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetError(f"truncated file: section {self.section} needs {n} bytes at offset "
                               f"{self.pos}, only {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def json(self, n: int):
        start = self.pos
        try:
            return json.loads(self.take(n))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetError(f"malformed JSON in section {self.section} at offset {start}: {exc}") from None


def read_dataset(path) -> DatasetSplit:
    return parse_dataset(Path(path).read_bytes())


def parse_dataset(data: bytes) -> DatasetSplit:
    r = _Reader(data)
    if r.take(4) != _MAGIC:
        raise DatasetError("not a dataset file: bad magic at offset 0")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {version} at offset 4")
    header = r.json(r.u32())
    try:
        cdict = dict(header["config"])
        cdict["n_clutter"] = tuple(cdict["n_clutter"])
        cfg = SceneConfig(**cdict)
        identities = [IdentitySpec(int(i), int(l), tuple(float(v) for v in a))
                      for i, l, a in header["identities"]]
        h, w, c = header["image"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed header: {exc!r}") from None
    sections = {}
    for expected, name in ((b"TRAN", "TRAIN"), (b"GALL", "GALLERY")):
        r.section = name
        tag = r.take(4)
        if tag != expected:
            raise DatasetError(f"expected section {name} at offset {r.pos - 4}, found {tag!r}")
        scenes = []
        for _ in range(r.u32()):
            meta = r.json(r.u32())
            img = np.frombuffer(r.take(h * w * c), dtype=np.uint8).reshape(h, w, c).copy()
            persons = [Person(int(i), int(l), tuple(float(v) for v in b)) for i, l, b in meta["persons"]]
            scenes.append(Scene(img, persons, [tuple(float(v) for v in b) for b in meta["clutter"]]))
        sections[name] = scenes
    r.section = "QUERIES"
    if r.take(4) != b"QRYS":
        raise DatasetError(f"expected section QUERIES at offset {r.pos - 4}")
    queries = [Query(int(i), int(s), tuple(float(v) for v in b), tuple(int(g) for g in gal))
               for i, s, b, gal in r.json(r.u32())]
    if r.pos != len(data):
        raise DatasetError(f"trailing bytes after QUERIES section at offset {r.pos}")
    return DatasetSplit(cfg, identities, sections["TRAIN"], sections["GALLERY"], queries)


# ---------------------------------------------------------------------------

def person_patches(scenes: list[Scene], size: tuple[int, int] = (16, 8)):
    """Raw ground-truth crops resized to ``size``; returns (patches (N, C*h*w), identities)."""
    feats, ids = [], []
    for scene in scenes:
        img = scene.image.astype(np.float64).transpose(2, 0, 1) / 255.0
        for p in scene.persons:
            x1, y1, x2, y2 = (int(v) for v in p.box)
            feats.append(_resize(img[:, y1:y2, x1:x2], *size).reshape(-1))
            ids.append(p.identity)
    return np.array(feats), np.array(ids)
