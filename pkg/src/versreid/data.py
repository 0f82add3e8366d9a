"""Synthetic multi-scene person images, manifests, PK sampling and PPM I/O."""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .mpda import adjust_lighting, grayscale

SCENES = ("general", "low_resolution", "clothing_change", "occlusion", "cross_modality")
SPLITS = ("train", "query", "gallery")
HEIGHT, WIDTH = 32, 16

HEAD_RADIUS = (1.5, 2.0, 2.5, 3.0)
TORSO_WIDTH = (6, 8, 10, 12)
TORSO_HEIGHT = (7, 9, 11, 13)
LEG_LENGTH = (5, 7, 9, 10)
SHAPE_LEVELS = 4


class DataError(RuntimeError):
    pass


class PPMError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# -- PPM ---------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up."""
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(image * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + quantize(image).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    pos = 0
    tokens: list[int] = []
    if buf[:2] != b"P6":
        raise PPMError("missing P6 magic", 0)
    pos = 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        m = re.compile(rb"\d+").match(buf, pos)
        if m is None:
            raise PPMError("malformed header", pos)
        tokens.append(int(m.group()))
        pos = m.end()
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMError("header must end with a single whitespace byte", pos)
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}", pos)
    need = w * h * 3
    if len(buf) - pos < need:
        raise PPMError(f"truncated payload: expected {need} bytes, found {len(buf) - pos}",
                       len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return (pixels.reshape(h, w, 3) / 255.0).astype(np.float32)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    try:
        return decode_ppm(Path(path).read_bytes())
    except PPMError as e:
        raise PPMError(f"{path}: {e.args[0].rsplit(' (byte', 1)[0]}", e.offset) from None


# -- rendering ---------------------------------------------------------------

@dataclass(frozen=True)
class IdentitySpec:
    index: int
    head: int
    torso_width: int
    torso_height: int
    legs: int
    torso_hue: float
    leg_hue: float

    @property
    def shape_params(self) -> tuple[int, int, int, int]:
        return (self.head, self.torso_width, self.torso_height, self.legs)


def make_identities(n: int, rng: np.random.Generator) -> list[IdentitySpec]:
    """``n`` identities with pairwise-distinct body shapes."""
    combos = SHAPE_LEVELS ** 4
    if not 2 <= n <= combos:
        raise ValueError(f"number of identities must be in [2, {combos}], got {n}")
    codes = rng.choice(combos, size=n, replace=False)
    specs = []
    for i, code in enumerate(codes):
        levels = [(int(code) // SHAPE_LEVELS**k) % SHAPE_LEVELS for k in range(4)]
        specs.append(IdentitySpec(i, *levels, torso_hue=float(rng.random()),
                                  leg_hue=float(rng.random())))
    return specs


def _color(hue: float, sat: float, val: float) -> np.ndarray:
    return hsv_to_rgb(np.array([hue % 1.0, sat, val]))


def camera_style(camera: int) -> tuple[float, float]:
    """Deterministic background hue and global brightness for a camera id."""
    return (0.17 * camera) % 1.0, 0.85 + 0.3 * ((camera * 7) % 5) / 4


def render_background(camera: int, rng: np.random.Generator) -> np.ndarray:
    hue, _ = camera_style(camera)
    base = _color(hue, 0.25, 0.55)
    noise = rng.normal(0.0, 0.06, size=(HEIGHT, WIDTH, 1))
    return np.clip(base + noise + rng.normal(0, 0.02, size=(HEIGHT, WIDTH, 3)), 0, 1)


def render_person(spec: IdentitySpec, camera: int, rng: np.random.Generator,
                  torso_hue: float | None = None) -> np.ndarray:
    img = render_background(camera, rng)
    dx, dy = rng.integers(-1, 2, size=2)
    cx = WIDTH / 2 + dx
    r = HEAD_RADIUS[spec.head]
    tw, th, ll = TORSO_WIDTH[spec.torso_width], TORSO_HEIGHT[spec.torso_height], LEG_LENGTH[spec.legs]
    top = 1 + dy
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH] + 0.5
    head = (yy - (top + r)) ** 2 + (xx - cx) ** 2 <= r * r
    img[head] = (0.85, 0.68, 0.55)
    t0 = int(top + 2 * r + 1)
    x0, x1 = int(round(cx - tw / 2)), int(round(cx + tw / 2))
    hue = spec.torso_hue if torso_hue is None else torso_hue
    img[max(t0, 0):t0 + th, max(x0, 0):x1] = _color(hue, 0.8, 0.85)
    l0 = t0 + th
    leg_w = max(1, tw // 2 - 1)
    leg = _color(spec.leg_hue, 0.6, 0.5)
    img[l0:l0 + ll, max(x0, 0):x0 + leg_w] = leg
    img[l0:l0 + ll, x1 - leg_w:x1] = leg
    _, gain = camera_style(camera)
    return np.clip(img * gain, 0.0, 1.0)


def low_resolution(image: np.ndarray, factor: int = 4) -> np.ndarray:
    h, w, c = image.shape
    small = image.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    return np.repeat(np.repeat(small, factor, axis=0), factor, axis=1)


@dataclass
class SceneSample:
    image: np.ndarray | None
    identity: int
    scene: int
    camera: int
    split: str = "train"
    path: str = ""


def render_sample(spec: IdentitySpec, scene: int | str, camera: int,
                  rng: np.random.Generator) -> SceneSample:
    s = SCENES.index(scene) if isinstance(scene, str) else int(scene)
    if not 0 <= s < len(SCENES):
        raise ValueError(f"unknown scene {scene!r}")
    torso_hue = float(rng.random()) if SCENES[s] == "clothing_change" else None
    img = render_person(spec, camera, rng, torso_hue)
    img = adjust_lighting(img, rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1))
    name = SCENES[s]
    if name == "low_resolution":
        img = low_resolution(img)
    elif name == "occlusion":
        area = rng.uniform(0.1, 0.4)
        bh = int(np.clip(round(np.sqrt(area * HEIGHT * WIDTH * 2)), 1, HEIGHT))
        bw = int(np.clip(round(area * HEIGHT * WIDTH / bh), 1, WIDTH))
        ty, tx = rng.integers(0, HEIGHT - bh + 1), rng.integers(0, WIDTH - bw + 1)
        texture = render_background(int(rng.integers(0, 2 * len(SCENES))), rng)
        img[ty:ty + bh, tx:tx + bw] = texture[ty:ty + bh, tx:tx + bw]
    elif name == "cross_modality":
        img = grayscale(img)
    return SceneSample(np.clip(img, 0, 1).astype(np.float32), spec.index, s, camera)


# -- dataset -----------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    samples: list[SceneSample]
    seed: int
    config: dict[str, str] = field(default_factory=dict)
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def split(self, name: str, scene: int | None = None) -> list[SceneSample]:
        return [s for s in self.samples
                if s.split == name and (scene is None or s.scene == scene)]

    @property
    def num_identities(self) -> int:
        return len({s.identity for s in self.samples})

    def image(self, sample: SceneSample) -> np.ndarray:
        if sample.image is not None:
            return sample.image
        img = self._cache.get(sample.path)
        if img is None:
            img = self._cache[sample.path] = read_ppm(self.root / sample.path)
        return img

    def images(self, samples: Sequence[SceneSample]) -> np.ndarray:
        return np.stack([self.image(s) for s in samples])

    def preload(self) -> None:
        for s in self.samples:
            self.image(s)


def camera_id(scene: int, local: int, cameras: int = 2) -> int:
    return scene * cameras + local


def _allocate(identity: int, n: int, num_query: int, num_gallery: int):
    """Split and local camera for each of the ``n`` images of one (identity, scene)."""
    qcam = identity % 2
    for j in range(n):
        if j < num_query:
            yield j, "query", qcam
        elif j < num_query + num_gallery:
            yield j, "gallery", 1 - qcam
        else:
            yield j, "train", j % 2


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("VERSREID_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(out_dir: str | os.PathLike, num_identities: int,
                     images_per_identity_per_scene: int, seed: int,
                     num_query: int = 1, num_gallery: int = 2) -> DatasetManifest:
    if num_identities < 2:
        raise ValueError("need at least 2 identities")
    if images_per_identity_per_scene < num_query + num_gallery:
        raise ValueError("images per identity per scene must cover the query and gallery quota")
    root = Path(out_dir)
    specs = make_identities(num_identities, np.random.default_rng([seed, 0]))
    jobs = []
    for s, scene in enumerate(SCENES):
        for spec in specs:
            for j, split, local in _allocate(spec.index, images_per_identity_per_scene,
                                             num_query, num_gallery):
                cam = camera_id(s, local)
                rel = f"{scene}/{split}/{spec.index:04d}_c{cam:02d}_{j:03d}.ppm"
                jobs.append((spec, s, cam, split, rel, (seed, 1, s, spec.index, j)))

    def run(job):
        spec, s, cam, split, rel, key = job
        sample = render_sample(spec, s, cam, np.random.default_rng(list(key)))
        sample.split, sample.path = split, rel
        sample.image = decode_ppm(encode_ppm(sample.image))
        return sample

    try:
        for scene in SCENES:
            for split in SPLITS:
                (root / scene / split).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directories under {root}: {e}") from e
    with ThreadPoolExecutor(_worker_count()) as pool:
        samples = list(pool.map(run, jobs))
    config = {"ids": str(num_identities), "per_scene": str(images_per_identity_per_scene),
              "query": str(num_query), "gallery": str(num_gallery),
              "scenes": ",".join(SCENES), "height": str(HEIGHT), "width": str(WIDTH)}
    manifest = DatasetManifest(root, samples, seed, config)
    for sample in samples:
        try:
            write_ppm(root / sample.path, sample.image)
        except OSError as e:
            raise DataError(f"failed writing {root / sample.path}: {e}") from e
    write_manifest(manifest)
    return manifest


MANIFEST_NAME = "manifest.tsv"


def write_manifest(manifest: DatasetManifest) -> Path:
    path = manifest.root / MANIFEST_NAME
    lines = [f"# seed={manifest.seed}",
             "# config=" + ";".join(f"{k}={v}" for k, v in manifest.config.items())]
    for s in manifest.samples:
        lines.append(f"{s.path}\t{s.identity}\t{SCENES[s.scene]}\t{s.camera}\t{s.split}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise DataError(f"failed writing manifest {path}: {e}") from e
    return path


def load_manifest(root: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    root = path.parent
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    seed, config, samples = 0, {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("seed="):
                seed = int(body[5:])
            elif body.startswith("config="):
                config = dict(kv.split("=", 1) for kv in body[7:].split(";") if kv)
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields")
        rel, ident, scene, cam, split = parts
        if scene not in SCENES or split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown scene or split {scene!r}/{split!r}")
        if check_files and not (root / rel).is_file():
            raise DataError(f"{path}:{lineno}: missing image file {root / rel}")
        samples.append(SceneSample(None, int(ident), SCENES.index(scene), int(cam), split, rel))
    return DatasetManifest(root, samples, seed, config)


# -- PK sampling ---------------------------------------------------------------

class PKSampler:
    """Batches of ``P`` identities with ``K`` distinct samples each."""

    def __init__(self, samples: Sequence[SceneSample], P: int, K: int):
        self.samples = list(samples)
        self.P, self.K = P, K
        by_id: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            by_id.setdefault(s.identity, []).append(i)
        self.by_id = dict(sorted(by_id.items()))
        eligible = [k for k, v in self.by_id.items() if len(v) >= K]
        if len(eligible) < P:
            short = [k for k, v in self.by_id.items() if len(v) < K]
            who = f"identity {short[0]} has {len(self.by_id[short[0]])} < {K} samples" if short \
                else f"only {len(self.by_id)} identities available"
            raise DataError(f"cannot draw P={P} identities with K={K} samples: {who}")
        self.eligible = np.array(eligible)

    def __len__(self) -> int:
        """Batches per epoch."""
        return max(1, len(self.samples) // (self.P * self.K))

    def sample(self, rng: np.random.Generator) -> list[SceneSample]:
        ids = rng.choice(self.eligible, size=self.P, replace=False)
        batch = []
        for ident in ids:
            pool = self.by_id[int(ident)]
            for k in rng.choice(len(pool), size=self.K, replace=False):
                batch.append(self.samples[pool[k]])
        return batch


def pk_sample(samples: Sequence[SceneSample], P: int, K: int,
              rng: np.random.Generator) -> list[SceneSample]:
    return PKSampler(samples, P, K).sample(rng)


def scene_labels(samples: Iterable[SceneSample]) -> np.ndarray:
    return np.array([s.scene for s in samples], dtype=np.intp)


def identity_labels(samples: Iterable[SceneSample]) -> np.ndarray:
    return np.array([s.identity for s in samples], dtype=np.intp)
