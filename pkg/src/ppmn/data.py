"""Two-view person datasets: a synthetic generator, directory I/O and train/test splits.

Directory layout is ``<root>/<identity>/<view>_<index>.png`` with views ``A``
(probe camera) and ``B`` (gallery camera).
"""

from __future__ import annotations

import colorsys
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .ctm import IMAGE_HEIGHT, IMAGE_WIDTH

VIEWS = ("A", "B")
TEXTURES = ("plain", "hstripes", "vstripes", "checker")
BAG_SIDES = ("none", "left", "right")
_NAME = re.compile(r"^([AB])_(\d+)\.(png|ppm)$", re.IGNORECASE)


@dataclass
class Record:
    identity: int
    view: str
    index: int
    image: np.ndarray | None = None
    path: Path | None = None

    def load(self) -> np.ndarray:
        if self.image is None:
            self.image = load_image(self.path)
        return self.image


@dataclass
class ReidDataset:
    records: list[Record] = field(default_factory=list)

    @property
    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records})

    def images(self, identity: int, view: str) -> list[Record]:
        return sorted((r for r in self.records if r.identity == identity and r.view == view),
                      key=lambda r: r.index)

    def subset(self, identities) -> "ReidDataset":
        keep = set(identities)
        return ReidDataset([r for r in self.records if r.identity in keep])

    def split(self, n_train: int, seed: int) -> tuple["ReidDataset", "ReidDataset"]:
        """Disjoint train/test identity sets drawn from ``seed``."""
        ids = self.identities
        if not 1 <= n_train < len(ids):
            raise ValueError(f"cannot take {n_train} training identities out of {len(ids)}")
        order = np.random.default_rng(seed).permutation(len(ids))
        train = sorted(ids[i] for i in order[:n_train])
        test = sorted(ids[i] for i in order[n_train:])
        return self.subset(train), self.subset(test)

    def probe_gallery(self) -> tuple[list[int], np.ndarray, np.ndarray]:
        """Single-shot sets: the lowest-index view-A and view-B image per identity."""
        ids, probes, gallery = [], [], []
        for ident in self.identities:
            a, b = self.images(ident, "A"), self.images(ident, "B")
            if not a or not b:
                raise ValueError(f"identity {ident} lacks an image in view {'A' if not a else 'B'}")
            ids.append(ident)
            probes.append(a[0].load())
            gallery.append(b[0].load())
        return ids, np.stack(probes), np.stack(gallery)

    def save(self, root) -> list[Path]:
        root = Path(root)
        written = []
        for r in self.records:
            d = root / f"{r.identity:04d}"
            d.mkdir(parents=True, exist_ok=True)
            path = d / f"{r.view}_{r.index}.png"
            save_image(path, r.load())
            written.append(path)
        return written


def load_image(path) -> np.ndarray:
    """Read PNG/PPM as float RGB in [0, 1], bilinearly resized to 160x80."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (IMAGE_WIDTH, IMAGE_HEIGHT):
            im = im.resize((IMAGE_WIDTH, IMAGE_HEIGHT), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def save_image(path, img: np.ndarray) -> None:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_directory(root) -> ReidDataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    records = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if not d.name.isdigit():
            continue
        for f in sorted(d.iterdir()):
            m = _NAME.match(f.name)
            if m:
                records.append(Record(int(d.name), m.group(1).upper(), int(m.group(2)), path=f))
    if not records:
        raise ValueError(f"no <identity>/<view>_<index>.png images under {root}")
    return ReidDataset(records)


# ---------------------------------------------------------------------------
# synthetic two-view people


@dataclass
class SyntheticSpec:
    n_identities: int = 32
    seed: int = 0
    palette_size: int = 8
    max_shift: tuple[int, int] = (6, 3)
    hue_jitter: float = 0.02
    brightness_jitter: float = 0.1
    blob_scale_jitter: float = 0.25
    blob_shift: int = 6
    noise: float = 0.02


@dataclass(frozen=True)
class Identity:
    upper: int
    lower: int
    texture: str
    bag_side: str
    bag_color: int
    bag_row: int


def _palette(n: int, rng: np.random.Generator) -> np.ndarray:
    hues = (np.arange(n) / n + rng.uniform(0, 1.0 / n)) % 1.0
    cols = []
    for i, h in enumerate(hues):
        s = 0.55 + 0.4 * ((i * 7) % 5) / 4
        v = 0.45 + 0.5 * ((i * 3) % 4) / 3
        cols.append(colorsys.hsv_to_rgb(h, s, v))
    return np.array(cols)


def _identities(spec: SyntheticSpec, rng: np.random.Generator) -> list[Identity]:
    """Identities come in partner pairs: even pairs share colours (geometry differs),
    odd pairs share geometry (colours differ)."""
    def random_identity() -> Identity:
        return Identity(
            int(rng.integers(spec.palette_size)), int(rng.integers(spec.palette_size)),
            TEXTURES[rng.integers(len(TEXTURES))], BAG_SIDES[rng.integers(len(BAG_SIDES))],
            int(rng.integers(spec.palette_size)), int(rng.integers(55, 85)),
        )

    out: list[Identity] = []
    seen: set[Identity] = set()
    k = 0
    while len(out) < spec.n_identities:
        base = random_identity()
        if base in seen:
            continue
        if k % 2 == 0:
            partner = Identity(base.upper, base.lower,
                               TEXTURES[(TEXTURES.index(base.texture) + 1 + rng.integers(3)) % 4],
                               BAG_SIDES[(BAG_SIDES.index(base.bag_side) + 1 + rng.integers(2)) % 3],
                               base.bag_color, base.bag_row)
        else:
            shift = 1 + int(rng.integers(spec.palette_size - 1))
            partner = Identity((base.upper + shift) % spec.palette_size,
                               (base.lower + shift) % spec.palette_size,
                               base.texture, base.bag_side,
                               (base.bag_color + shift) % spec.palette_size, base.bag_row)
        for ident in (base, partner):
            if ident not in seen and len(out) < spec.n_identities:
                seen.add(ident)
                out.append(ident)
        k += 1
    return out


def _shade(rgb: np.ndarray, hue_shift: float, gain: float) -> np.ndarray:
    h, s, v = colorsys.rgb_to_hsv(*rgb)
    return np.clip(np.array(colorsys.hsv_to_rgb((h + hue_shift) % 1.0, s, v)) * gain, 0.0, 1.0)


def render(ident: Identity, palette: np.ndarray, bg: np.ndarray, *, shift=(0, 0), hue_shift=0.0,
           gain=1.0, bag_scale=1.0, bag_dx=0, noise=0.0, rng=None) -> np.ndarray:
    h, w = IMAGE_HEIGHT, IMAGE_WIDTH
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.empty((h, w, 3))
    ramp = (yy / (h - 1))[..., None]
    img[:] = bg[0] * (1 - ramp) + bg[1] * ramp

    upper = _shade(palette[ident.upper], hue_shift, gain)
    lower = _shade(palette[ident.lower], hue_shift, gain)
    bag = _shade(palette[ident.bag_color], hue_shift, gain)
    skin = np.clip(np.array([0.85, 0.68, 0.55]) * gain, 0, 1)
    hair = np.array([0.12, 0.08, 0.05])

    head = ((yy - 22) / 12.0) ** 2 + ((xx - 40) / 9.0) ** 2 <= 1.0
    img[head] = skin
    img[head & (yy < 18)] = hair

    torso = (yy >= 36) & (yy < 92) & (xx >= 20) & (xx < 60)
    ty, tx = yy - 36, xx - 20
    if ident.texture == "hstripes":
        dark = (ty // 7) % 2 == 1
    elif ident.texture == "vstripes":
        dark = (tx // 6) % 2 == 1
    elif ident.texture == "checker":
        dark = ((ty // 9) + (tx // 9)) % 2 == 1
    else:
        dark = np.zeros_like(torso)
    img[torso] = upper
    img[torso & dark] = upper * 0.45

    legs = (yy >= 92) & (yy < 152) & (((xx >= 23) & (xx < 38)) | ((xx >= 42) & (xx < 57)))
    img[legs] = lower

    if ident.bag_side != "none":
        cx = (13 if ident.bag_side == "left" else 67) + bag_dx
        ry, rx = 13.0 * bag_scale, 9.0 * bag_scale
        blob = ((yy - ident.bag_row) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[blob] = bag

    if shift != (0, 0):
        img = translate(img, *shift)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = img[y - dy, x - dx] with replicated borders."""
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[rows][:, cols]


def generate_synthetic(spec: SyntheticSpec) -> ReidDataset:
    if spec.n_identities < 2:
        raise ValueError("synthetic dataset needs at least 2 identities")
    if spec.palette_size < 2:
        raise ValueError("degenerate synthetic spec: palette_size < 2 gives zero colour variance")
    rng = np.random.default_rng(spec.seed)
    palette = _palette(spec.palette_size, rng)
    idents = _identities(spec, rng)
    records = []
    for k, ident in enumerate(idents):
        bg = rng.uniform(0.25, 0.75, size=(2, 3)) * np.array([1.0, 0.95, 0.9])
        img_a = render(ident, palette, bg)
        sy, sx = spec.max_shift
        dy = int(rng.integers(-sy, sy + 1))
        dx = int(rng.integers(-sx, sx + 1))
        hue = float(rng.uniform(-spec.hue_jitter, spec.hue_jitter))
        gain = 1.0 + float(rng.uniform(-spec.brightness_jitter, spec.brightness_jitter))
        scale = 1.0 + float(rng.uniform(-spec.blob_scale_jitter, spec.blob_scale_jitter))
        bag_dx = int(rng.integers(-spec.blob_shift, spec.blob_shift + 1))
        bg_b = np.clip(bg * gain, 0.0, 1.0)
        img_b = render(ident, palette, bg_b, shift=(dy, dx), hue_shift=hue, gain=gain,
                       bag_scale=scale, bag_dx=bag_dx, noise=spec.noise, rng=rng)
        records.append(Record(k, "A", 0, image=img_a))
        records.append(Record(k, "B", 0, image=img_b))
    return ReidDataset(records)
