"""Procedural paired visible / polarimetric-thermal face corpus.

Every face is drawn from a per-subject style seed plus ten binary
attributes, so the generating labels are an exact oracle for anything
trained on the images. Thermal channels carry the facial geometry but only
a faint trace of hair and mouth glyphs, which is what makes the attribute
vector useful to the generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError

ATTRIBUTE_NAMES = (
    "Arched_Eyebrows",
    "Big_Lips",
    "Big_Nose",
    "Bushy_Eyebrows",
    "Male",
    "Mustache",
    "Narrow_Eyes",
    "No_Beard",
    "Mouth_Slightly_Open",
    "Young",
)
ATTR_INDEX = {name: i for i, name in enumerate(ATTRIBUTE_NAMES)}
SUPPORTED_SIZES = (32, 64, 128, 256)
MODALITIES = ("s0", "polar")

# visibility of hair / mouth glyphs in the thermal channels
S0_GLYPH_GAIN = 0.15
POLAR_GLYPH_GAIN = 0.4


def attribute_index(name: str) -> int:
    """Look up an attribute by exact or case-insensitive name ("mustache" works)."""
    if name in ATTR_INDEX:
        return ATTR_INDEX[name]
    lowered = {k.lower(): v for k, v in ATTR_INDEX.items()}
    key = name.lower()
    aliases = {"mouth_open": "mouth_slightly_open"}
    key = aliases.get(key, key)
    if key not in lowered:
        raise ValueError(f"unknown attribute {name!r}")
    return lowered[key]


@dataclass
class SubjectRecord:
    subject_id: int
    attribute_labels: np.ndarray
    style_seed: int


@dataclass
class PairedSample:
    visible: np.ndarray  # (3, H, W)
    s0: np.ndarray  # (1, H, W)
    polar: np.ndarray  # (3, H, W): S0, S1, S2
    subject_id: int
    attributes: np.ndarray
    image_index: int = 0

    def thermal(self, modality: str) -> np.ndarray:
        """3-channel generator input; S0 is replicated across channels."""
        if modality == "s0":
            return np.repeat(self.s0, 3, axis=0)
        if modality == "polar":
            return self.polar
        raise ValueError(f"unknown modality {modality!r}")


@dataclass
class Corpus:
    subjects: list
    samples: list
    size: int
    seed: int
    jitter: float = 1.0
    per_subject: int = 0

    @property
    def subject_ids(self):
        return [s.subject_id for s in self.subjects]

    def select(self, subject_ids) -> list:
        keep = set(int(s) for s in subject_ids)
        return [s for s in self.samples if s.subject_id in keep]

    def attribute_labels(self, subject_id) -> np.ndarray:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s.attribute_labels
        raise KeyError(subject_id)


@dataclass
class FaceStyle:
    skin: np.ndarray
    bg_a: np.ndarray
    bg_b: np.ndarray
    hair: np.ndarray
    lip: np.ndarray
    bg_waves: np.ndarray
    face_cx: float
    face_cy: float
    face_rx: float
    face_ry: float
    eye_sep: float
    eye_y: float
    eye_rx: float
    brow_gap: float
    nose_y: float
    mouth_y: float
    mouth_w: float
    heat: float

    @classmethod
    def from_seed(cls, style_seed: int) -> "FaceStyle":
        rng = np.random.default_rng(style_seed)
        return cls(
            skin=np.array([0.82, 0.64, 0.52]) + rng.uniform(-0.02, 0.02, 3),
            bg_a=np.array([0.30, 0.34, 0.40]) + rng.uniform(-0.03, 0.03, 3),
            bg_b=np.array([0.42, 0.46, 0.52]) + rng.uniform(-0.03, 0.03, 3),
            hair=np.array([0.10, 0.07, 0.05]) + rng.uniform(-0.02, 0.02, 3),
            lip=np.array([0.72, 0.16, 0.20]) + rng.uniform(-0.03, 0.03, 3),
            bg_waves=rng.uniform([0.5, 0.5, 0.0], [3.0, 3.0, 2 * np.pi], size=(3, 3)),
            face_cx=0.5 + rng.uniform(-0.02, 0.02),
            face_cy=0.52 + rng.uniform(-0.02, 0.02),
            face_rx=rng.uniform(0.30, 0.36),
            face_ry=rng.uniform(0.38, 0.44),
            eye_sep=rng.uniform(0.12, 0.15),
            eye_y=rng.uniform(0.40, 0.44),
            eye_rx=rng.uniform(0.05, 0.065),
            brow_gap=rng.uniform(0.065, 0.08),
            nose_y=rng.uniform(0.55, 0.58),
            mouth_y=rng.uniform(0.75, 0.78),
            mouth_w=rng.uniform(0.10, 0.13),
            heat=rng.uniform(0.6, 0.8),
        )


def _grid(size):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")  # x varies along columns, y along rows


def _coverage(sd, size):
    """Anti-aliased coverage from a signed distance (normalized units)."""
    return np.clip(0.5 - sd * size, 0.0, 1.0)


def _ellipse(x, y, cx, cy, rx, ry):
    r = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    return (r - 1.0) * min(rx, ry)


def _bar(x, y, cx, cy, hw, hh, arch=0.0):
    t = np.clip((x - cx) / hw, -1, 1)
    yc = cy - arch * (1 - t**2)
    return np.maximum(np.abs(x - cx) - hw, np.abs(y - yc) - hh)


def _mustache_geometry(style: FaceStyle, dx=0.0, dy=0.0):
    return dict(cx=style.face_cx + dx, cy=style.mouth_y - 0.078 + dy, hw=style.mouth_w * 1.1, hh=0.014)


def attribute_region(style_seed: int, name: str, size: int):
    """Pixel bounding box (row0, row1, col0, col1), half-open, of a glyph at zero jitter."""
    style = FaceStyle.from_seed(style_seed)
    if name != "Mustache":
        raise ValueError("only the Mustache glyph has a closed-form region")
    g = _mustache_geometry(style)
    pad = 1.0 / size
    y0, y1 = g["cy"] - g["hh"] - pad, g["cy"] + g["hh"] + pad
    x0, x1 = g["cx"] - g["hw"] - pad, g["cx"] + g["hw"] + pad
    return (
        max(int(np.floor(y0 * size - 0.5)), 0),
        min(int(np.ceil(y1 * size - 0.5)) + 1, size),
        max(int(np.floor(x0 * size - 0.5)), 0),
        min(int(np.ceil(x1 * size - 0.5)) + 1, size),
    )


def _paint(img, alpha, color):
    alpha = alpha[None]
    return img * (1 - alpha) + np.asarray(color)[:, None, None] * alpha


def render_face(style_seed: int, attributes, size: int, jitter_seed=None, jitter: float = 1.0):
    """Render (visible, s0, polar) for one face. ``jitter_seed=None`` disables jitter and noise."""
    if size not in SUPPORTED_SIZES:
        raise ValueError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    a = np.asarray(attributes, dtype=np.float64) > 0
    st = FaceStyle.from_seed(style_seed)
    if jitter_seed is not None and jitter > 0:
        jr = np.random.default_rng(jitter_seed)
        dx, dy = jr.uniform(-0.025, 0.025, 2) * jitter
        gain = 1.0 + jr.uniform(-0.04, 0.04) * jitter
        noise_std = 0.01 * jitter
    else:
        jr, dx, dy, gain, noise_std = None, 0.0, 0.0, 1.0, 0.0
    x, y = _grid(size)
    cx, cy = st.face_cx + dx, st.face_cy + dy

    # background texture
    w = st.bg_waves
    t = 0.5 + 0.5 * np.sin(2 * np.pi * (w[0, 0] * x + w[0, 1] * y) + w[0, 2]) * np.cos(
        2 * np.pi * (w[1, 0] * x - w[1, 1] * y) + w[1, 2]
    )
    vis = st.bg_a[:, None, None] * (1 - t) + st.bg_b[:, None, None] * t

    skin = st.skin.copy()
    if a[ATTR_INDEX["Male"]]:
        skin = skin * np.array([0.95, 0.90, 0.87])
    if not a[ATTR_INDEX["Young"]]:
        skin = 0.94 * (0.75 * skin + 0.25 * skin.mean())
    face = _coverage(_ellipse(x, y, cx, cy, st.face_rx, st.face_ry), size)
    vis = _paint(vis, face, skin)
    if not a[ATTR_INDEX["Young"]]:
        for k in range(2):
            line = _coverage(_bar(x, y, cx, st.eye_y - 0.16 - 0.05 * k + dy, st.face_rx * 0.55, 0.008), size)
            vis = _paint(vis, 0.7 * line, skin * 0.55)

    heat = 0.15 + 0.1 * t
    heat = heat * (1 - face) + face * (st.heat + 0.1 * (1 - (y - cy) / st.face_ry) / 2)
    geom = 0.6 * face
    glyph = np.zeros_like(x)  # thermally faint features

    if not a[ATTR_INDEX["No_Beard"]]:
        beard = face * _coverage(st.mouth_y + 0.05 + dy - y, size)
        vis = _paint(vis, 0.85 * beard, st.hair)
        glyph -= 0.5 * beard

    brow_hh = 0.022 if a[ATTR_INDEX["Bushy_Eyebrows"]] else 0.01
    brow_arch = 0.045 if a[ATTR_INDEX["Arched_Eyebrows"]] else 0.0
    eye_ry = 0.014 if a[ATTR_INDEX["Narrow_Eyes"]] else 0.032
    for side in (-1, 1):
        ex = cx + side * st.eye_sep
        ey = st.eye_y + dy
        brow = _coverage(_bar(x, y, ex, ey - st.brow_gap, st.eye_rx * 1.25, brow_hh, brow_arch), size)
        vis = _paint(vis, brow, st.hair)
        glyph -= 0.5 * brow
        eye = _coverage(_ellipse(x, y, ex, ey, st.eye_rx, eye_ry), size)
        vis = _paint(vis, eye, [0.95, 0.95, 0.95])
        pupil = _coverage(_ellipse(x, y, ex, ey, eye_ry * 0.9, eye_ry * 0.9), size)
        vis = _paint(vis, pupil, [0.1, 0.08, 0.05])
        heat = heat * (1 - eye) + 0.95 * eye
        geom = geom + 0.4 * eye

    nose_rx, nose_ry = (0.065, 0.1) if a[ATTR_INDEX["Big_Nose"]] else (0.03, 0.055)
    nose = _coverage(_ellipse(x, y, cx, st.nose_y + dy, nose_rx, nose_ry), size)
    vis = _paint(vis, 0.8 * nose, skin * 0.6)
    heat = heat - 0.15 * nose
    geom = geom + 0.3 * nose

    my = st.mouth_y + dy
    lip_hh = 0.03 if a[ATTR_INDEX["Big_Lips"]] else 0.011
    gap = 0.018 if a[ATTR_INDEX["Mouth_Slightly_Open"]] else 0.0
    lips = np.maximum(
        _coverage(_ellipse(x, y, cx, my - gap, st.mouth_w, lip_hh), size),
        _coverage(_ellipse(x, y, cx, my + gap, st.mouth_w, lip_hh), size),
    )
    vis = _paint(vis, lips, st.lip)
    heat = heat + 0.1 * lips
    geom = geom + 0.3 * lips
    if gap:
        inner = _coverage(_ellipse(x, y, cx, my, st.mouth_w * 0.8, gap), size)
        vis = _paint(vis, inner, [0.12, 0.02, 0.02])
        glyph += 0.6 * inner

    if a[ATTR_INDEX["Mustache"]]:
        g = _mustache_geometry(st, dx, dy)
        must = _coverage(_bar(x, y, g["cx"], g["cy"], g["hw"], g["hh"]), size)
        vis = _paint(vis, must, st.hair)
        glyph -= 0.6 * must

    vis = np.clip(vis * gain, 0, 1)
    heat = heat + S0_GLYPH_GAIN * 0.5 * glyph
    sigma = size / 48.0
    s0 = gaussian_filter(heat, sigma)
    s0 = 0.5 + 0.45 * np.tanh(2.0 * (s0 - 0.5))  # contrast compression
    tex = gaussian_filter(geom + POLAR_GLYPH_GAIN * glyph, sigma * 0.5)
    gy, gx = np.gradient(tex)
    s1 = np.tanh(gx * size * 0.25)
    s2 = np.tanh((gx + gy) * size * 0.18)
    if noise_std > 0:
        vis = vis + jr.normal(0, noise_std, vis.shape)
        s0 = s0 + jr.normal(0, noise_std, s0.shape)
        s1 = s1 + jr.normal(0, 2 * noise_std, s1.shape)
        s2 = s2 + jr.normal(0, 2 * noise_std, s2.shape)
    visible = np.clip(vis * 2 - 1, -1, 1).astype(np.float32)
    s0 = np.clip(s0 * 2 - 1, -1, 1).astype(np.float32)[None]
    polar = np.concatenate(
        [s0, np.clip(s1, -1, 1).astype(np.float32)[None], np.clip(s2, -1, 1).astype(np.float32)[None]]
    )
    return visible, s0, polar


def _balanced_labels(rng, num_subjects):
    labels = np.empty((num_subjects, len(ATTRIBUTE_NAMES)))
    base = np.where(np.arange(num_subjects) < (num_subjects + 1) // 2, 1.0, -1.0)
    for j in range(len(ATTRIBUTE_NAMES)):
        labels[:, j] = rng.permutation(base)
    return labels


def make_corpus(num_subjects: int, per_subject: int, size: int, seed: int, jitter: float = 1.0) -> Corpus:
    """Build a corpus; every attribute is +1 for half of the subjects (rounded up)."""
    if num_subjects < 2:
        raise ValueError("need at least 2 subjects")
    if per_subject < 1:
        raise ValueError("per_subject must be positive")
    if size not in SUPPORTED_SIZES:
        raise ValueError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    rng = np.random.default_rng([seed, 0])
    labels = _balanced_labels(rng, num_subjects)
    style_seeds = rng.integers(0, 2**31 - 1, size=num_subjects)
    subjects = [SubjectRecord(i, labels[i], int(style_seeds[i])) for i in range(num_subjects)]
    samples = []
    for sub in subjects:
        for k in range(per_subject):
            jseed = np.random.SeedSequence([seed, 1, sub.subject_id, k]) if jitter > 0 else None
            visible, s0, polar = render_face(sub.style_seed, sub.attribute_labels, size, jseed, jitter)
            samples.append(PairedSample(visible, s0, polar, sub.subject_id, sub.attribute_labels.copy(), k))
    return Corpus(subjects, samples, size, seed, jitter, per_subject)


def split_protocol(subject_ids, num_repeats: int = 5, seed: int = 0):
    """Subject-disjoint 50/50 train/test splits, one per repeat."""
    ids = sorted(int(s) for s in subject_ids)
    if len(ids) < 2 or len(ids) % 2:
        raise ValueError(f"need an even number (>= 2) of subjects, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if num_repeats < 1:
        raise ValueError("num_repeats must be >= 1")
    half = len(ids) // 2
    splits = []
    for r in range(num_repeats):
        perm = np.random.default_rng([seed, r]).permutation(ids)
        splits.append((sorted(perm[:half].tolist()), sorted(perm[half:].tolist())))
    return splits


# ---------------------------------------------------------------- image IO


def to_uint16(img: np.ndarray) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W[, C]) uint16 RGB."""
    q = np.round((np.clip(img, -1, 1) + 1) / 2 * 65535).astype(np.uint16)
    return q[0] if q.shape[0] == 1 else np.transpose(q, (1, 2, 0))


def encode_png16(img: np.ndarray) -> bytes:
    arr = to_uint16(img)
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", arr)
    if not ok:
        raise FormatError("PNG encoding failed")
    return buf.tobytes()


def write_png16(path, img: np.ndarray):
    Path(path).write_bytes(encode_png16(img))


def preprocess(raw: bytes, size: int | None = None) -> np.ndarray:
    """Decode an 8/16-bit PNG, center-crop to square, resize, map to [-1, 1]."""
    arr = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8), cv2.IMREAD_UNCHANGED) if raw else None
    if arr is None:
        raise FormatError("could not decode image bytes as PNG")
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"unsupported sample type {arr.dtype}")
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    h, w = arr.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[top : top + side, left : left + side]
    img = arr.astype(np.float64) / scale
    if size is not None and size != side:
        img = cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)
    img = img * 2 - 1
    if img.ndim == 2:
        img = img[None]
    else:
        img = np.transpose(img, (2, 0, 1))
    return np.ascontiguousarray(img, dtype=np.float32)


def load_image(path, size=None) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(str(path)) from e
    return preprocess(raw, size)


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write ``<out>/<subject_id>/<idx>_{vis|s0|s1|s2}.png`` plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in corpus.samples:
        d = out / str(s.subject_id)
        d.mkdir(exist_ok=True)
        write_png16(d / f"{s.image_index}_vis.png", s.visible)
        write_png16(d / f"{s.image_index}_s0.png", s.s0)
        write_png16(d / f"{s.image_index}_s1.png", s.polar[1:2])
        write_png16(d / f"{s.image_index}_s2.png", s.polar[2:3])
    manifest = {
        "size": corpus.size,
        "seed": corpus.seed,
        "jitter": corpus.jitter,
        "per_subject": corpus.per_subject,
        "attribute_names": list(ATTRIBUTE_NAMES),
        "subjects": [
            {
                "subject_id": s.subject_id,
                "attribute_labels": [int(v) for v in s.attribute_labels],
                "style_seed": s.style_seed,
                "images": sorted(x.image_index for x in corpus.samples if x.subject_id == s.subject_id),
            }
            for s in corpus.subjects
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(mf.read_text())
    size = int(manifest["size"])
    subjects, samples = [], []
    for entry in manifest["subjects"]:
        sid = int(entry["subject_id"])
        labels = np.asarray(entry["attribute_labels"], dtype=np.float64)
        subjects.append(SubjectRecord(sid, labels, int(entry["style_seed"])))
        for k in entry["images"]:
            base = root / str(sid)
            vis = load_image(base / f"{k}_vis.png", size)
            s0 = load_image(base / f"{k}_s0.png", size)
            s1 = load_image(base / f"{k}_s1.png", size)
            s2 = load_image(base / f"{k}_s2.png", size)
            samples.append(PairedSample(vis, s0, np.concatenate([s0, s1, s2]), sid, labels.copy(), int(k)))
    return Corpus(subjects, samples, size, int(manifest["seed"]), float(manifest["jitter"]), int(manifest["per_subject"]))


def stack(samples, field_name: str = "visible", modality: str | None = None) -> np.ndarray:
    if field_name == "thermal":
        return np.stack([s.thermal(modality) for s in samples])
    return np.stack([getattr(s, field_name) for s in samples])
