"""Synthetic chest-radiograph generator with patch-level ground truth.

Each image is a lung-field background with planted shape primitives, one
shape family per pathology. Notes describe only clinical history; reports
describe only the planted findings.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .text import SEP_TEXT, words

GENERATOR_VERSION = "1"

PATHOLOGIES = ("fibrosis", "calcified_granuloma", "bronchiectasis",
               "pleural_thickening", "cavity", "cp_angle_blunting")
CODE = {name: i for i, name in enumerate(PATHOLOGIES)}
REPORT_NAMES = {
    "fibrosis": "fibrosis",
    "calcified_granuloma": "calcified granuloma",
    "bronchiectasis": "bronchiectasis",
    "pleural_thickening": "pleural thickening",
    "cavity": "cavity",
    "cp_angle_blunting": "costophrenic angle blunting",
}
# every word form that would reveal a label; notes must contain none of them
LABEL_LEXICON = frozenset({
    "fibrosis", "fibrotic", "calcified", "calcification", "granuloma", "granulomas",
    "bronchiectasis", "pleural", "thickening", "cavity", "cavities", "cavitary",
    "costophrenic", "angle", "blunting", "cp",
})

SIZES = ("small", "medium", "large")
DISTRIBUTIONS = ("focal", "multifocal", "diffuse")
PROGRESSIONS = ("stable", "progressing", "improving", "new")
COMORBIDITIES = ("diabetes", "hiv", "copd", "hypertension", "smoking", "malnutrition")
TREATMENTS = (
    "completed six months of first-line therapy",
    "defaulted from therapy after two months",
    "completed a retreatment regimen",
    "currently receiving therapy",
)
PRIOR_TB_PHRASES = ("yes", "confirmed", "reported by patient")

MASK_COVERAGE = 0.30

# characteristic length per size tier, in units of image_size / 64
_TIERS = {
    "calcified_granuloma": (5.5, 7.0, 9.0),   # radius
    "cavity": (6.0, 8.0, 10.0),               # outer radius
    "bronchiectasis": (16.0, 24.0, 32.0),     # tube length
    "fibrosis": (20.0, 28.0, 36.0),           # band length
    "pleural_thickening": (6.0, 8.0, 10.0),   # strip thickness
    "cp_angle_blunting": (14.0, 18.0, 22.0),  # wedge leg
}
_TUBE_HALF_WIDTH = 3.5
_BAND_HALF_WIDTH = 5.0


class PlacementError(ValueError):
    pass


@dataclass
class ClinicalHistory:
    prior_tb: bool = False
    comorbidities: list = field(default_factory=list)
    treatment: str = ""

    @property
    def empty(self) -> bool:
        return not self.prior_tb and not self.comorbidities and not self.treatment


@dataclass
class AnnotationRecord:
    image_id: str
    present: dict            # label -> bool, every label
    masks: dict              # label -> sorted patch indices, every label
    size: dict               # label -> small/medium/large, present labels only
    distribution: dict       # label -> focal/multifocal/diffuse, present labels only
    progression: dict        # label -> progression note, present labels only
    history: ClinicalHistory = field(default_factory=ClinicalHistory)
    grid: int = 4

    def present_labels(self) -> list[str]:
        return [p for p in PATHOLOGIES if self.present[p]]

    def mask_array(self) -> np.ndarray:
        """(n_pathologies, n_patches) 0/1 ground truth."""
        out = np.zeros((len(PATHOLOGIES), self.grid * self.grid))
        for i, p in enumerate(PATHOLOGIES):
            out[i, self.masks[p]] = 1.0
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["masks"] = {k: [int(i) for i in v] for k, v in self.masks.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AnnotationRecord":
        return cls(
            image_id=d["image_id"], present=dict(d["present"]),
            masks={k: list(v) for k, v in d["masks"].items()},
            size=dict(d["size"]), distribution=dict(d["distribution"]),
            progression=dict(d["progression"]), history=ClinicalHistory(**d["history"]),
            grid=d["grid"],
        )


# -- rendering -------------------------------------------------------------


def _background(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.55 + 0.15 * yy
    for cx in (0.3, 0.7):
        inside = ((yy - 0.5) / 0.4) ** 2 + ((xx - cx) / 0.18) ** 2 <= 1.0
        img = np.where(inside, 0.22 + 0.12 * yy, img)
    return img


def _segment_distance(size: int, y0, x0, y1, x1) -> tuple[np.ndarray, np.ndarray]:
    """Distance of every pixel centre to a segment, and signed offset across it."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(length2, 1e-12), 0.0, 1.0)
    py, px = y0 + t * dy, x0 + t * dx
    dist = np.hypot(yy - py, xx - px)
    across = ((yy - y0) * dx - (xx - x0) * dy) / math.sqrt(max(length2, 1e-12))
    return dist, across


def _check_bounds(label: str, p: dict, size: int) -> None:
    def inside(lo, hi):
        return lo >= 0 and hi <= size

    if label in ("calcified_granuloma", "cavity"):
        ok = inside(p["cy"] - p["r"], p["cy"] + p["r"]) and inside(p["cx"] - p["r"], p["cx"] + p["r"])
    elif label in ("bronchiectasis", "fibrosis"):
        w = p["w"]
        ok = all(inside(v - w, v + w) for v in (p["y0"], p["x0"], p["y1"], p["x1"]))
    elif label == "pleural_thickening":
        ok = inside(p["y0"], p["y1"]) and p["y0"] < p["y1"] and 0 < p["t"] <= size and p["side"] in ("left", "right")
    elif label == "cp_angle_blunting":
        ok = 0 < p["h"] <= size and 0 < p["w"] <= size and p["side"] in ("left", "right")
    else:
        raise PlacementError(f"unknown pathology label {label!r}")
    if not ok:
        raise PlacementError(f"{label} placement {p} falls outside a {size}x{size} image")


def _render(label: str, p: dict, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Footprint (bool) and intensity map (valid on the footprint) of one primitive."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u = size / 64.0
    if label in ("calcified_granuloma", "cavity"):
        d = np.hypot(yy - p["cy"], xx - p["cx"])
        foot = d <= p["r"]
        if label == "calcified_granuloma":
            val = np.full((size, size), 0.92)
        else:
            val = np.where(d <= 0.5 * p["r"], 0.05, 0.88)
    elif label == "bronchiectasis":
        d, _ = _segment_distance(size, p["y0"], p["x0"], p["y1"], p["x1"])
        foot = d <= p["w"]
        val = np.where(d >= 0.45 * p["w"], 0.9, 0.45)
    elif label == "fibrosis":
        d, across = _segment_distance(size, p["y0"], p["x0"], p["y1"], p["x1"])
        foot = d <= p["w"]
        val = np.where(np.sin(2 * math.pi * across / (3.0 * u)) > 0, 0.82, 0.42)
    elif label == "pleural_thickening":
        col = xx if p["side"] == "left" else size - xx
        foot = (col <= p["t"]) & (yy >= p["y0"]) & (yy <= p["y1"])
        val = np.full((size, size), 0.85)
    else:  # cp_angle_blunting
        col = xx if p["side"] == "left" else size - xx
        foot = col / p["w"] + (size - yy) / p["h"] <= 1.0
        val = np.full((size, size), 0.78)
    return foot, val


def coverage_mask(footprint: np.ndarray, patch_size: int) -> list[int]:
    """Patch indices (row-major) with at least 30% of their pixels covered."""
    size = footprint.shape[0]
    g = size // patch_size
    frac = footprint.reshape(g, patch_size, g, patch_size).mean(axis=(1, 3))
    return [int(i) for i in np.flatnonzero(frac.reshape(-1) >= MASK_COVERAGE - 1e-12)]


def _tier(label: str, p: dict, size: int) -> int:
    u = size / 64.0
    if label in ("calcified_granuloma", "cavity"):
        v = p["r"]
    elif label in ("bronchiectasis", "fibrosis"):
        v = math.hypot(p["y1"] - p["y0"], p["x1"] - p["x0"])
    elif label == "pleural_thickening":
        v = p["t"]
    else:
        v = p["h"]
    return int(np.argmin([abs(v - t * u) for t in _TIERS[label]]))


def generate_image(spec: Sequence[tuple[str, dict]], size: int = 64, noise: float = 0.03,
                   seed: int = 0, patch_size: int = 16, image_id: str = "img",
                   history: Optional[ClinicalHistory] = None,
                   progression: Optional[dict] = None):
    """Render planted primitives; return (ImageGrid, AnnotationRecord).

    Placements are in pixel units. Primitives are painted in the given order
    and same-label masks merge.
    """
    from .vision import ImageGrid

    if size % patch_size:
        raise PlacementError(f"image size {size} is not divisible by patch size {patch_size}")
    img = _background(size)
    feet = {p: np.zeros((size, size), dtype=bool) for p in PATHOLOGIES}
    counts = {p: 0 for p in PATHOLOGIES}
    tiers = {p: 0 for p in PATHOLOGIES}
    for label, params in spec:
        if label not in CODE:
            raise PlacementError(f"unknown pathology label {label!r}")
        _check_bounds(label, params, size)
        foot, val = _render(label, params, size)
        img = np.where(foot, val, img)
        feet[label] |= foot
        counts[label] += 1
        tiers[label] = max(tiers[label], _tier(label, params, size))
    rng = np.random.default_rng(seed)
    img = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)

    masks = {p: coverage_mask(feet[p], patch_size) for p in PATHOLOGIES}
    present = {p: counts[p] > 0 for p in PATHOLOGIES}
    for p in PATHOLOGIES:
        if present[p] and not masks[p]:
            raise PlacementError(f"{p} covers no patch by {MASK_COVERAGE:.0%}; enlarge or move it")
    size_d, dist_d = {}, {}
    for p in PATHOLOGIES:
        if not present[p]:
            continue
        size_d[p] = SIZES[tiers[p]]
        if counts[p] > 1:
            dist_d[p] = "multifocal"
        elif p in ("fibrosis", "pleural_thickening") and tiers[p] == 2:
            dist_d[p] = "diffuse"
        else:
            dist_d[p] = "focal"
    progression = progression or {}
    prog = {p: progression.get(p, "stable") for p in PATHOLOGIES if present[p]}
    ann = AnnotationRecord(image_id, present, masks, size_d, dist_d, prog,
                           history or ClinicalHistory(), grid=size // patch_size)
    return ImageGrid(img), ann


def sample_placement(label: str, tier: int, size: int, rng: np.random.Generator) -> dict:
    u = size / 64.0
    t = _TIERS[label][tier] * u
    if label in ("calcified_granuloma", "cavity"):
        return {"cy": float(rng.uniform(t, size - t)), "cx": float(rng.uniform(t, size - t)), "r": t}
    if label in ("bronchiectasis", "fibrosis"):
        w = (_TUBE_HALF_WIDTH if label == "bronchiectasis" else _BAND_HALF_WIDTH) * u
        ang = rng.uniform(0, math.pi)
        dy, dx = 0.5 * t * math.sin(ang), 0.5 * t * math.cos(ang)
        lo_y, lo_x = w + abs(dy), w + abs(dx)
        cy, cx = rng.uniform(lo_y, size - lo_y), rng.uniform(lo_x, size - lo_x)
        return {"y0": float(cy - dy), "x0": float(cx - dx), "y1": float(cy + dy),
                "x1": float(cx + dx), "w": w}
    if label == "pleural_thickening":
        length = rng.uniform(24 * u, 44 * u)
        y0 = rng.uniform(0, size - length)
        return {"side": str(rng.choice(["left", "right"])), "y0": float(y0),
                "y1": float(y0 + length), "t": t}
    return {"side": str(rng.choice(["left", "right"])), "h": t, "w": t}


# -- text ------------------------------------------------------------------


def generate_note(ann: AnnotationRecord, seed: int = 0) -> str:
    """Clinical-history note; never mentions any image finding."""
    h = ann.history
    if h.empty:
        return "no prior TB history."
    rng = np.random.default_rng(seed)
    prior = PRIOR_TB_PHRASES[int(rng.integers(len(PRIOR_TB_PHRASES)))] if h.prior_tb else "none"
    comorb = ", ".join(h.comorbidities) if h.comorbidities else "none"
    treat = h.treatment or "none"
    clauses = [f"prior TB: {prior}", f"comorbidities: {comorb}", f"treatment: {treat}"]
    return f" {SEP_TEXT} ".join(clauses)


def generate_report(ann: AnnotationRecord) -> str:
    labels = ann.present_labels()
    if not labels:
        return "no chronic TB findings."
    sentences = [f"{ann.size[p]} {ann.distribution[p]} {REPORT_NAMES[p]}." for p in labels]
    sentences.append("impression: findings consistent with chronic TB.")
    return " ".join(sentences)


def zone(ann: AnnotationRecord, label: str) -> str:
    idx = np.asarray(ann.masks[label])
    if idx.size == 0:
        return "not present"
    rows, cols = idx // ann.grid, idx % ann.grid
    r, c = rows.mean() / ann.grid, cols.mean() / ann.grid
    vertical = "upper" if r < 1 / 3 else ("middle" if r < 2 / 3 else "lower")
    side = "left" if c < 0.5 else "right"
    return f"{vertical} {side} zone"


def question_answer(ann: AnnotationRecord, label: str, kind: str) -> tuple[str, str]:
    name = REPORT_NAMES[label]
    if kind == "presence":
        return f"is {name} present?", ("yes" if ann.present[label] else "no")
    if kind == "location":
        return f"where is {name}?", zone(ann, label)
    raise ValueError(f"unknown question kind {kind!r}")


def template_corpus() -> list[str]:
    """Every word any note, report, question or answer can contain."""
    docs = [
        "no prior TB history.", "no chronic TB findings.",
        "impression: findings consistent with chronic TB.",
        f"prior TB: none {SEP_TEXT} comorbidities: none {SEP_TEXT} treatment: none",
        " ".join(PRIOR_TB_PHRASES), ", ".join(COMORBIDITIES), " ".join(TREATMENTS),
        " ".join(SIZES), " ".join(DISTRIBUTIONS), " ".join(PROGRESSIONS),
        "is present? where is? yes no not present zone upper middle lower left right",
    ]
    docs += [f"{n}." for n in REPORT_NAMES.values()]
    return docs


def template_lexicon() -> set[str]:
    return {w for doc in template_corpus() for w in words(doc)}


# -- dataset ---------------------------------------------------------------


@dataclass
class DatasetEntry:
    image_path: str
    annotation: AnnotationRecord
    note: str
    report: str
    split: str


@dataclass
class DatasetManifest:
    entries: list
    seed: int
    generator_version: str = GENERATOR_VERSION
    image_size: int = 64
    patch_size: int = 16

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def _record_plan(n: int, prevalence: float, seed: int) -> np.ndarray:
    """(n, 6) presence plan with an exact count per pathology."""
    rng = np.random.default_rng([seed, 0x5EED])
    k = max(int(math.floor(prevalence * n + 0.5)), int(math.ceil(0.1 * n)))
    plan = np.zeros((n, len(PATHOLOGIES)), dtype=bool)
    for j in range(len(PATHOLOGIES)):
        plan[rng.permutation(n)[:k], j] = True
    return plan


def _make_record(args) -> tuple:
    index, labels, seed, size, patch_size, noise = args
    rng = np.random.default_rng([seed, index])
    history = ClinicalHistory(
        prior_tb=bool(rng.random() < 0.6),
        comorbidities=sorted(str(c) for c in rng.choice(COMORBIDITIES, size=int(rng.integers(0, 3)),
                                                         replace=False)),
        treatment="",
    )
    if history.prior_tb and rng.random() < 0.85:
        history.treatment = TREATMENTS[int(rng.integers(len(TREATMENTS)))]
    spec, progression = [], {}
    occupied = np.zeros((size, size), dtype=bool)
    for label in labels:
        n_prim = 2 if label in ("calcified_granuloma", "cavity", "bronchiectasis") and rng.random() < 0.3 else 1
        tier = int(rng.integers(3))
        progression[label] = PROGRESSIONS[int(rng.integers(len(PROGRESSIONS)))]
        for _ in range(n_prim):
            for attempt in range(200):
                p = sample_placement(label, tier, size, rng)
                foot, _ = _render(label, p, size)
                if not coverage_mask(foot, patch_size):
                    continue
                if attempt < 150 and (foot & occupied).any():
                    continue
                break
            occupied |= foot
            spec.append((label, p))
    image_id = f"{index:06d}"
    img, ann = generate_image(spec, size, noise, seed=int(rng.integers(2 ** 31)), patch_size=patch_size,
                              image_id=image_id, history=history, progression=progression)
    note = generate_note(ann, seed=int(rng.integers(2 ** 31)))
    return img.pixels, ann, note, generate_report(ann)


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    data = np.round(255.0 * np.clip(pixels, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields_, pos = [], 0
    while len(fields_) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields_.append(raw[pos:end])
        pos = end
    pos += 1
    if fields_[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(fields_[1]), int(fields_[2]), int(fields_[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(np.float64) / 255.0


def build_dataset(n: int, out_dir: str | Path, split: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
                  size: int = 64, patch_size: int = 16, noise: float = 0.03,
                  prevalence: float = 0.25, jobs: int = 1) -> DatasetManifest:
    """Generate ``n`` records and write images, records.jsonl and manifest.json."""
    if n < 1:
        raise ValueError("build_dataset: n must be >= 1")
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"build_dataset: split ratios must be three values summing to 1, got {split}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    plan = _record_plan(n, prevalence, seed)
    tasks = [(i, [PATHOLOGIES[j] for j in np.flatnonzero(plan[i])], seed, size, patch_size, noise)
             for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_make_record, tasks, chunksize=32))
    else:
        results = [_make_record(t) for t in tasks]

    n_train, n_val, _ = split_sizes(n, split)
    order = np.random.default_rng([seed, 0x5411]).permutation(n)
    split_of = {}
    for rank, i in enumerate(order):
        split_of[int(i)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    entries = []
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for i, (pixels, ann, note, report) in enumerate(results):
            rel = f"images/{ann.image_id}.pgm"
            write_pgm(out / rel, pixels)
            rec = {**ann.to_json(), "note": note, "report": report, "image": rel, "split": split_of[i]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            entries.append(DatasetEntry(rel, ann, note, report, split_of[i]))

    manifest = DatasetManifest(entries, seed, image_size=size, patch_size=patch_size)
    _write_manifest(out, manifest, n, split, noise, prevalence)
    return manifest


def _write_manifest(out: Path, m: DatasetManifest, n: int, split, noise, prevalence) -> None:
    doc = {
        "generator_version": m.generator_version,
        "seed": m.seed,
        "n": n,
        "image_size": m.image_size,
        "patch_size": m.patch_size,
        "noise": noise,
        "prevalence": prevalence,
        "split_ratios": list(split),
        "pathologies": list(PATHOLOGIES),
        "splits": {s: [e.annotation.image_id for e in m.entries if e.split == s]
                   for s in ("train", "val", "test")},
        "records": "records.jsonl",
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(data_dir: str | Path) -> DatasetManifest:
    root = Path(data_dir)
    meta = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    entries = []
    with open(root / "records.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            entries.append(DatasetEntry(rec["image"], AnnotationRecord.from_json(rec), rec["note"],
                                        rec["report"], rec["split"]))
    seen = set()
    for e in entries:
        if e.annotation.image_id in seen:
            raise ValueError(f"duplicate image id {e.annotation.image_id}")
        seen.add(e.annotation.image_id)
    return DatasetManifest(entries, meta["seed"], meta["generator_version"],
                           meta["image_size"], meta["patch_size"])


def load_images(data_dir: str | Path, entries: Sequence[DatasetEntry]) -> np.ndarray:
    root = Path(data_dir)
    return np.stack([read_pgm(root / e.image_path) for e in entries]) if entries else np.zeros((0, 0, 0))
