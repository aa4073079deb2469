"""Caption manifests, subset filters, image preprocessing and a synthetic corpus.

Images are read from 8-bit binary PGM (``P5``) files or from raw tensor
files (``.bin``/``.tensor``, see :mod:`medcap.numcore.io`).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numcore.io import read_tensor, write_tensor
from .tokenizer import DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class CaptionRecord:
    image_path: str
    caption: str
    labels: list[str] = field(default_factory=list)
    split: str = "train"
    record_id: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self, root: Path | None = None) -> dict:
        image = self.image_path
        if root is not None:
            try:
                image = str(Path(image).relative_to(root))
            except ValueError:
                pass
        row = {"id": self.record_id, "image": image, "caption": self.caption, "labels": self.labels, "split": self.split}
        if self.meta:
            row["meta"] = self.meta
        return row


@dataclass
class ManifestError:
    line: int
    message: str


def load_manifest(path, report: list[ManifestError] | None = None, max_bad_fraction: float = 0.10) -> list[CaptionRecord]:
    """Read a JSONL manifest; malformed lines are skipped and reported.

    Image paths are resolved relative to the manifest's directory. Raises
    :class:`DataError` when more than ``max_bad_fraction`` of lines are bad.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    records: list[CaptionRecord] = []
    errors: list[ManifestError] = []
    lines = [(i, line) for i, line in enumerate(text.splitlines(), start=1) if line.strip()]
    for lineno, line in lines:
        try:
            row = json.loads(line)
            if not isinstance(row, dict):
                raise ValueError("line is not a JSON object")
            caption = row.get("caption")
            if not isinstance(caption, str) or not caption.strip():
                raise ValueError("missing or empty 'caption'")
            image = row.get("image")
            if not isinstance(image, str) or not image:
                raise ValueError("missing 'image'")
            labels = row.get("labels", [])
            if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
                raise ValueError("'labels' must be a list of strings")
            split = row.get("split") or "train"
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
        except ValueError as exc:
            errors.append(ManifestError(lineno, str(exc)))
            continue
        records.append(CaptionRecord(
            image_path=str(root / image),
            caption=caption,
            labels=list(labels),
            split=split,
            record_id=str(row.get("id", lineno)),
            meta=row.get("meta", {}) or {},
        ))
    if report is not None:
        report.extend(errors)
    for err in errors:
        log.warning("%s:%d: %s", path, err.line, err.message)
    if lines and len(errors) / len(lines) > max_bad_fraction:
        raise DataError(f"{len(errors)} of {len(lines)} manifest lines are malformed")
    return records


def write_manifest(records: Iterable[CaptionRecord], path) -> None:
    path = Path(path)
    root = path.parent
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(root)) + "\n")


# ---------------------------------------------------------------------------
# subset filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterSpec:
    required_labels: tuple[str, ...] = ()
    caption_terms: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.required_labels and not self.caption_terms:
            raise ValueError("a FilterSpec needs labels, caption terms, or both")


BRAIN_ONLY = FilterSpec(required_labels=("mri", "brain", "head"), caption_terms=("tumor", "lesion", "mass"))


def matches(record: CaptionRecord, spec: FilterSpec) -> bool:
    labels = {label.lower() for label in record.labels}
    if not all(req.lower() in labels for req in spec.required_labels):
        return False
    if spec.caption_terms:
        caption = record.caption.lower()
        return any(term.lower() in caption for term in spec.caption_terms)
    return True


def filter_subset(records: Sequence[CaptionRecord], spec: FilterSpec) -> list[CaptionRecord]:
    """Keep records carrying every required label and mentioning at least one caption term.

    Terms match as plain substrings, so "tumors" satisfies "tumor".
    """
    return [r for r in records if matches(r, spec)]


# ---------------------------------------------------------------------------
# image I/O and preprocessing
# ---------------------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., 0]
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def _pgm_tokens(blob: bytes):
    pos = 0
    fields = []
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        fields.append(blob[start:pos])
    return fields, pos + 1


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(blob)
    if magic != b"P5":
        raise DataError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=offset)
    return data.reshape(h, w)


def read_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix in (".bin", ".tensor"):
        return read_tensor(path)
    raise DataError(f"unsupported image format: {path}")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of an (H, W, C) float image."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, wy = coords(h, out_h)
    x0, x1, wx = coords(w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def preprocess_image(raw: np.ndarray, target: int = 224, channels: int | None = None,
                     mean: float | Sequence[float] = 0.5, std: float | Sequence[float] = 0.5,
                     normalize: bool = True) -> np.ndarray:
    """Resize the shorter side to ``target``, center-crop, scale to [0, 1] and normalize.

    Integer images are divided by their dtype maximum; float images are taken
    to be in [0, 1] already. Single-channel input is replicated when
    ``channels`` asks for more.
    """
    img = np.asarray(raw)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1 or img.shape[2] < 1:
        raise DataError(f"degenerate image of shape {np.shape(raw)}")
    if img.dtype.kind in "ui":
        img = img.astype(np.float64) / np.iinfo(img.dtype).max
    else:
        img = img.astype(np.float64)
    h, w = img.shape[:2]
    scale = target / min(h, w)
    new_h = max(target, int(round(h * scale)))
    new_w = max(target, int(round(w * scale)))
    img = resize_bilinear(img, new_h, new_w)
    top = (new_h - target) // 2
    left = (new_w - target) // 2
    img = img[top:top + target, left:left + target]
    if channels is not None and img.shape[2] != channels:
        if img.shape[2] != 1:
            raise DataError(f"cannot map {img.shape[2]} channels to {channels}")
        img = np.repeat(img, channels, axis=2)
    if normalize:
        img = (img - np.asarray(mean, dtype=np.float64)) / np.asarray(std, dtype=np.float64)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SHAPES = {"disc": "mass", "ring": "ring", "bar": "bar"}
INTENSITIES = {"faint": 0.35, "moderate": 0.65, "bright": 1.0}
ROWS = ("upper", "middle", "lower")
COLS = ("left", "center", "right")
BACKGROUND = 0.02
SKULL = 0.5


def location_phrase(row: int, col: int) -> str:
    if row == 1 and col == 1:
        return "central"
    return f"{ROWS[row]} {COLS[col]}"


def _phrase_to_location(phrase: str) -> tuple[int, int]:
    if phrase == "central":
        return 1, 1
    r, c = phrase.split()
    return ROWS.index(r), COLS.index(c)


def describe(findings: Sequence[dict]) -> str:
    parts = [
        f"{f['intensity']} {SHAPES[f['shape']]} in {location_phrase(f['row'], f['col'])} region" for f in findings
    ]
    return " and ".join(parts)


def parse_caption(caption: str) -> list[dict]:
    """Invert :func:`describe`."""
    noun_to_shape = {v: k for k, v in SHAPES.items()}
    findings = []
    for part in caption.split(" and "):
        words = part.split()
        if len(words) < 4 or words[2] != "in" or words[-1] != "region":
            raise ValueError(f"not a synthetic caption: {caption!r}")
        row, col = _phrase_to_location(" ".join(words[3:-1]))
        findings.append({"shape": noun_to_shape[words[1]], "intensity": words[0], "row": row, "col": col})
    return findings


def phantom(size: int) -> np.ndarray:
    """Head-like backdrop: a bright elliptical skull rim around shaded tissue.

    The tissue shading varies smoothly with position, so patch content alone
    says roughly where a patch sits in the frame.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2.0
    r = np.hypot((yy - c) / (0.47 * size), (xx - c) / (0.40 * size))
    img = np.full((size, size), BACKGROUND)
    img[r <= 1.0] = SKULL
    tissue = r <= 0.90
    img[tissue] = 0.12 + 0.10 * yy[tissue] / size + 0.06 * xx[tissue] / size
    return img


def render(findings: Sequence[dict], size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = phantom(size) + rng.normal(0.0, 0.02, (size, size))
    cell = size / 3.0
    for f in findings:
        cy = (f["row"] + 0.5) * cell
        cx = (f["col"] + 0.5) * cell
        radius = 0.38 * cell
        dist = np.hypot(yy - cy, xx - cx)
        if f["shape"] == "disc":
            mask = dist <= radius
        elif f["shape"] == "ring":
            mask = (dist <= radius) & (dist >= 0.55 * radius)
        else:
            mask = (np.abs(yy - cy) <= 0.18 * cell) & (np.abs(xx - cx) <= radius)
        img[mask] = INTENSITIES[f["intensity"]]
    return np.clip(img, 0.0, 1.0)


def _split_assignments(n: int, rng: np.random.Generator) -> list[str]:
    order = rng.permutation(n)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    splits = [""] * n
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return splits


def synth_generate(n: int, seed: int, out_dir, image_size: int = 64,
                   labels: Sequence[str] = ("mri", "brain", "head")) -> list[CaptionRecord]:
    """Write ``n`` images with 1-2 shapes plus a caption naming each one.

    Output is ``out_dir/manifest.jsonl`` and ``out_dir/images/*.pgm``;
    the same seed reproduces byte-identical files.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    splits = _split_assignments(n, np.random.default_rng([seed, 1]))
    shapes = list(SHAPES)
    intensities = list(INTENSITIES)
    records = []
    for i in range(n):
        count = 1 + int(rng.random() < 0.3)
        # reading order, so the caption is a function of the image alone
        cells = np.sort(rng.choice(9, size=count, replace=False))
        findings = [
            {
                "shape": shapes[int(rng.integers(len(shapes)))],
                "intensity": intensities[int(rng.integers(len(intensities)))],
                "row": int(c) // 3,
                "col": int(c) % 3,
            }
            for c in cells
        ]
        img = render(findings, image_size, rng)
        rel = f"images/{i:05d}.pgm"
        write_pgm(out / rel, img)
        records.append(CaptionRecord(
            image_path=str(out / rel),
            caption=describe(findings),
            labels=list(labels),
            split=splits[i],
            record_id=f"synth-{i:05d}",
            meta={"findings": findings},
        ))
    write_manifest(records, out / "manifest.jsonl")
    return records


def split_records(records: Sequence[CaptionRecord], split: str) -> list[CaptionRecord]:
    return [r for r in records if r.split == split]


def shuffle_captions(records: Sequence[CaptionRecord], rng: np.random.Generator,
                     split: str = "train") -> list[CaptionRecord]:
    """Permute captions among the records of ``split``; other splits are untouched.

    Image paths become absolute so the result can be written anywhere.
    """
    out = [replace(r, image_path=str(Path(r.image_path).resolve())) for r in records]
    idx = [i for i, r in enumerate(out) if r.split == split]
    captions = [out[i].caption for i in idx]
    for i, j in zip(idx, rng.permutation(len(idx))):
        out[i] = replace(out[i], caption=captions[j], meta={})
    return out


def load_images(records: Sequence[CaptionRecord], target: int, channels: int) -> np.ndarray:
    return np.stack([preprocess_image(read_image(r.image_path), target, channels) for r in records])


def read_corpus(path) -> list[str]:
    """Caption lines from a plain text file or the ``caption`` field of a JSONL manifest."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return [r.caption for r in load_manifest(path)]
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def write_tensor_image(path, img: np.ndarray) -> None:
    write_tensor(path, np.asarray(img, dtype=np.float32))
