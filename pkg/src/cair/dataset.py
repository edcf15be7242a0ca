"""Image file I/O, the pair index, and deterministic corpus generation.

Images travel as (3,H,W) float32 arrays in [0,1]; files are 8-bit RGB PNG
or binary P6 PPM.  The index is line-oriented text, one pair per line:
original<TAB>filtered<TAB>filter_name<TAB>split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .filters import FilterSpec, apply_filter
from .tensor import ContractViolation

SPLITS = ("train", "val", "test")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 255.0)


def save_png(path: str, img: np.ndarray) -> None:
    """8-bit RGB, no alpha; input is a (3,H,W) float array in [0,1]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractViolation(f"save_png: expected (3,H,W), got {img.shape}")
    hwc = np.transpose(to_uint8(img), (1, 2, 0))
    Image.fromarray(hwc, mode="RGB").save(path, format="PNG")


def load_png(path: str, convert: bool = True) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                if not convert:
                    raise ContractViolation(
                        f"load_png: {path} has mode {im.mode}, not RGB"
                    )
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise IOError(f"load_png: cannot read {path}")
    return from_uint8(np.transpose(arr, (2, 0, 1)))


def save_ppm(path: str, img: np.ndarray) -> None:
    """Binary P6, maxval 255."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractViolation(f"save_ppm: expected (3,H,W), got {img.shape}")
    hwc = np.transpose(to_uint8(img), (1, 2, 0))
    h, w = hwc.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(hwc.tobytes())


def _read_ppm_token(f) -> bytes:
    """Next whitespace-delimited header token, skipping # comments."""
    tok = b""
    while True:
        c = f.read(1)
        if c == b"":
            raise IOError("load_ppm: truncated header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def load_ppm(path: str) -> np.ndarray:
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise IOError(f"load_ppm: cannot read {path}")
    with f:
        if f.read(2) != b"P6":
            raise IOError(f"load_ppm: {path} is not binary P6")
        w = int(_read_ppm_token(f))
        h = int(_read_ppm_token(f))
        maxval = int(_read_ppm_token(f))
        if maxval != 255:
            raise IOError(f"load_ppm: {path} has maxval {maxval}, expected 255")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise IOError(f"load_ppm: {path} truncated pixel data")
    hwc = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return from_uint8(np.transpose(hwc, (2, 0, 1)))


def load_image(path: str) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        return load_png(path)
    if ext == ".ppm":
        return load_ppm(path)
    raise ContractViolation(f"load_image: unsupported extension on {path}")


def save_image(path: str, img: np.ndarray) -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        save_png(path, img)
    elif ext == ".ppm":
        save_ppm(path, img)
    else:
        raise ContractViolation(f"save_image: unsupported extension on {path}")


@dataclass
class IndexEntry:
    original: str
    filtered: str
    filter_name: str
    split: str


@dataclass
class DatasetIndex:
    entries: List[IndexEntry] = field(default_factory=list)

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise ContractViolation(f"index: unknown split {e.split!r}")
            if e.filtered in seen:
                raise ContractViolation(
                    f"index: filtered image {e.filtered} listed twice"
                )
            seen.add(e.filtered)

    def subset(self, split: str) -> "DatasetIndex":
        if split not in SPLITS:
            raise ContractViolation(f"index: unknown split {split!r}")
        return DatasetIndex([e for e in self.entries if e.split == split])

    def save(self, path: str) -> None:
        self.validate()
        with open(path, "w", encoding="ascii") as f:
            for e in self.entries:
                f.write(f"{e.original}\t{e.filtered}\t{e.filter_name}\t{e.split}\n")

    @classmethod
    def load(cls, path: str) -> "DatasetIndex":
        entries = []
        try:
            with open(path, "r", encoding="ascii") as f:
                for lineno, line in enumerate(f, start=1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    parts = line.split("\t")
                    if len(parts) != 4:
                        raise ContractViolation(
                            f"index {path}:{lineno}: expected 4 tab-separated fields"
                        )
                    entries.append(IndexEntry(*parts))
        except FileNotFoundError:
            raise IOError(f"index: cannot read {path}")
        idx = cls(entries)
        idx.validate()
        return idx


def _assign_splits(n: int, rng: np.random.Generator,
                   val_frac: float, test_frac: float) -> List[str]:
    """Split tags per original; val/test get at least one item when n >= 3."""
    n_val = int(n * val_frac)
    n_test = int(n * test_frac)
    if n >= 3:
        n_val = max(1, n_val)
        n_test = max(1, n_test)
    order = rng.permutation(n)
    tags = ["train"] * n
    for i in order[:n_val]:
        tags[i] = "val"
    for i in order[n_val:n_val + n_test]:
        tags[i] = "test"
    return tags


def generate_corpus(source_paths: Sequence[str], filters: Sequence[FilterSpec],
                    out_dir: str, seed: int,
                    val_frac: float = 0.15,
                    test_frac: float = 0.15) -> DatasetIndex:
    """Write originals plus one filtered copy per (source, filter).

    Output naming is `<stem>.png` and `<stem>__<filter>.png`; index paths are
    relative to ``out_dir``.  Re-running with the same inputs and seed
    reproduces every output file and the index byte for byte.
    """
    if not source_paths:
        raise ContractViolation("generate_corpus: no source images")
    stems = [os.path.splitext(os.path.basename(p))[0] for p in source_paths]
    if len(set(stems)) != len(stems):
        raise ContractViolation("generate_corpus: duplicate source stems")

    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    tags = _assign_splits(len(source_paths), rng, val_frac, test_frac)

    entries = []
    for path, stem, tag in zip(source_paths, stems, tags):
        img = load_image(path)
        orig_name = f"{stem}.png"
        save_png(os.path.join(out_dir, orig_name), img)
        for spec in filters:
            filt_name = f"{stem}__{spec.name}.png"
            save_png(os.path.join(out_dir, filt_name), apply_filter(img, spec))
            entries.append(IndexEntry(orig_name, filt_name, spec.name, tag))

    index = DatasetIndex(entries)
    index.save(os.path.join(out_dir, "index.tsv"))
    return index


def make_source_images(out_dir: str, count: int, seed: int,
                       size: int = 96) -> List[str]:
    """Write procedural photographs-stand-ins as `src<i>.png`.

    Each image mixes a smooth random color field, an oriented gradient, and
    a few soft shapes, so patches carry both color and structure.
    """
    if count < 1:
        raise ContractViolation("make_source_images: count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    paths = []
    for i in range(count):
        cell = int(rng.integers(6, 17))
        grid = rng.random((3, size // cell + 2, size // cell + 2))
        field = np.kron(grid, np.ones((cell, cell)))[:, :size, :size]

        theta = rng.uniform(0.0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
        grad = rng.random(3)[:, None, None] * ramp[None]

        img = 0.55 * field + 0.35 * grad
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0.1, 0.9, size=2) * size
            r = rng.uniform(0.08, 0.25) * size
            mask = ((np.mgrid[0:size, 0:size][0] - cy) ** 2 +
                    (np.mgrid[0:size, 0:size][1] - cx) ** 2) < r * r
            color = rng.random(3)
            img[:, mask] = 0.4 * img[:, mask] + 0.6 * color[:, None]

        img = 0.05 + 0.9 * np.clip(img, 0.0, 1.0)
        path = os.path.join(out_dir, f"src{i:03d}.png")
        save_png(path, img)
        paths.append(path)
    return paths


def load_pairs(index: DatasetIndex, root: str,
               split: Optional[str] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Materialize (filtered, original) array pairs for training/eval."""
    entries = index.subset(split).entries if split else index.entries
    out = []
    for e in entries:
        filt = load_image(os.path.join(root, e.filtered))
        orig = load_image(os.path.join(root, e.original))
        out.append((filt, orig))
    return out
