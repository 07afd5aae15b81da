"""Synthetic shapes data, labeled/unlabeled splits, and the ASTF / ASCK file formats.

ASTF (one tensor):
    b"ASTF" | u8 version=1 | u8 dtype | u8 rank | rank x u32 dims | payload
    dtype codes: 0=f32, 1=f64, 2=u8, 3=i32; little-endian, row-major.
ASCK (checkpoint):
    b"ASCK" | u32 entry count | per entry: u16 name length, UTF-8 name, ASTF record
"""
from __future__ import annotations

import colorsys
import hashlib
import os
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ContractError, FormatError

ASTF_MAGIC = b"ASTF"
ASCK_MAGIC = b"ASCK"
ASTF_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i4"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
NOISE_SIGMA = 0.05


# ---------------------------------------------------------------- ASTF


def encode_tensor(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; ASTF stores f32, f64, u8, i32")
    if arr.ndim > 255:
        raise FormatError("rank above 255 not representable")
    head = ASTF_MAGIC + bytes([ASTF_VERSION, DTYPE_CODES[dt], arr.ndim])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, expect_dtype=None) -> tuple[np.ndarray, int]:
    """Parse one ASTF record at `offset`; returns (array, offset after it)."""
    if len(buf) < offset + 4:
        raise FormatError(f"truncated ASTF magic at offset {offset}")
    if buf[offset : offset + 4] != ASTF_MAGIC:
        raise FormatError(f"bad ASTF magic at offset {offset}")
    if len(buf) < offset + 7:
        raise FormatError(f"truncated ASTF header at offset {offset}")
    version, code, rank = buf[offset + 4], buf[offset + 5], buf[offset + 6]
    if version != ASTF_VERSION:
        raise FormatError(f"unsupported ASTF version {version} at offset {offset + 4}")
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} at offset {offset + 5}")
    dt = CODE_DTYPES[code]
    if expect_dtype is not None and np.dtype(expect_dtype) != dt:
        raise FormatError(f"dtype mismatch at offset {offset + 5}: file has {dt}, expected {np.dtype(expect_dtype)}")
    pos = offset + 7
    if len(buf) < pos + 4 * rank:
        raise FormatError(f"truncated ASTF dims at offset {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated ASTF payload at offset {pos}: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
    return arr, pos + nbytes


def save_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path, expect_dtype=None) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf, 0, expect_dtype)
    if end != len(buf):
        raise FormatError(f"trailing bytes after ASTF record at offset {end}")
    return arr


# ---------------------------------------------------------------- ASCK


def encode_checkpoint(entries: dict) -> bytes:
    out = [ASCK_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:32]}...")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(encode_tensor(arr))
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != ASCK_MAGIC:
        raise FormatError("bad ASCK magic at offset 0")
    if len(buf) < 8:
        raise FormatError("truncated ASCK header at offset 4")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    entries = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError(f"truncated entry name length at offset {pos}")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + n:
            raise FormatError(f"truncated entry name at offset {pos}")
        try:
            name = buf[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry name is not UTF-8 at offset {pos}") from None
        pos += n
        entries[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(f"trailing bytes after checkpoint at offset {pos}")
    return entries


def save_checkpoint(path, entries: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def entry_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")


# ---------------------------------------------------------------- data


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) class indices
    id: str


def palette(num_classes: int) -> np.ndarray:
    """Class 0 mid grey, the rest evenly spaced saturated hues."""
    colors = [(0.5, 0.5, 0.5)]
    for k in range(1, num_classes):
        colors.append(colorsys.hsv_to_rgb((k - 1) / (num_classes - 1), 0.8, 0.9))
    return np.array(colors, dtype=np.float64)


def render_sample(index: int, height: int, width: int, num_classes: int, seed: int, cast: float = 0.0) -> Sample:
    """cast > 0 applies a per-image, per-channel colour shift: gain in 1 +- cast,
    offset in +- cast/2. With cast = 0 colours are exactly the palette plus noise."""
    rng = np.random.default_rng([seed, index])
    colors = palette(num_classes)
    mask = np.zeros((height, width), dtype=np.int64)
    yy, xx = np.mgrid[0:height, 0:width]
    n_shapes = int(rng.integers(1, min(3, num_classes - 1) + 1))
    for cls in rng.choice(np.arange(1, num_classes), size=n_shapes, replace=False):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry = rng.uniform(height / 8, height / 3)
        rx = rng.uniform(width / 8, width / 3)
        if rng.random() < 0.5:
            inside = (np.abs(yy + 0.5 - cy) <= ry) & (np.abs(xx + 0.5 - cx) <= rx)
        else:
            inside = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
        mask[inside] = cls
    base = colors[mask].transpose(2, 0, 1)
    if cast > 0:
        crng = np.random.default_rng([seed, index, 7])
        base = base * crng.uniform(1 - cast, 1 + cast, size=(3, 1, 1)) + crng.uniform(-cast / 2, cast / 2, size=(3, 1, 1))
        image = base + crng.normal(0, NOISE_SIGMA, size=base.shape)
    else:
        image = base + rng.normal(0, NOISE_SIGMA, size=(3, height, width))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask, f"s{index:05d}")


def generate_dataset(n: int, height: int = 32, width: int = 32, num_classes: int = 4, seed: int = 0, start: int = 0,
                     cast: float = 0.0) -> list[Sample]:
    if num_classes < 2:
        raise ContractError("need at least 2 classes (class 0 is background)")
    if cast < 0 or cast >= 1:
        raise ContractError(f"cast must be in [0, 1), got {cast}")
    return [render_sample(i, height, width, num_classes, seed, cast) for i in range(start, start + n)]


@dataclass
class SplitManifest:
    labeled: list[str]
    unlabeled: list[str]
    seed: int = 0
    ratio: str = ""

    def to_text(self) -> str:
        lines = [f"# seed={self.seed} ratio={self.ratio}", "[labeled]", *self.labeled, "[unlabeled]", *self.unlabeled]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        sections: dict[str, list[str]] = {}
        current = None
        seed, ratio = 0, ""
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "seed":
                        seed = int(val)
                    elif key == "ratio":
                        ratio = val
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = []
            elif current is None:
                raise FormatError(f"manifest id {line!r} outside a section")
            else:
                sections[current].append(line)
        return cls(sections.get("labeled", []), sections.get("unlabeled", []), seed, ratio)


def parse_ratio(ratio: Union[str, float, Fraction]) -> Fraction:
    try:
        return Fraction(ratio) if not isinstance(ratio, float) else Fraction(ratio).limit_denominator(1 << 20)
    except (ValueError, ZeroDivisionError):
        raise ContractError(f"bad ratio {ratio!r}") from None


def split_dataset(samples: Sequence, ratio, seed: int = 0) -> SplitManifest:
    """Seeded shuffle, then the first max(1, floor(ratio * n)) ids are labeled."""
    r = parse_ratio(ratio)
    if not 0 < r < 1:
        raise ContractError(f"labeled ratio must be in (0, 1), got {ratio}")
    ids = [getattr(s, "id", s) for s in samples]
    if not ids:
        raise ContractError("cannot split an empty dataset: zero labeled samples")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_lab = max(1, (r.numerator * len(ids)) // r.denominator)
    shuffled = [ids[i] for i in order]
    return SplitManifest(shuffled[:n_lab], shuffled[n_lab:], seed, str(r))


def write_dataset(root, samples: Sequence[Sample], manifest: SplitManifest, val: Sequence[Sample] = ()) -> None:
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    for s in [*samples, *val]:
        save_tensor(root / "samples" / f"{s.id}_image.astf", s.image.astype(np.float32))
        save_tensor(root / "samples" / f"{s.id}_mask.astf", s.mask.astype(np.uint8))
    (root / "manifest.txt").write_text(manifest.to_text(), encoding="utf-8")
    (root / "val.txt").write_text("".join(f"{s.id}\n" for s in val), encoding="utf-8")


def read_sample(root, sample_id: str) -> Sample:
    d = Path(root) / "samples"
    image = load_tensor(d / f"{sample_id}_image.astf", np.float32)
    mask = load_tensor(d / f"{sample_id}_mask.astf", np.uint8).astype(np.int64)
    return Sample(image, mask, sample_id)


def read_manifest(root) -> SplitManifest:
    return SplitManifest.from_text((Path(root) / "manifest.txt").read_text(encoding="utf-8"))


def read_split(root, split: str) -> list[Sample]:
    """split: "labeled", "unlabeled", "val" or "train" (labeled + unlabeled)."""
    root = Path(root)
    if split == "val":
        path = root / "val.txt"
        ids = path.read_text(encoding="utf-8").split() if path.exists() else []
    else:
        m = read_manifest(root)
        ids = {"labeled": m.labeled, "unlabeled": m.unlabeled, "train": m.labeled + m.unlabeled}.get(split)
        if ids is None:
            raise ContractError(f"unknown split {split!r}")
    return [read_sample(root, i) for i in ids]


def directory_checksum(root) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def stack_batch(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
