"""Weight container, PNM/PFM image files, teacher bundles, and model save/load."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

MAGIC = b"SDWT"
VERSION = 1
CONFIG_KEY = "__config__"

# tag 0 is the base format; 1 and 2 carry ETM statistics and the config text
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class FormatError(ValueError):
    pass


def _tag(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("=") if arr.dtype.kind == "f" else arr.dtype
    for k, v in DTYPE_TAGS.items():
        if np.dtype(v).newbyteorder("=") == dt:
            return k
    raise FormatError(f"unsupported dtype {arr.dtype}")


@dataclass
class WeightStore:
    """Ordered name -> array mapping with unique names."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, arr) -> None:
        if name in self.entries:
            raise FormatError(f"duplicate entry {name!r}")
        arr = np.asarray(arr)
        _tag(arr)
        self.entries[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    @classmethod
    def from_dict(cls, d: dict) -> "WeightStore":
        s = cls()
        for k, v in d.items():
            s.add(k, v)
        return s

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.entries))]
        for name, arr in self.entries.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"name too long: {name[:40]}...")
            tag = _tag(arr)
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<BB", tag, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WeightStore":
        r = _Reader(buf)
        if r.take(4) != MAGIC:
            raise FormatError("bad magic")
        version, count = r.unpack("<II")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        store = cls()
        for _ in range(count):
            (n,) = r.unpack("<H")
            name = r.take(n).decode("utf-8")
            tag, ndim = r.unpack("<BB")
            if tag not in DTYPE_TAGS:
                raise FormatError(f"{name}: unknown dtype tag {tag}")
            dims = r.unpack(f"<{ndim}I") if ndim else ()
            dt = DTYPE_TAGS[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(r.take(size), dtype=dt).reshape(dims)
            store.add(name, arr.astype(dt.newbyteorder("=")) if dt.kind == "f" else arr.copy())
        if r.pos != len(buf):
            raise FormatError(f"{len(buf) - r.pos} trailing bytes")
        return store


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def write_weights(store: WeightStore | dict, path) -> None:
    if isinstance(store, dict):
        store = WeightStore.from_dict(store)
    Path(path).write_bytes(store.to_bytes())


def read_weights(path) -> WeightStore:
    return WeightStore.from_bytes(Path(path).read_bytes())


# images


def _pnm_header(buf: bytes):
    """Parse magic, width, height, maxval; returns them plus the payload offset."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        fields.append(buf[start:pos])
        if fields[0] not in (b"P5", b"P6"):
            if fields[0] in (b"P1", b"P2", b"P3", b"P4"):
                raise FormatError(f"ASCII/bitmap variant {fields[0].decode()} not supported")
            raise FormatError("not a binary PGM/PPM file")
    # exactly one whitespace byte separates header and raster
    return fields[0], int(fields[1]), int(fields[2]), int(fields[3]), pos + 1


def read_image(path) -> np.ndarray:
    """Binary 8-bit PGM/PPM as a (1, C, H, W) float32 tensor scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    magic, w, h, maxval, off = _pnm_header(buf)
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported (need 255)")
    c = 1 if magic == b"P5" else 3
    n = w * h * c
    if len(buf) - off < n:
        raise FormatError("truncated raster")
    px = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).reshape(h, w, c)
    return (px.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0))


def write_image(path, img: np.ndarray) -> None:
    """8-bit P5/P6 from a (1|3, H, W) or (1, C, H, W) tensor in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"need 1 or 3 channels, got {c}")
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = "P5" if c == 1 else "P6"
    Path(path).write_bytes(f"{magic}\n{w} {h}\n255\n".encode() + px.tobytes())


def _as_map(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    while m.ndim > 2:
        if m.shape[0] != 1:
            raise ValueError(f"expected a single-channel map, got {m.shape}")
        m = m[0]
    return m


def write_pfm(path, depth: np.ndarray) -> None:
    """Grayscale little-endian PFM, rows stored bottom-up."""
    m = _as_map(depth).astype("<f4")
    h, w = m.shape
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(m[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    lines, pos = [], 0
    while len(lines) < 3:
        end = buf.index(b"\n", pos)
        lines.append(buf[pos:end].decode("ascii").strip())
        pos = end + 1
    kind = lines[0]
    if kind not in ("Pf", "PF"):
        raise FormatError(f"not a PFM file ({kind!r})")
    w, h = (int(v) for v in lines[1].split())
    scale = float(lines[2])
    c = 1 if kind == "Pf" else 3
    dt = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    n = w * h * c
    if len(buf) - pos < n * 4:
        raise FormatError("truncated raster")
    a = np.frombuffer(buf, dtype=dt, count=n, offset=pos).astype(np.float32)
    a = a.reshape(h, w, c)[::-1]
    return a[:, :, 0].copy() if c == 1 else a.transpose(2, 0, 1).copy()


def write_pgm16(path, m: np.ndarray, factor: float = 256.0) -> None:
    """16-bit P5 (big-endian samples) holding round(value * factor)."""
    v = np.clip(np.rint(_as_map(m) * factor), 0, 65535).astype(">u2")
    h, w = v.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + v.tobytes())


def read_pgm16(path, factor: float = 256.0) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, w, h, maxval, off = _pnm_header(buf)
    if magic != b"P5" or maxval != 65535:
        raise FormatError("not a 16-bit PGM")
    return np.frombuffer(buf, dtype=">u2", count=w * h, offset=off).reshape(h, w).astype(np.float64) / factor


# teacher bundles


TEACHER_SLOTS = {"enc": 5, "dec": 4, "disp": 4}


@dataclass
class TeacherFrame:
    image: np.ndarray
    enc: list[np.ndarray]
    dec: list[np.ndarray]
    disp: list[np.ndarray]

    def slots(self) -> dict[str, list[np.ndarray]]:
        return {"enc": self.enc, "dec": self.dec, "disp": self.disp}

    def validate(self) -> None:
        for key, n in TEACHER_SLOTS.items():
            got = getattr(self, key)
            if len(got) != n:
                raise FormatError(f"{key}: {len(got)} maps, expected {n}")
            for i, a in enumerate(got):
                if not np.all(np.isfinite(a)):
                    raise FormatError(f"{key}{i} has non-finite values")

    def matched(self, shapes: dict[str, list[tuple]]) -> "TeacherFrame":
        """Bilinearly resize every map whose spatial size differs from the student's."""
        out = {}
        for key, maps in self.slots().items():
            res = []
            for a, shp in zip(maps, shapes[key]):
                if a.shape[1] != shp[1]:
                    raise FormatError(f"{key}: channel count {a.shape[1]} vs {shp[1]}")
                res.append(a if a.shape[2:] == tuple(shp[2:]) else T.bilinear_resize(a, *shp[2:]))
            out[key] = res
        return TeacherFrame(self.image, **out)


def write_teacher_frame(path, image: np.ndarray, enc, dec, disp) -> None:
    store = WeightStore()
    store.add("image", np.asarray(image, dtype=np.float32))
    for key, maps in (("enc", enc), ("dec", dec), ("disp", disp)):
        for i, a in enumerate(maps):
            store.add(f"{key}{i}", np.asarray(a, dtype=np.float32))
    write_weights(store, path)


def read_teacher_frame(path) -> TeacherFrame:
    s = read_weights(path)
    maps = {}
    for key, n in TEACHER_SLOTS.items():
        maps[key] = [s[f"{key}{i}"] for i in range(n) if f"{key}{i}" in s]
    if "image" not in s:
        raise FormatError(f"{path}: missing image entry")
    frame = TeacherFrame(s["image"], **maps)
    frame.validate()
    return frame


def read_teacher_bundle(directory) -> dict[str, TeacherFrame]:
    """All ``*.sdwt`` frames of a directory keyed by file stem."""
    files = sorted(Path(directory).glob("*.sdwt"))
    if not files:
        raise FormatError(f"no teacher frames in {directory}")
    return {f.stem: read_teacher_frame(f) for f in files}


# models


def model_store(model, extra: dict | None = None) -> WeightStore:
    store = WeightStore()
    store.add(CONFIG_KEY, np.frombuffer(model.config.to_text().encode("utf-8"), dtype=np.uint8))
    for k, v in model.state().items():
        store.add(k, v)
    for k, v in (extra or {}).items():
        store.add(k, v)
    return store


def save_model(model, path, extra: dict | None = None) -> None:
    write_weights(model_store(model, extra), path)


def store_config(store: WeightStore):
    from .model import SmallDepthConfig

    if CONFIG_KEY not in store:
        raise FormatError("weight file carries no model config")
    return SmallDepthConfig.from_text(store[CONFIG_KEY].tobytes().decode("utf-8"))


def load_model(source, form: str = "auto"):
    """Rebuild a model from a weight file or store.

    ``form`` picks 'etm' (branch banks), 'fused' (``.fused`` filters) or
    'auto' (fused when present, else whatever the config describes).
    """
    from .model import build_smalldepth

    store = source if isinstance(source, WeightStore) else read_weights(source)
    cfg = store_config(store)
    names = store.names()
    has_fused = any(n.endswith(".fused") for n in names)
    has_bank = any(".etm." in n for n in names)
    if form == "auto":
        form = "fused" if has_fused else ("etm" if has_bank else "plain")
    if form == "etm":
        if not has_bank:
            raise FormatError("no ETM branch entries in weight file")
        model = build_smalldepth(cfg, etm_on=True)
    elif form in ("fused", "plain"):
        if form == "fused" and not has_fused:
            raise FormatError("no fused entries in weight file")
        model = build_smalldepth(cfg, etm_on=False)
        for name, site in model.sites.items():
            site.fused = f"{name}.fused" in store
    else:
        raise ValueError(f"unknown form {form!r}")
    model.load_state(store.entries)
    return model


def fused_mismatch(store: WeightStore) -> dict[str, float]:
    """Max |stored fused - fusion recomputed from stored branches| per site."""
    etm_model = load_model(store, "etm")
    out = {}
    for name, site in etm_model.sites.items():
        key = f"{name}.fused"
        if site.bank is None or key not in store:
            continue
        w = site.fuse().weight
        out[name] = float(np.max(np.abs(w.astype(np.float64) - store[key].astype(np.float64))))
    return out
