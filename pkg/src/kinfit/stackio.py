"""On-disk formats: stack files, PGM renderings, atomic writes.

Stack file layout::

    <JSON header, space padded, newline>  (data_offset bytes, multiple of 64)
    <float32 little-endian payload>       (T * I * J values, t-major then i, j)

Header keys: ``magic`` ("kinfit-stack/1"), ``dims`` ({"I", "J", "T"}),
``frame_start_s`` / ``frame_duration_s`` (lists or null), ``units``
("kBq/ml"), ``byte_order`` ("little"), ``dtype`` ("float32"),
``data_offset`` and an optional free-form ``meta`` object.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument
from .kinetics import TimeGrid

MAGIC = "kinfit-stack/1"
_ALIGN = 64

__all__ = ["MAGIC", "StackFile", "write_stack", "read_stack", "atomic_write", "write_json", "read_json",
           "write_pgm", "read_pgm", "sha256_file"]


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n").encode())


def read_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(eq=False)
class StackFile:
    """I x J x T float32 volume plus optional frame schedule."""

    voxels: np.ndarray
    grid: TimeGrid | None = None
    units: str = "kBq/ml"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise InvalidArgument(f"stack must be I x J x T, got shape {v.shape}")
        self.voxels = v
        if self.grid is not None and len(self.grid) != v.shape[2]:
            raise InvalidArgument(f"{v.shape[2]} frames but the schedule has {len(self.grid)}")

    def header(self, data_offset: int) -> dict:
        I, J, T = self.voxels.shape
        return {
            "magic": MAGIC,
            "dims": {"I": I, "J": J, "T": T},
            "frame_start_s": None if self.grid is None else [float(x) for x in self.grid.frame_start],
            "frame_duration_s": None if self.grid is None else [float(x) for x in self.grid.frame_duration],
            "units": self.units,
            "byte_order": "little",
            "dtype": "float32",
            "data_offset": data_offset,
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        offset = _ALIGN
        while True:
            text = json.dumps(self.header(offset), sort_keys=True)
            need = len(text.encode()) + 1
            if need <= offset:
                break
            offset = -(-need // _ALIGN) * _ALIGN
        head = text.encode().ljust(offset - 1, b" ") + b"\n"
        payload = np.ascontiguousarray(self.voxels.transpose(2, 0, 1), dtype="<f4").tobytes()
        return head + payload

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "StackFile":
        nl = data.find(b"\n")
        if nl < 0:
            raise FormatError(f"{source}: no header line")
        try:
            h = json.loads(data[:nl].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{source}: unreadable header: {exc}") from exc
        if not isinstance(h, dict) or h.get("magic") != MAGIC:
            raise FormatError(f"{source}: not a {MAGIC} file")
        if h.get("byte_order") != "little" or h.get("dtype") != "float32":
            raise FormatError(f"{source}: unsupported byte order or dtype")
        try:
            I, J, T = (int(h["dims"][k]) for k in ("I", "J", "T"))
            offset = int(h["data_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{source}: malformed header: {exc}") from exc
        if offset != nl + 1:
            raise FormatError(f"{source}: data_offset {offset} does not match header length {nl + 1}")
        payload = data[offset:]
        if len(payload) != I * J * T * 4:
            raise FormatError(f"{source}: payload has {len(payload)} bytes, header implies {I * J * T * 4}")
        vox = np.frombuffer(payload, dtype="<f4").reshape(T, I, J).transpose(1, 2, 0)
        grid = None
        if h.get("frame_start_s") is not None:
            grid = TimeGrid(np.asarray(h["frame_start_s"], float), np.asarray(h["frame_duration_s"], float))
        return cls(np.array(vox, dtype=np.float32), grid, h.get("units", "kBq/ml"), h.get("meta") or {})


def write_stack(path, stack: StackFile) -> None:
    atomic_write(path, stack.to_bytes())


def read_stack(path) -> StackFile:
    return StackFile.from_bytes(Path(path).read_bytes(), str(path))


def write_pgm(path, image) -> None:
    """Min-max scaled 8-bit binary PGM; a constant image renders black."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise InvalidArgument("PGM output needs a 2-D image")
    finite = np.where(np.isfinite(img), img, np.nan)
    lo, hi = np.nanmin(finite), np.nanmax(finite)
    if not np.isfinite(lo) or hi <= lo:
        scaled = np.zeros(img.shape, dtype=np.uint8)
    else:
        scaled = np.round(255.0 * (np.nan_to_num(finite, nan=lo) - lo) / (hi - lo)).astype(np.uint8)
    I, J = img.shape
    atomic_write(path, f"P5\n{J} {I}\n255\n".encode() + scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    J, I, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    pixels = data[len(data) - I * J:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(I, J)
