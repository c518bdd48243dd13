"""Binary containers for datasets and checkpoints, map exporters, run manifests.

Container layout::

    uint32 little-endian  header length L
    L bytes               UTF-8 JSON header
    payload               little-endian float records, sample-major

Dataset records are ``[perm (H*W)][saturation (T*H*W)][pressure (T*H*W)]``
stored as float32.  Checkpoints reuse the framing with float64 parameter
tensors concatenated in header order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    HashMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

FORMAT_VERSION = 1
DATASET_KIND = "flow-dataset"
CHECKPOINT_KIND = "checkpoint"
FIELDS = ("perm", "saturation", "pressure")
OUTPUT_DIR_ENV = "FLOWSURROGATE_OUT"

_LEN = struct.Struct("<I")


@dataclass
class Dataset:
    """In-memory dataset: inputs and simulator targets plus header metadata."""

    perm: np.ndarray  # (n, H, W)
    saturation: np.ndarray  # (n, T, H, W)
    pressure: np.ndarray  # (n, T, H, W)
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.perm)
        if self.perm.ndim != 3:
            raise DimensionError(f"perm must be (n, H, W), got {self.perm.shape}")
        hw = self.perm.shape[1:]
        for name in ("saturation", "pressure"):
            arr = getattr(self, name)
            if arr.ndim != 4 or len(arr) != n or arr.shape[2:] != hw:
                raise DimensionError(f"{name} shape {arr.shape} inconsistent with perm {self.perm.shape}")
        if self.saturation.shape != self.pressure.shape:
            raise DimensionError("saturation and pressure shapes differ")

    def __len__(self) -> int:
        return len(self.perm)

    @property
    def grid(self) -> tuple[int, int]:
        return self.perm.shape[1:]

    @property
    def steps(self) -> int:
        return self.saturation.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.perm[idx], self.saturation[idx], self.pressure[idx], dict(self.header))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _encode(header: dict, payload: bytes) -> bytes:
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(text)) + text + payload


def _decode(raw: bytes, expected_kind: str) -> tuple[dict, bytes]:
    if len(raw) < _LEN.size:
        raise TruncatedFileError("file shorter than its length prefix")
    (n,) = _LEN.unpack_from(raw)
    if len(raw) < _LEN.size + n:
        raise TruncatedFileError("file ends inside its JSON header")
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"format version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    if header.get("kind") != expected_kind:
        raise FormatError(f"container kind {header.get('kind')!r}, expected {expected_kind!r}")
    return header, raw[_LEN.size + n :]


# -- datasets -------------------------------------------------------------------
def record_floats(grid: tuple[int, int], steps: int) -> int:
    h, w = grid
    return h * w + 2 * steps * h * w


def _dataset_payload(ds: Dataset) -> bytes:
    n = len(ds)
    h, w = ds.grid
    rec = np.concatenate(
        [ds.perm.reshape(n, h * w), ds.saturation.reshape(n, ds.steps * h * w),
         ds.pressure.reshape(n, ds.steps * h * w)], axis=1
    )
    return rec.astype("<f4").tobytes()


def dataset_header(ds: Dataset, payload: bytes) -> dict:
    h, w = ds.grid
    header = {k: v for k, v in ds.header.items()
              if k not in ("format_version", "kind", "grid", "steps", "fields", "n_samples",
                           "record_floats", "dtype", "payload_sha256")}
    header.update(
        format_version=FORMAT_VERSION,
        kind=DATASET_KIND,
        grid=[h, w],
        steps=ds.steps,
        fields=list(FIELDS),
        n_samples=len(ds),
        record_floats=record_floats((h, w), ds.steps),
        dtype="<f4",
        payload_sha256=sha256_bytes(payload),
    )
    return header


def write_dataset(ds: Dataset, path) -> None:
    payload = _dataset_payload(ds)
    Path(path).write_bytes(_encode(dataset_header(ds, payload), payload))


def read_dataset(path) -> Dataset:
    header, payload = _decode(Path(path).read_bytes(), DATASET_KIND)
    h, w = header["grid"]
    steps = header["steps"]
    n = header["n_samples"]
    floats = record_floats((h, w), steps)
    if header.get("record_floats") != floats:
        raise FormatError("declared record size disagrees with grid and steps")
    if len(payload) != n * floats * 4:
        raise TruncatedFileError(
            f"payload has {len(payload)} bytes, header declares {n} records of {floats * 4} bytes"
        )
    if sha256_bytes(payload) != header.get("payload_sha256"):
        raise HashMismatchError("payload content hash does not match header")
    rec = np.frombuffer(payload, dtype="<f4").reshape(n, floats)
    hw = h * w
    perm = rec[:, :hw].reshape(n, h, w).copy()
    sat = rec[:, hw : hw + steps * hw].reshape(n, steps, h, w).copy()
    pres = rec[:, hw + steps * hw :].reshape(n, steps, h, w).copy()
    return Dataset(perm, sat, pres, header)


def append_dataset(ds: Dataset, path) -> None:
    """Append samples to an existing container (header rewritten in place)."""
    path = Path(path)
    if not path.exists():
        write_dataset(ds, path)
        return
    header, payload = _decode(path.read_bytes(), DATASET_KIND)
    if list(ds.grid) != header["grid"] or ds.steps != header["steps"]:
        raise DimensionError("appended samples do not match the container grid or steps")
    if len(payload) != header["n_samples"] * header["record_floats"] * 4:
        raise TruncatedFileError("existing container payload is truncated")
    payload = payload + _dataset_payload(ds)
    header["n_samples"] += len(ds)
    seeds = ds.header.get("seeds")
    if seeds is not None and "seeds" in header:
        header["seeds"] = list(header["seeds"]) + list(seeds)
    header["payload_sha256"] = sha256_bytes(payload)
    path.write_bytes(_encode(header, payload))


# -- checkpoints ----------------------------------------------------------------
def write_checkpoint(path, params, meta: dict) -> None:
    """Store named float64 tensors plus arbitrary JSON metadata."""
    names = list(params.keys())
    arrays = [np.asarray(params[k].data if hasattr(params[k], "data") else params[k], dtype="<f8")
              for k in names]
    payload = b"".join(a.tobytes() for a in arrays)
    header = dict(meta)
    header.update(
        format_version=FORMAT_VERSION,
        kind=CHECKPOINT_KIND,
        tensors=[{"name": k, "shape": list(a.shape)} for k, a in zip(names, arrays)],
        dtype="<f8",
        payload_sha256=sha256_bytes(payload),
    )
    Path(path).write_bytes(_encode(header, payload))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _decode(Path(path).read_bytes(), CHECKPOINT_KIND)
    sizes = [int(np.prod(t["shape"])) for t in header["tensors"]]
    if len(payload) != 8 * sum(sizes):
        raise TruncatedFileError("checkpoint payload length disagrees with tensor table")
    if sha256_bytes(payload) != header.get("payload_sha256"):
        raise HashMismatchError("checkpoint payload hash mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, offset = {}, 0
    for t, n in zip(header["tensors"], sizes):
        arrays[t["name"]] = flat[offset : offset + n].reshape(t["shape"]).copy()
        offset += n
    return arrays, header


# -- map export -------------------------------------------------------------------
def export_maps(frames, path, fmt: str = "csv", vmin: float | None = None,
                vmax: float | None = None) -> list[Path]:
    """Write 2-D frames as CSV (``row,col,value`` lines) or 16-bit PGM.

    A 3-D stack writes one file per frame with a ``_tNNN`` suffix.  PGM files
    get a JSON sidecar recording the value range mapped onto 0..65535.
    """
    frames = np.asarray(frames, dtype=np.float64)
    path = Path(path)
    if frames.ndim == 2:
        targets = [(frames, path)]
    elif frames.ndim == 3:
        targets = [(f, path.with_name(f"{path.stem}_t{i:03d}{path.suffix}")) for i, f in enumerate(frames)]
    else:
        raise DimensionError(f"export_maps expects 2-D or 3-D frames, got {frames.shape}")
    if fmt not in ("csv", "pgm"):
        raise ConfigError(f"unknown map format {fmt!r}")
    written = []
    for frame, target in targets:
        try:
            if fmt == "csv":
                _write_csv(frame, target)
            else:
                _write_pgm(frame, target, vmin, vmax)
        except OSError as exc:
            raise OSError(f"cannot write map {target}: {exc.strerror or exc}") from exc
        written.append(target)
    return written


def _write_csv(frame: np.ndarray, path: Path) -> None:
    lines = [f"{i},{j},{float(v)!r}" for (i, j), v in np.ndenumerate(frame)]
    path.write_text("\n".join(lines) + "\n")


def read_csv_map(path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line]
    h = max(int(r[0]) for r in rows) + 1
    w = max(int(r[1]) for r in rows) + 1
    out = np.empty((h, w))
    for i, j, v in rows:
        out[int(i), int(j)] = float(v)
    return out


def _write_pgm(frame: np.ndarray, path: Path, vmin, vmax) -> None:
    lo = float(frame.min()) if vmin is None else float(vmin)
    hi = float(frame.max()) if vmax is None else float(vmax)
    if hi > lo:
        scaled = np.clip((frame - lo) / (hi - lo), 0.0, 1.0)
        levels = np.rint(scaled * 65535).astype(">u2")
    else:
        levels = np.zeros(frame.shape, dtype=">u2")
    h, w = frame.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + levels.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"min": lo, "max": hi, "maxval": 65535}))


def read_pgm_map(path) -> np.ndarray:
    """Parse a PGM written by ``export_maps`` back to physical values."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    levels = np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.float64)
    side = json.loads(Path(str(path) + ".json").read_text())
    if side["max"] == side["min"]:
        return np.full((h, w), side["min"])
    return side["min"] + levels / maxval * (side["max"] - side["min"])


# -- manifests --------------------------------------------------------------------
def code_version() -> str:
    from . import __version__

    return __version__


def write_manifest(path, command: str, config: dict, seeds, outputs, wall_time: float,
                   extra: dict | None = None) -> dict:
    """Record a run; every listed artifact is hashed."""
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds) if seeds is not None else [],
        "code_version": code_version(),
        "outputs": {str(Path(p).name): sha256_file(p) for p in outputs},
        "wall_time_s": wall_time,
        "created_unix": time.time(),
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return manifest


def verify_manifest(path) -> dict[str, bool]:
    """Recompute artifact hashes next to the manifest; True where they match."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    return {name: sha256_file(path.parent / name) == digest for name, digest in manifest["outputs"].items()}


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))
