"""Checkpoint, layout-file and PGM mask I/O.

Checkpoint layout (all integers little-endian)::

    b"LATNCKPT"            8-byte magic
    uint32 header_length
    header                 UTF-8 JSON: version, K, vocab hash, configs, tensor table
    payload                concatenated little-endian float32 tensors

Layout files are JSON: ``{"objects": [{"id", "cx", "cy", "r"}]}`` for circles
or ``{"objects": [{"id", "mask_pgm": path}]}`` for explicit masks.  Mask paths
are resolved relative to the layout file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..errors import ConfigError, LayoutAttnError, ShapeError
from ..scene_dsl import VOCABULARY
from .gmm import Circle, ExplicitMask, Layout
from .model import LayoutPredictor, PredictorConfig

MAGIC = b"LATNCKPT"
FORMAT_VERSION = 1


class CheckpointError(LayoutAttnError):
    pass


def vocab_hash() -> str:
    return hashlib.sha256("\n".join(VOCABULARY).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(model: LayoutPredictor, path, extra: Optional[dict] = None) -> None:
    """Write ``model`` as float32 tensors behind a JSON header.

    ``extra`` (for example the training config) is stored verbatim in the
    header and returned by :func:`load_checkpoint`.
    """
    state = model.state_dict()
    tensors, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = {
        "version": FORMAT_VERSION,
        "k": model.cfg.k,
        "vocab_hash": vocab_hash(),
        "model_config": asdict(model.cfg),
        "extra": extra or {},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[LayoutPredictor, dict]:
    """Read a checkpoint; returns the model (in eval mode) and the header."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a layout predictor checkpoint")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start : start + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header.get("vocab_hash") != vocab_hash():
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    cfg = PredictorConfig(**header["model_config"])
    model = LayoutPredictor(cfg)
    payload = memoryview(data)[start + n :]
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = t["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(payload[t["offset"] : end], dtype="<f4").reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model, header


# ---------------------------------------------------------------------------
# PGM masks
# ---------------------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int, start: int = 0) -> tuple[list[bytes], int]:
    """Next ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i = [], start
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ConfigError("truncated PGM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i


def read_pgm(path) -> np.ndarray:
    """Read a plain (P2) or binary (P5) PGM; returns a ``uint16`` array."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P2":
        values = data[pos:].split()
        if len(values) < w * h:
            raise ConfigError(f"{path}: expected {w * h} pixels, found {len(values)}")
        return np.array([int(v) for v in values[: w * h]], dtype=np.uint16).reshape(h, w)
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = ">u2" if maxval > 255 else "u1"
        size = w * h * (2 if maxval > 255 else 1)
        raw = data[pos : pos + size]
        if len(raw) < size:
            raise ConfigError(f"{path}: truncated P5 payload")
        return np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(np.uint16)
    raise ConfigError(f"{path}: unsupported PGM magic {magic!r}")


def write_pgm(mask: np.ndarray, path, binary: bool = True) -> None:
    img = np.asarray(mask)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    img = img.astype(np.uint8)
    h, w = img.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in img)
        Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n", encoding="ascii")


# ---------------------------------------------------------------------------
# layout files
# ---------------------------------------------------------------------------


def read_layout(path, n_objects: Optional[int] = None) -> Layout:
    """Parse a layout file.  Objects are ordered by ``id`` and must be 1..N."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = sorted(doc["objects"], key=lambda o: int(o["id"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: invalid layout file ({exc})") from exc
    ids = [int(o["id"]) for o in entries]
    if ids != list(range(1, len(ids) + 1)):
        raise ConfigError(f"{path}: object ids must be 1..N, got {ids}")
    if n_objects is not None and len(ids) != n_objects:
        raise ConfigError(f"{path}: layout has {len(ids)} objects, description has {n_objects}")
    regions = []
    for o in entries:
        if "mask_pgm" in o:
            mask = read_pgm(path.parent / o["mask_pgm"]) > 0
            if not mask.any():
                raise ConfigError(f"{path}: mask for object {o['id']} is empty")
            regions.append(ExplicitMask(mask))
        else:
            try:
                regions.append(Circle(float(o["cx"]), float(o["cy"]), float(o.get("r", 0.2))))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{path}: bad circle for object {o['id']} ({exc})") from exc
    shapes = {r.mask.shape for r in regions if isinstance(r, ExplicitMask)}
    if len(shapes) > 1:
        raise ShapeError(f"{path}: masks have differing shapes {sorted(shapes)}")
    return Layout(tuple(regions))


def layout_to_json(layout: Layout, mask_names: Optional[list[str]] = None) -> dict:
    objects = []
    for i, region in enumerate(layout.regions, start=1):
        if isinstance(region, Circle):
            objects.append({"id": i, "cx": region.cx, "cy": region.cy, "r": region.r})
        else:
            cx, cy = region.center
            entry = {"id": i, "cx": cx, "cy": cy}
            if mask_names is not None:
                entry["mask_pgm"] = mask_names[i - 1]
            objects.append(entry)
    return {"objects": objects}


def write_layout(layout: Layout, path) -> None:
    """Write a layout file; explicit masks go to sibling ``<stem>_maskN.pgm`` files."""
    path = Path(path)
    names = None
    if any(isinstance(r, ExplicitMask) for r in layout.regions):
        names = []
        for i, region in enumerate(layout.regions, start=1):
            name = f"{path.stem}_mask{i}.pgm"
            if isinstance(region, ExplicitMask):
                write_pgm(region.mask, path.parent / name)
                names.append(name)
            else:
                names.append(None)
    path.write_text(json.dumps(layout_to_json(layout, names), indent=2) + "\n", encoding="utf-8")
