"""Per-object binary mask sequences at patch resolution, plus the RLE file format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1


class MaskError(ValueError):
    """Shape mismatch or invalid mask content."""


class MaskFileError(MaskError):
    """Malformed mask document; ``offset`` is the byte offset of the problem when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class MaskSequence:
    object_id: str
    masks: np.ndarray  # (F, H, W) bool

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 3:
            raise MaskError(f"mask sequence must be (frames, height, width), got shape {m.shape}")
        if m.dtype != bool:
            if not np.all((m == 0) | (m == 1)):
                raise MaskError(f"mask {self.object_id!r} has non-binary entries")
            m = m.astype(bool)
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)

    @property
    def frames(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]

    def __getitem__(self, frame: int) -> np.ndarray:
        return self.masks[frame]


def _check_aligned(all_masks: Sequence[MaskSequence]) -> None:
    if not all_masks:
        raise MaskError("empty mask list")
    shape = all_masks[0].masks.shape
    for m in all_masks[1:]:
        if m.masks.shape != shape:
            raise MaskError(f"mask {m.object_id!r} has shape {m.masks.shape}, expected {shape}")


def decouple(k: int, i: int, j: int, all_masks: Sequence[MaskSequence], same_frame: bool = False) -> np.ndarray:
    """Object ``k``'s frame-``i`` region minus its overlap with other objects' frame-``j`` masks.

    ``same_frame=True`` subtracts the other objects' frame-``i`` masks instead.
    """
    _check_aligned(all_masks)
    if not 0 <= k < len(all_masks):
        raise MaskError(f"object index {k} out of range")
    own = all_masks[k][i]
    jj = i if same_frame else j
    others = np.zeros_like(own)
    for m, seq in enumerate(all_masks):
        if m != k:
            others |= own & seq[jj]
    return own & ~others


def iou(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MaskError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def union_of_others(k: int, frame: int, all_masks: Sequence[MaskSequence]) -> np.ndarray:
    _check_aligned(all_masks)
    out = np.zeros(all_masks[0].shape, dtype=bool)
    for m, seq in enumerate(all_masks):
        if m != k:
            out |= seq[frame]
    return out


def background_mask(all_masks: Sequence[MaskSequence], frame: int) -> np.ndarray:
    """Cells covered by no object in ``frame``."""
    _check_aligned(all_masks)
    covered = np.zeros(all_masks[0].shape, dtype=bool)
    for seq in all_masks:
        covered |= seq[frame]
    return ~covered


def downsample_mask(mask, patch: int) -> np.ndarray:
    """Pixel mask -> patch mask; a patch is on when at least half its pixels are."""
    m = np.asarray(mask, dtype=bool)
    H, W = m.shape[-2:]
    if H % patch or W % patch:
        raise MaskError(f"mask size {(H, W)} not divisible by patch size {patch}")
    blocks = m.reshape(*m.shape[:-2], H // patch, patch, W // patch, patch)
    return blocks.mean(axis=(-3, -1)) >= 0.5


def rle_encode(grid) -> list[int]:
    """Row-major run lengths, alternating zeros/ones, starting with a (possibly 0) zero run."""
    flat = np.asarray(grid, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    n = int(np.prod(shape))
    runs = list(runs)
    if any(isinstance(r, bool) or not isinstance(r, int) or r < 0 for r in runs):
        raise MaskError("run lengths must be non-negative integers")
    if sum(runs) != n:
        raise MaskError(f"run lengths sum to {sum(runs)}, expected {n}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def dumps(all_masks: Sequence[MaskSequence]) -> str:
    _check_aligned(all_masks)
    F, H, W = all_masks[0].masks.shape
    doc = {
        "version": FORMAT_VERSION,
        "frames": F,
        "height": H,
        "width": W,
        "objects": [{"id": m.object_id, "rle": [rle_encode(f) for f in m.masks]} for m in all_masks],
    }
    return json.dumps(doc)


def _locate(text: str, needle: str) -> int | None:
    pos = text.find(needle)
    return None if pos < 0 else len(text[:pos].encode("utf-8"))


def loads(data: str | bytes) -> list[MaskSequence]:
    """Parse a mask document; raises ``MaskFileError`` on any malformation."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MaskFileError("mask file is not valid UTF-8", exc.start) from exc
    else:
        text = data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MaskFileError(f"invalid JSON: {exc.msg}", len(text[: exc.pos].encode("utf-8"))) from exc

    if not isinstance(doc, dict):
        raise MaskFileError("top-level value must be an object", 0)
    for key in ("version", "frames", "height", "width", "objects"):
        if key not in doc:
            raise MaskFileError(f"missing key {key!r}", 0)
    if doc["version"] != FORMAT_VERSION:
        raise MaskFileError(f"unsupported version {doc['version']!r}", _locate(text, '"version"'))
    dims = {}
    for key in ("frames", "height", "width"):
        v = doc[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise MaskFileError(f"{key} must be a positive integer", _locate(text, f'"{key}"'))
        dims[key] = v
    objs = doc["objects"]
    if not isinstance(objs, list) or not objs:
        raise MaskFileError("objects must be a non-empty list", _locate(text, '"objects"'))

    shape = (dims["height"], dims["width"])
    out = []
    seen = set()
    for n, obj in enumerate(objs):
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) or not isinstance(obj.get("rle"), list):
            raise MaskFileError(f"object {n} needs a string 'id' and a list 'rle'", _locate(text, '"objects"'))
        oid = obj["id"]
        where = _locate(text, json.dumps(oid))
        if oid in seen:
            raise MaskFileError(f"duplicate object id {oid!r}", where)
        seen.add(oid)
        if len(obj["rle"]) != dims["frames"]:
            raise MaskFileError(f"object {oid!r} has {len(obj['rle'])} frames, expected {dims['frames']}", where)
        frames = []
        for f, runs in enumerate(obj["rle"]):
            if not isinstance(runs, list):
                raise MaskFileError(f"object {oid!r} frame {f}: RLE must be a list", where)
            try:
                frames.append(rle_decode(runs, shape))
            except MaskError as exc:
                raise MaskFileError(f"object {oid!r} frame {f}: {exc}", where) from exc
        out.append(MaskSequence(oid, np.stack(frames)))
    return out


def save(path, all_masks: Sequence[MaskSequence]) -> None:
    Path(path).write_text(dumps(all_masks), encoding="utf-8")


def load(path) -> list[MaskSequence]:
    return loads(Path(path).read_bytes())
