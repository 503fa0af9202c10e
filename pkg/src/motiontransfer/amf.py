"""Mask-guided cross-frame attention and the motion flows read off it.

Latent videos are arrays of shape ``(F, H, W, d)`` on the patch grid.  Patch
positions are integer ``(row, col)`` pairs; displacements use the same units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.special import softmax

from .masks import MaskSequence, background_mask, decouple

RMS_EPS = 1e-6


class AMFError(ValueError):
    pass


def frame_pairs(F: int, mode: str = "consecutive") -> list[tuple[int, int]]:
    if mode == "consecutive":
        return [(i, i + 1) for i in range(F - 1)]
    if mode == "all":
        return [(i, j) for i in range(F) for j in range(F) if i != j]
    raise AMFError(f"unknown pair mode {mode!r}")


def sinusoidal_position(pos: np.ndarray, dim: int) -> np.ndarray:
    """2-D sinusoidal embedding; half the channels encode rows, half columns."""
    half = dim // 2
    out = np.zeros((len(pos), dim))
    for axis, lo in ((0, 0), (1, half)):
        n = half // 2
        if n == 0:
            continue
        freq = 1.0 / (100.0 ** (np.arange(n) / max(n, 1)))
        ang = pos[:, axis : axis + 1] * freq[None, :]
        out[:, lo : lo + n] = np.sin(ang)
        out[:, lo + n : lo + 2 * n] = np.cos(ang)
    return out


@dataclass(frozen=True)
class AttentionProvider:
    """Fixed random linear maps standing in for a transformer block's Q/K projections.

    Queries and keys are RMS-normalized (QK-norm), so attention logits are
    scaled cosine similarities of the projected patch features.  When
    ``key_seed`` is None the key projection equals the query projection.
    """

    d: int
    d_k: int = 16
    seed: int = 0
    key_seed: int | None = None
    temperature: float = 1.0
    positional: float = 0.0

    def __post_init__(self):
        if self.d < 1 or self.d_k < 1:
            raise AMFError("feature dimensions must be positive")
        if not self.temperature > 0:
            raise AMFError("temperature must be positive")

    @cached_property
    def w_query(self) -> np.ndarray:
        return np.random.default_rng(self.seed).standard_normal((self.d, self.d_k)) / np.sqrt(self.d)

    @cached_property
    def w_key(self) -> np.ndarray:
        if self.key_seed is None:
            return self.w_query
        return np.random.default_rng(self.key_seed).standard_normal((self.d, self.d_k)) / np.sqrt(self.d)

    @property
    def scale(self) -> float:
        return self.temperature / np.sqrt(self.d_k)

    def _embed(self, feats: np.ndarray, pos: np.ndarray, w: np.ndarray):
        u = feats @ w
        if self.positional:
            u = u + self.positional * sinusoidal_position(pos, self.d_k)
        r = np.sqrt(np.mean(u * u, axis=-1, keepdims=True) + RMS_EPS)
        return u / r, u, r

    def queries(self, feats, pos):
        return self._embed(feats, pos, self.w_query)

    def keys(self, feats, pos):
        return self._embed(feats, pos, self.w_key)


def region_positions(region) -> np.ndarray:
    """Row-major ``(row, col)`` positions of the set cells, shape ``(n, 2)``."""
    return np.argwhere(np.asarray(region, dtype=bool))


@dataclass
class CrossAttention:
    """Attention restricted to query_region x key_region.

    ``weights[a, b]`` is the weight from query ``query_pos[a]`` to key
    ``key_pos[b]``; rows flagged invalid have no key support.
    """

    weights: np.ndarray
    query_pos: np.ndarray
    key_pos: np.ndarray
    valid: np.ndarray
    grid: tuple[int, int]

    def dense(self) -> np.ndarray:
        H, W = self.grid
        out = np.zeros((H * W, H * W))
        qi = self.query_pos[:, 0] * W + self.query_pos[:, 1]
        ki = self.key_pos[:, 0] * W + self.key_pos[:, 1]
        out[np.ix_(qi, ki)] = self.weights
        return out


def _check_video(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4:
        raise AMFError(f"latent video must be (F, H, W, d), got shape {z.shape}")
    return z


def masked_cross_attention(provider: AttentionProvider, z, i: int, j: int, query_region, key_region,
                           post_softmax: bool = False) -> CrossAttention:
    """Cross-frame attention of frame ``i`` queries onto frame ``j`` keys.

    Keys outside ``key_region`` are excluded before the softmax so each valid
    row is a distribution over the region.  ``post_softmax=True`` instead
    normalizes over the whole frame and zeroes the excluded keys afterwards.
    """
    z = _check_video(z)
    grid = z.shape[1:3]
    query_region = np.asarray(query_region, dtype=bool)
    key_region = np.asarray(key_region, dtype=bool)
    if query_region.shape != grid or key_region.shape != grid:
        raise AMFError("regions must match the latent patch grid")
    qpos = region_positions(query_region)
    kpos = region_positions(key_region)
    nq = len(qpos)
    if len(kpos) == 0:
        return CrossAttention(np.zeros((nq, 0)), qpos, kpos, np.zeros(nq, dtype=bool), grid)

    q, _, _ = provider.queries(z[i][query_region], qpos)
    if post_softmax:
        allpos = region_positions(np.ones(grid, dtype=bool))
        k, _, _ = provider.keys(z[j].reshape(-1, z.shape[-1]), allpos)
        full = softmax(provider.scale * q @ k.T, axis=-1)
        flat = key_region.ravel()
        weights = full[:, flat]
    else:
        k, _, _ = provider.keys(z[j][key_region], kpos)
        weights = softmax(provider.scale * q @ k.T, axis=-1)
    return CrossAttention(weights, qpos, kpos, np.ones(nq, dtype=bool), grid)


@dataclass
class FlowField:
    """Per-patch displacement ``disp[row, col] = (drow, dcol)`` with a validity grid."""

    disp: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.disp = np.asarray(self.disp)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.disp.shape != self.valid.shape + (2,):
            raise AMFError("disp must have shape valid.shape + (2,)")

    def equals(self, other: "FlowField") -> bool:
        return bool(np.array_equal(self.valid, other.valid)
                    and np.array_equal(self.disp[self.valid], other.disp[other.valid]))


def hard_flow(att: CrossAttention) -> FlowField:
    """Argmax displacement per valid query; ties go to the first key in row-major order."""
    H, W = att.grid
    disp = np.zeros((H, W, 2), dtype=np.int64)
    valid = np.zeros((H, W), dtype=bool)
    rows = np.flatnonzero(att.valid)
    if rows.size:
        best = np.argmax(att.weights[rows], axis=1)
        qp = att.query_pos[rows]
        disp[qp[:, 0], qp[:, 1]] = att.key_pos[best] - qp
        valid[qp[:, 0], qp[:, 1]] = True
    return FlowField(disp, valid)


def soft_flow(att: CrossAttention) -> FlowField:
    """Attention-weighted expected key position minus the query position."""
    H, W = att.grid
    disp = np.zeros((H, W, 2))
    valid = np.zeros((H, W), dtype=bool)
    rows = np.flatnonzero(att.valid)
    if rows.size:
        qp = att.query_pos[rows]
        expected = att.weights[rows] @ att.key_pos.astype(np.float64)
        disp[qp[:, 0], qp[:, 1]] = expected - qp
        valid[qp[:, 0], qp[:, 1]] = True
    return FlowField(disp, valid)


@dataclass
class MotionFlow:
    """Flows of one object (or the background) over a set of ordered frame pairs."""

    object_id: str
    pairs: dict = field(default_factory=dict)  # (i, j) -> FlowField

    def equals(self, other: "MotionFlow") -> bool:
        return self.pairs.keys() == other.pairs.keys() and all(
            self.pairs[p].equals(other.pairs[p]) for p in self.pairs
        )


def object_regions(all_masks: Sequence[MaskSequence], k: int, i: int, j: int, same_frame: bool = False):
    """(query, key) regions for object ``k``: decoupled frame-i region and raw frame-j mask."""
    return decouple(k, i, j, all_masks, same_frame=same_frame), all_masks[k][j]


def background_regions(all_masks: Sequence[MaskSequence], i: int, j: int):
    return background_mask(all_masks, i), background_mask(all_masks, j)


def _extract(provider, z, regions_for, pairs, object_id, soft, post_softmax):
    flows = {}
    for i, j in pairs:
        qr, kr = regions_for(i, j)
        att = masked_cross_attention(provider, z, i, j, qr, kr, post_softmax=post_softmax)
        flows[(i, j)] = soft_flow(att) if soft else hard_flow(att)
    return MotionFlow(object_id, flows)


def extract_amf(provider: AttentionProvider, z, all_masks: Sequence[MaskSequence], k: int,
                pairs: str | Iterable[tuple[int, int]] = "consecutive", soft: bool = False,
                same_frame: bool = False, post_softmax: bool = False) -> MotionFlow:
    """Object ``k``'s motion flow over the requested frame pairs (hard by default)."""
    z = _check_video(z)
    if all_masks[0].masks.shape != z.shape[:3]:
        raise AMFError(f"mask shape {all_masks[0].masks.shape} does not match latent grid {z.shape[:3]}")
    pair_list = frame_pairs(z.shape[0], pairs) if isinstance(pairs, str) else list(pairs)
    return _extract(provider, z, lambda i, j: object_regions(all_masks, k, i, j, same_frame), pair_list,
                    all_masks[k].object_id, soft, post_softmax)


def extract_background_flow(provider: AttentionProvider, z, all_masks: Sequence[MaskSequence],
                            pairs: str | Iterable[tuple[int, int]] = "consecutive", soft: bool = False) -> MotionFlow:
    z = _check_video(z)
    pair_list = frame_pairs(z.shape[0], pairs) if isinstance(pairs, str) else list(pairs)
    return _extract(provider, z, lambda i, j: background_regions(all_masks, i, j), pair_list,
                    "background", soft, False)


def flow_rows(flow: MotionFlow, query_masks: MaskSequence | None = None):
    """Yield ``(object_id, i, j, row, col, drow, dcol, valid)`` rows for a flow dump.

    Rows cover the object's raw frame-i mask when ``query_masks`` is given,
    otherwise every patch.
    """
    for (i, j), ff in sorted(flow.pairs.items()):
        cover = query_masks[i] if query_masks is not None else np.ones(ff.valid.shape, dtype=bool)
        for r, c in region_positions(cover):
            v = bool(ff.valid[r, c])
            dr, dc = (ff.disp[r, c] if v else (0, 0))
            yield flow.object_id, i, j, int(r), int(c), dr, dc, int(v)
