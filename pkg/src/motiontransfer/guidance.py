"""Motion-matching losses on attention flows and the latent optimization that uses them.

The reference side of every comparison is a hard (argmax) flow; the current
side is the soft flow of the latent being generated, which is differentiable.
Each (object, frame pair) term is the mean squared endpoint difference over
its valid patches, and terms are summed with their weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import softmax

from .amf import (AttentionProvider, FlowField, MotionFlow, background_regions, frame_pairs,
                  object_regions, region_positions)
from .masks import MaskSequence, iou, union_of_others


class GuidanceError(ValueError):
    pass


class GuidanceDivergenceError(FloatingPointError):
    pass


def pair_loss(ref: FlowField, cur: FlowField) -> float:
    """Mean squared endpoint difference over patches valid in both flows (0 if none)."""
    both = ref.valid & cur.valid
    n = np.count_nonzero(both)
    if n == 0:
        return 0.0
    diff = ref.disp[both].astype(np.float64) - cur.disp[both]
    return float(np.sum(diff * diff) / n)


def _weight_for(weights, object_id, pair) -> float:
    w = weights[object_id] if isinstance(weights, Mapping) else weights
    if isinstance(w, Mapping):
        return float(w[pair])
    return float(w)


def _by_id(flows) -> dict:
    if isinstance(flows, Mapping):
        return dict(flows)
    return {f.object_id: f for f in flows}


def object_loss(ref_flows, cur_flows, weights) -> float:
    """Weighted sum over objects and frame pairs of per-pair mean squared flow error.

    ``weights`` maps object id to a scalar or to a ``{(i, j): weight}`` dict
    (adaptive weights); a bare scalar applies to every object.
    """
    ref, cur = _by_id(ref_flows), _by_id(cur_flows)
    if ref.keys() != cur.keys():
        raise GuidanceError(f"object sets differ: {sorted(ref)} vs {sorted(cur)}")
    total = 0.0
    for oid in sorted(ref):
        if ref[oid].pairs.keys() != cur[oid].pairs.keys():
            raise GuidanceError(f"frame pairs differ for object {oid!r}")
        for pair in sorted(ref[oid].pairs):
            total += _weight_for(weights, oid, pair) * pair_loss(ref[oid].pairs[pair], cur[oid].pairs[pair])
    return total


def background_loss(ref_bg: MotionFlow, cur_bg: MotionFlow, weight: float) -> float:
    return object_loss({"bg": ref_bg}, {"bg": cur_bg}, weight)


def adaptive_weight(base: float, alpha: float, mask_k, others_union) -> float:
    """``base * exp(-alpha * IoU)``: down-weights objects overlapped by others."""
    return float(base * np.exp(-alpha * iou(mask_k, others_union)))


def total_loss(obj: float, bg: float) -> float:
    return obj + bg


@dataclass
class GuidanceConfig:
    object_weights: dict = field(default_factory=dict)  # id -> weight; missing ids use default_weight
    default_weight: float = 1.0
    background_weight: float = 1.0
    alpha: float = 1.0
    guided_steps: int = 20
    inner_iters: int = 5
    lr_start: float = 0.008
    lr_end: float = 0.002
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    pairs: str = "consecutive"
    same_frame: bool = False

    def __post_init__(self):
        ws = list(self.object_weights.values()) + [self.default_weight, self.background_weight]
        if any(w < 0 for w in ws):
            raise GuidanceError("loss weights must be non-negative")
        if self.alpha < 0:
            raise GuidanceError("alpha must be non-negative")
        if self.guided_steps < 0 or self.inner_iters < 0:
            raise GuidanceError("step counts must be non-negative")

    def weight(self, object_id: str) -> float:
        return float(self.object_weights.get(object_id, self.default_weight))

    def learning_rate(self, step: int) -> float:
        """Linear decay from ``lr_start`` at step 0 to ``lr_end`` at the last guided step."""
        if self.guided_steps <= 1:
            return self.lr_start
        frac = step / (self.guided_steps - 1)
        return self.lr_start + (self.lr_end - self.lr_start) * frac


def adaptive_weights(config: GuidanceConfig, all_masks: Sequence[MaskSequence], pairs) -> dict:
    out = {}
    for k, seq in enumerate(all_masks):
        out[seq.object_id] = {
            (i, j): adaptive_weight(config.weight(seq.object_id), config.alpha, seq[i],
                                    union_of_others(k, j, all_masks))
            for i, j in pairs
        }
    return out


@dataclass
class _Term:
    group: str  # "obj" or "bg"
    object_id: str
    i: int
    j: int
    query_region: np.ndarray
    key_region: np.ndarray
    target: np.ndarray  # (n_rows, 2) reference displacement per used query row
    rows: np.ndarray  # query rows used (valid in reference)
    weight: float


class GuidanceProblem:
    """Precomputed regions, reference flows and weights for the multi-object loss."""

    def __init__(self, provider: AttentionProvider, all_masks: Sequence[MaskSequence],
                 ref_flows, ref_background: MotionFlow | None, config: GuidanceConfig):
        self.provider = provider
        self.config = config
        F = all_masks[0].frames
        self.pairs = frame_pairs(F, config.pairs)
        self.weights = adaptive_weights(config, all_masks, self.pairs)
        ref = _by_id(ref_flows)
        self.terms: list[_Term] = []
        for k, seq in enumerate(all_masks):
            if seq.object_id not in ref:
                continue
            for i, j in self.pairs:
                qr, kr = object_regions(all_masks, k, i, j, config.same_frame)
                self._add("obj", seq.object_id, i, j, qr, kr, ref[seq.object_id].pairs[(i, j)],
                          self.weights[seq.object_id][(i, j)])
        if ref_background is not None:
            for i, j in self.pairs:
                qr, kr = background_regions(all_masks, i, j)
                self._add("bg", "background", i, j, qr, kr, ref_background.pairs[(i, j)],
                          config.background_weight)

    def _add(self, group, oid, i, j, qr, kr, ref: FlowField, weight):
        qpos = region_positions(qr)
        if len(qpos) == 0 or not kr.any():
            return
        rows = np.flatnonzero(ref.valid[qpos[:, 0], qpos[:, 1]])
        if rows.size == 0:
            return
        target = ref.disp[qpos[rows, 0], qpos[rows, 1]].astype(np.float64)
        self.terms.append(_Term(group, oid, i, j, qr, kr, target, rows, float(weight)))

    def loss_and_grad(self, z, need_grad: bool = True):
        """Returns ``(parts, grad)`` where ``parts`` has ``obj``, ``bg``, ``multi`` and per-object entries."""
        z = np.asarray(z, dtype=np.float64)
        prov = self.provider
        grad = np.zeros_like(z) if need_grad else None
        parts = {"obj": 0.0, "bg": 0.0, "per_object": {}}
        c = prov.scale
        for term in self.terms:
            qpos = region_positions(term.query_region)
            kpos = region_positions(term.key_region)
            fq = z[term.i][term.query_region]
            fk = z[term.j][term.key_region]
            q, _, rq = prov.queries(fq, qpos)
            k, _, rk = prov.keys(fk, kpos)
            A = softmax(c * q @ k.T, axis=-1)
            kp = kpos.astype(np.float64)
            soft = A[term.rows] @ kp - qpos[term.rows]
            diff = soft - term.target
            n = len(term.rows)
            value = term.weight * float(np.sum(diff * diff)) / n
            parts[term.group] += value
            if term.group == "obj":
                parts["per_object"][term.object_id] = parts["per_object"].get(term.object_id, 0.0) + value
            if not need_grad or term.weight == 0.0:
                continue
            # d loss / d soft flow, scattered back to all query rows
            g = np.zeros((len(qpos), 2))
            g[term.rows] = (2.0 * term.weight / n) * diff
            G = g @ kp.T
            dS = A * (G - np.sum(A * G, axis=1, keepdims=True))
            dq = c * dS @ k
            dk = c * dS.T @ q
            d_k = q.shape[-1]
            du_q = (dq - q * np.sum(q * dq, axis=1, keepdims=True) / d_k) / rq
            du_k = (dk - k * np.sum(k * dk, axis=1, keepdims=True) / d_k) / rk
            grad[term.i][term.query_region] += du_q @ prov.w_query.T
            grad[term.j][term.key_region] += du_k @ prov.w_key.T
        parts["multi"] = total_loss(parts["obj"], parts["bg"])
        return parts, grad

    def loss(self, z) -> float:
        return self.loss_and_grad(z, need_grad=False)[0]["multi"]


def guided_update(z, problem: GuidanceProblem, step: int, trace: list | None = None) -> np.ndarray:
    """Run ``inner_iters`` Adam steps on ``z`` against the multi-object loss.

    Appends ``(step, inner_iter, L_obj, L_bg, L_multi)`` rows to ``trace``: one
    before each update and a final one after the last.
    """
    cfg = problem.config
    if step >= cfg.guided_steps:
        raise GuidanceError(f"step {step} is past the last guided step {cfg.guided_steps - 1}")
    lr = cfg.learning_rate(step)
    b1, b2 = cfg.betas
    z = np.array(z, dtype=np.float64)
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    for it in range(cfg.inner_iters):
        parts, g = problem.loss_and_grad(z)
        if trace is not None:
            trace.append((step, it, parts["obj"], parts["bg"], parts["multi"]))
        if not np.all(np.isfinite(g)):
            raise GuidanceDivergenceError(f"non-finite guidance gradient at step {step}, iteration {it}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        z = z - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    if trace is not None:
        parts, _ = problem.loss_and_grad(z, need_grad=False)
        trace.append((step, cfg.inner_iters, parts["obj"], parts["bg"], parts["multi"]))
    return z
