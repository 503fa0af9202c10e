"""Evaluation metrics on latent videos and motion flows.

``motion_fidelity`` is a surrogate, ``1 / (1 + mean endpoint error)``, not an
established published formula.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .amf import FlowField, MotionFlow


class MetricError(ValueError):
    pass


def flatten_frame(frame: np.ndarray) -> np.ndarray:
    return np.asarray(frame, dtype=np.float64).ravel()


def temporal_consistency(video, feature: Callable[[np.ndarray], np.ndarray] = flatten_frame) -> float:
    """Mean cosine similarity between consecutive frame features."""
    video = np.asarray(video)
    if video.shape[0] < 2:
        raise MetricError("temporal consistency needs at least two frames")
    feats = [feature(f) for f in video]
    sims = []
    for a, b in zip(feats[:-1], feats[1:]):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise MetricError("zero-norm frame feature; cosine similarity undefined")
        sims.append(float(np.dot(a, b) / (na * nb)))
    return float(np.clip(np.mean(sims), -1.0, 1.0))


def _endpoint_errors(a: FlowField, b: FlowField) -> np.ndarray:
    both = a.valid & b.valid
    return np.linalg.norm(a.disp[both].astype(np.float64) - b.disp[both], axis=-1)


def _collect(pred, truth) -> np.ndarray:
    if isinstance(pred, FlowField):
        return _endpoint_errors(pred, truth)
    if isinstance(pred, MotionFlow):
        pred, truth = {pred.object_id: pred}, {truth.object_id: truth}
    if not isinstance(pred, Mapping):
        pred = {f.object_id: f for f in pred}
        truth = {f.object_id: f for f in truth}
    if pred.keys() != truth.keys():
        raise MetricError("object sets differ")
    errs = []
    for oid in sorted(pred):
        if pred[oid].pairs.keys() != truth[oid].pairs.keys():
            raise MetricError(f"frame pairs differ for {oid!r}")
        for pair in sorted(pred[oid].pairs):
            errs.append(_endpoint_errors(pred[oid].pairs[pair], truth[oid].pairs[pair]))
    return np.concatenate(errs) if errs else np.zeros(0)


def flow_epe(pred, truth) -> float:
    """Mean Euclidean endpoint error over patches valid in both (patch units).

    Accepts single ``FlowField``s, ``MotionFlow``s, or collections keyed by object id.
    """
    errs = _collect(pred, truth)
    if errs.size == 0:
        raise MetricError("no patches are valid in both flows")
    return float(errs.mean())


def motion_fidelity(flows_a, flows_b) -> float:
    return 1.0 / (1.0 + flow_epe(flows_a, flows_b))
