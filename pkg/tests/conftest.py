import numpy as np
import pytest

from motiontransfer.masks import MaskSequence
from motiontransfer.pipeline import ObjectSpec, SceneSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_masks(rng, n_obj, F, H, W, p=0.3):
    return [MaskSequence(f"o{k}", rng.random((F, H, W)) < p) for k in range(n_obj)]


def two_object_scene(F=4, H=8, W=8, d=8):
    return SceneSpec(frames=F, height=H, width=W, channels=d, objects=[
        ObjectSpec("a", 1, 0, 3, 3, (0, 1), seed=11),
        ObjectSpec("b", 5, 4, 2, 3, (0, -1), seed=12),
    ])


def guidance_instance(seed, F=3, H=8, W=8, d=4):
    """Random small guidance problem: two or three moving rectangles, random latent."""
    from motiontransfer.amf import AttentionProvider, extract_amf, extract_background_flow
    from motiontransfer.guidance import GuidanceConfig, GuidanceProblem
    from motiontransfer.pipeline import random_scene_spec, synthesize_scene

    rng = np.random.default_rng(seed)
    spec = random_scene_spec(rng, int(rng.integers(2, 4)), frames=F, height=H, width=W, channels=d)
    scene = synthesize_scene(spec)
    prov = AttentionProvider(d, d_k=8, seed=int(rng.integers(1000)), temperature=float(rng.uniform(0.5, 3.0)),
                             positional=float(rng.uniform(0.0, 0.5)))
    ref = {m.object_id: extract_amf(prov, scene.latent, scene.masks, k) for k, m in enumerate(scene.masks)}
    bg = extract_background_flow(prov, scene.latent, scene.masks)
    cfg = GuidanceConfig(object_weights={m.object_id: float(rng.uniform(0.5, 2.0)) for m in scene.masks},
                         background_weight=float(rng.uniform(0.1, 1.0)), alpha=float(rng.uniform(0.0, 2.0)))
    problem = GuidanceProblem(prov, scene.masks, ref, bg, cfg)
    z = scene.latent + rng.standard_normal(scene.latent.shape)
    return problem, z


def central_difference(f, z, eps=1e-5):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        g[idx] = (f(zp) - f(zm)) / (2 * eps)
    return g


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
