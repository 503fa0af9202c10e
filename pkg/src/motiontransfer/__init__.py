"""High-order lambda-space diffusion sampling and mask-aware attention motion flows, at toy scale."""

from .schedule import NoiseSchedule, make_schedule, step_width
from .solver import SolverOptions, Trajectory, ddim_step, extrapolation_weights, invert, midpoint_correct, sample
from .models import GaussianMixtureToy, GaussianToy, reference_flow
from .masks import MaskSequence, decouple, iou, rle_decode, rle_encode
from .amf import AttentionProvider, FlowField, MotionFlow, extract_amf, hard_flow, soft_flow
from .guidance import GuidanceConfig, GuidanceProblem, adaptive_weight, guided_update
from .pipeline import SceneSpec, run_transfer, synthesize_scene
from .metrics import flow_epe, motion_fidelity, temporal_consistency

__version__ = "0.1.0"
