"""One-step generative modelling on Riemannian manifolds with average-velocity fields."""

from .errors import (
    ConfigMismatch, CutLocus, FormatError, InvalidArgument, InvalidSpec, InvariantViolation,
    NonFinite, ParseError, RMFError, ScheduleSingularity, UnconditionalNet,
)
from .geometry import SO3, Euclidean, Manifold, Sphere, Torus, manifold_from_spec
from .net import NetConfig, VelocityNet, load_checkpoint, save_checkpoint
from .sampler import SamplePlan, sample_cfg, sample_k_step, sample_one_step, sample_rfm_euler
from .evaluate import MmdConfig, eval_run, grad_cosine_stats, mmd_v

__version__ = "0.1.0"
