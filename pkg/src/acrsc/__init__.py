"""Learned convex regularizers for inverse problems, trained adversarially
with a source-condition penalty."""

from .kernels import BACKEND
from .numerics import RngStream, batch_metrics, psnr, ssim
from .operators import BlurOp, DenseOp, IdentityOp, RadonGeometry, RadonOp, ScaledIdentityOp, fbp, make_operator
from .icnn import IcnnArchitecture, IcnnParams, init_params, load_params, save_params
from .regularizers import HuberTvRegularizer, IcnnRegularizer, QuadraticTestRegularizer, bregman_distance
from .training import TrainConfig, train
from .solvers import SolveConfig, rate_sweep, solve_bregman, solve_gd

__version__ = "0.1.0"
