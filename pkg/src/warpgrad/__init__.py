"""warpgrad: flow-based local attention for pose-guided image generation, on a small numpy autodiff engine."""

from .errors import (ConfigError, ContractError, DimensionError, NumericError, TapeError,
                     WarpgradError)
from .tensor import Parameter, Tape, Tensor, as_tensor, backward, set_debug
from .gradcheck import GradcheckReport, gradcheck
from .checkpoint import load_tensors, save_tensors
from .warp import (bilinear_sample, extract_patch, fuse_with_mask, identity_grid,
                   local_attention_warp, predict_kernel, upsample_flow, warp_with_flow)
from .losses import (LossWeights, affine_regularization, mpjpe, mu_max,
                     sampling_correctness)
from .models import GFLA, ModelSpec, MotionExtractionNetwork, SequentialGFLA
from .tasks import gen_clip_task, gen_skeleton_task, gen_warp_task, load_task, save_task

__version__ = "0.1.0"
