"""robustquant: a desk-scale laboratory for robust neural-network quantization.

Train small reference networks with symmetry regularization, saturating
weight nonlinearities, and sharpness-aware minimization; quantize them with
analytic or empirical clipping; and measure robustness to bit-width and
step-size changes.
"""

from .autodiff import Graph, Node, NonFiniteError, Rng, ShapeError, Tensor, \
    finite_difference_check
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datasets import Dataset, load_idx, make_blobs, make_patterns
from .error_model import (ErrorEstimate, bias_drift, clamped_cdf, mc_quant_error,
                          optimal_alpha, quant_error_clamped, quant_error_normal,
                          verify_dominance)
from .models import Model, ModelSpec
from .quantizer import (QuantParams, QuantScheme, fit_activation_params, fit_params,
                        kmeans_quantize, log_quantize, quantize, quantize_single_level,
                        scale_step)
from .regularizers import (SatNLConfig, SymRegConfig, init_latent, is_valid_satnl,
                           satnl_apply, satnl_forward, satnl_inverse, sym_loss1,
                           sym_loss2, total_loss)
from .trainer import (SamConfig, TrainConfig, TrainingDiverged, evaluate,
                      evaluate_checkpoint, qat_finetune, sam_step, train)

__version__ = "0.1.0"
