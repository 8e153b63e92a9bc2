"""Gradient-aware mixed-precision weight quantization toolkit.

Pipeline: train or load a tiny reference transformer, capture calibration
gradients, rank weights by aggregated gradient magnitude, keep the top
fraction at float16 and quantize the rest to 2-8 bits with per-channel,
per-group asymmetric round-to-nearest. Ships with a packed file format,
exact fused inference kernels and a perplexity/accuracy harness.
"""

from .container import (GradientBundle, ModelBundle, read_container, read_gradients,
                        write_container, write_gradients)
from .errors import GwqError
from .gwqfile import read_gwq, write_gwq
from .harness import CellSpec, EvalReport, ExperimentSpec, render_report, run_experiment
from .kernels import BenchReport, bench, qmatmul, qmatvec
from .quantizer import (QuantConfig, QuantizedModel, QuantizedTensor, average_bits,
                        dequantize_tensor, quantize_model, quantize_tensor)
from .refmodel import (LossKind, TinyTransformerConfig, backward, forward, loss,
                       next_token_accuracy, perplexity, train_reference)
from .sensitivity import (OutlierMask, SensitivityScores, aggregate_gradients,
                          hessian_diag_scores, predicted_loss_delta, select_outliers,
                          sensitivity_objective)
from .tensor import GroupView, Tensor, abs_quantile, group_min_max, matmul

__version__ = "0.1.0"
