"""Split-weight hybrid inference between a trusted and an untrusted party."""

from . import costmodel, decompose, errors, models, protocol, redteam, ring, transport
from .decompose import SplitPlan, default_strategy, plan_decomposition, split, svd
from .models import ModelParams, forward_reference, forward_reference_quantized
from .protocol import build_parties, run_attention_hybrid, run_mlp_hybrid
from .ring import FixedVec, RingParams, dequantize, quantize

__version__ = "0.1.0"
