"""Flow-guided sparse attention for video deblurring, in numpy."""

from .attention import (AttentionParams, KeyCoordSet, MacCounter, build_omega, build_psi,
                        fgs_msa, fgsw_msa, mac_count, receptive_extent)
from .flow import BlockMatchingFlow, ConstantFlow, FlowField, FlowSet
from .model import FgstModel, ModelConfig, count_macs, count_params
from .numerics import Tape, Tensor, backward

__version__ = "0.1.0"
