"""Binary weight-mask learning over frozen networks.

Learn which weights of a frozen pretrained network to keep by training
per-weight scores with the pass-through trick, supervised or label-free
(swapped cluster prediction with Sinkhorn targets). Includes
hyperparameter-equivalence verification, expert cascades, evaluation
protocols, and bit-exact mask storage.
"""

from .nn import SmallModel, TrainConfig, init_model
from .masking import MaskedModel, threshold_mask, topk_mask
from .maskio import pack_masks, unpack_masks

__version__ = "0.1.0"

__all__ = [
    "SmallModel",
    "TrainConfig",
    "init_model",
    "MaskedModel",
    "threshold_mask",
    "topk_mask",
    "pack_masks",
    "unpack_masks",
    "__version__",
]
