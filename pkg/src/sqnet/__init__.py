"""Scalable compression of neural-network weights.

Hierarchical two-centroid residual quantization, budgeted per-layer bit
allocation, centroid fine-tuning and a truncatable stream format with
incremental upgrade deltas.
"""

from .allocator import (CostOracle, SearchTrace, backward_greedy, grid_search, random_search,
                        total_bits)
from .bitstream import (apply_delta, decode_delta, deserialize, encode_delta, fingerprint,
                        make_delta, serialize, truncate)
from .estimators import BitAllocator, CentroidFineTuner, HierarchicalQuantizer, ModelQuantizer
from .finetune import FineTuneConfig, centroid_gradients, fine_tune
from .hquant import (RateReport, Stage, StageStack, compression_rate, hierarchical_quantize,
                     initial_allocation, kmeans2, quantize_model, reconstruct, reconstruct_model)
from .io import load_idx, load_model, save_model
from .nn import (Dataset, Layer, NetworkModel, backward, build_model, cross_entropy, forward,
                 synthesize_dataset, train_toy)

__version__ = "0.1.0"
