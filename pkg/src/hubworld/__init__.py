"""Multi-agent world-model toolkit.

Simplex rotary agent identities, hub-mediated sparse attention, a block-causal
flow-matching toy transformer with hand-derived gradients, KV-cached streaming
rollout, and a dense-vs-hub attention scaling benchmark.
"""

from .attention import (HAVE_COMPILED, active_backend, attention_cost,
                        masked_attention_reference, set_backend, sparse_hub_attention)
from .numerics import RngStream, load_tensor, save_tensor, softmax_masked
from .rope import RopeLayout, apply_rotary, reallocate_temporal_band, rope_angles
from .simplex import (SimplexPool, VertexAssignment, agent_angles, build_isometry,
                      build_simplex_pool, complex_pair_distance, sample_assignment)
from .topology import (TopologySpec, build_layout, causal_hub_mask, compose_masks,
                       hub_mask, local_window_mask)

__version__ = "0.1.0"
