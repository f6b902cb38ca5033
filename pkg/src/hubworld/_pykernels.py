"""Pure-numpy grouped-attention kernel (fallback backend).

Same packed-plan interface as the compiled module in _kernels.pyx. Groups are
(query set, gathered key set) pairs; softmax normalization is taken over
exactly the gathered keys, which is what guarantees numerical agreement with
the dense masked reference.
"""

import numpy as np


def grouped_attention(q, k, v, q_starts, q_idx, k_starts, k_idx, scale, out):
    """Attention per gather group; returns the attended (query, key) pair count.

    q, k, v, out: (heads, S, d) contiguous; index arrays are the packed plan.
    """
    pairs = 0
    for g in range(len(q_starts) - 1):
        qi = q_idx[q_starts[g]:q_starts[g + 1]]
        ki = k_idx[k_starts[g]:k_starts[g + 1]]
        if len(qi) == 0:
            continue
        qg = q[:, qi]                       # (heads, nq, d)
        kg = k[:, ki]
        vg = v[:, ki]
        logits = np.matmul(qg, kg.transpose(0, 2, 1)) * scale
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=-1, keepdims=True)
        out[:, qi] = np.matmul(w, vg)
        pairs += len(qi) * len(ki)
    return pairs
