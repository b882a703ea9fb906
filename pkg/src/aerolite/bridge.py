"""Bridging MLP: frozen image embedding -> P visual prefix tokens in the LM
embedding space.

h = ReLU(W1 v + b1); z = W2 h + b2; token_i = z + E_i with learned per-position
offsets E initialized to zero, so training starts in pure replication mode.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ValidationError


class BridgeMlp(nn.Module):
    def __init__(
        self,
        d_v: int,
        d_z: int,
        prefix_len: int = 8,
        d_h: int | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if prefix_len < 1:
            raise ValidationError("prefix_len must be >= 1")
        d_h = d_h or 2 * d_v
        self.d_v = d_v
        self.d_z = d_z
        self.prefix_len = prefix_len
        self.w1 = nn.Parameter(torch.empty(d_h, d_v, dtype=dtype))
        self.b1 = nn.Parameter(torch.zeros(d_h, dtype=dtype))
        self.w2 = nn.Parameter(torch.empty(d_z, d_h, dtype=dtype))
        self.b2 = nn.Parameter(torch.zeros(d_z, dtype=dtype))
        self.position_offsets = nn.Parameter(torch.zeros(prefix_len, d_z, dtype=dtype))
        # Kaiming-style uniform init scaled by fan-in
        nn.init.uniform_(self.w1, -math.sqrt(1.0 / d_v), math.sqrt(1.0 / d_v))
        nn.init.uniform_(self.w2, -math.sqrt(1.0 / d_h), math.sqrt(1.0 / d_h))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        """Map embeddings (..., d_v) to prefix tokens (..., P, d_z)."""
        if v.shape[-1] != self.d_v:
            raise ValidationError(f"expected embedding dim {self.d_v}, got {v.shape[-1]}")
        h = torch.relu(v @ self.w1.T + self.b1)
        z = h @ self.w2.T + self.b2
        return z.unsqueeze(-2) + self.position_offsets
