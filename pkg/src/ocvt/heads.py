"""Classification heads: summary-set attention module producing the object
CLS vector, the two MLP classifiers, and probability-level fusion."""

from __future__ import annotations

import torch
from torch import nn

from .attention import SelfAttentionBlock


class ClassificationModule(nn.Module):
    """Self-attention over the summary set plus one learnable CLS query."""

    def __init__(self, dim: int = 64, num_layers: int = 2, num_heads: int = 4,
                 ffn_ratio: int = 4, dropconnect: float = 0.0):
        super().__init__()
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(dim, num_heads, ffn_ratio, dropconnect) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, summaries: torch.Tensor) -> torch.Tensor:
        """summaries: (B, O+K, C) -> c_obj (B, C)."""
        B = summaries.shape[0]
        x = torch.cat([self.cls.to(summaries.dtype).expand(B, 1, -1), summaries], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[:, 0]


class MlpClassifier(nn.Module):
    """Two linear layers with a tanh between them."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int | None = None):
        super().__init__()
        self.in_dim = in_dim
        self.hidden = hidden or in_dim
        self.fc1 = nn.Linear(in_dim, self.hidden)
        self.act = nn.Tanh()
        self.fc2 = nn.Linear(self.hidden, num_classes)

    @property
    def num_classes(self) -> int:
        return self.fc2.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))

    def reinit_output(self, num_classes: int):
        """Replace the output layer (few-shot transfer to a new class set)."""
        self.fc2 = nn.Linear(self.hidden, num_classes)


def fuse_probabilities(logits_f1: torch.Tensor, logits_f2: torch.Tensor) -> torch.Tensor:
    """Average the class probabilities of the two classifiers."""
    return (logits_f1.softmax(dim=-1) + logits_f2.softmax(dim=-1)) / 2.0
