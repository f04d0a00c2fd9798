"""Word-level prompt embeddings with one trainable concept token."""

from __future__ import annotations

import torch
import torch.nn as nn

from .scene import CATEGORIES, PALETTE, VSTAR

MAX_TOKENS = 8
BOS = "<bos>"
EXTRA_WORDS = ("photo", "of", "a", "an", "the", "in", "on", "with", "white", "black",
               "room", "grass", "snow", "beach", "table", "small", "big")


class PromptError(ValueError):
    pass


class TextVocab(nn.Module):
    """Fixed word table plus a separate trainable ``V*`` row.

    Prompts become ``[<bos>, w1, ..., wk]`` padded to ``MAX_TOKENS``; the empty
    prompt is just ``<bos>``, which keeps attention over it well defined.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        super().__init__()
        words = [BOS, "<unk>"] + list(dict.fromkeys(list(EXTRA_WORDS) + list(CATEGORIES) + list(PALETTE)))
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        g = torch.Generator().manual_seed(seed)
        self.table = nn.Parameter(torch.randn(len(words), dim, generator=g) * 0.5)
        self.vstar = nn.Parameter(torch.randn(dim, generator=g) * 0.5)
        self.dim = dim

    def tokenize(self, prompt: str) -> list[str]:
        toks = [BOS] + prompt.replace(",", " ").split()
        if len(toks) > MAX_TOKENS:
            raise PromptError(f"prompt has {len(toks) - 1} words; at most {MAX_TOKENS - 1} allowed")
        return toks

    def encode(self, prompts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, MAX_TOKENS, dim) embeddings and the (B, MAX_TOKENS) valid-token mask."""
        ids, is_vstar, mask = [], [], []
        for p in prompts:
            toks = self.tokenize(p)
            row = [self.index.get(t.lower() if t != VSTAR else t, 1) for t in toks]
            pad = MAX_TOKENS - len(row)
            ids.append(row + [0] * pad)
            is_vstar.append([t == VSTAR for t in toks] + [False] * pad)
            mask.append([True] * len(row) + [False] * pad)
        ids = torch.tensor(ids)
        is_vstar = torch.tensor(is_vstar).unsqueeze(-1)
        emb = torch.where(is_vstar, self.vstar.expand(*ids.shape, self.dim), self.table[ids])
        return emb, torch.tensor(mask)
