"""Two-tissue masked relational attention.

Each branch (node tokens, tumor tokens) runs intra-tissue multi-head
self-attention, then cross-tissue attention with queries from its own
tokens and keys/values from the other branch. Training mode recomputes
the cross attention under a random binary mask on the score matrix and
merges the masked result; inference merges the unmasked one. The pooled
masked/unmasked cross outputs form the pair the alignment loss pulls
together, which is what lets the unmasked inference path benefit from
the masked training path.

Masking convention: mask entry 0 = relation removed, scores get -inf
before softmax. A query row whose keys are all masked outputs the zero
vector (documented convention, not an error).
"""

import dataclasses

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError


@dataclasses.dataclass
class RelationMask:
    mask: np.ndarray  # (n_q, n_k) uint8, 0 = masked
    ratio: float

    @property
    def n_masked(self):
        return int(self.mask.size - self.mask.sum())


def sample_relation_mask(n_q, n_k, ratio, rng):
    """Uniform mask with exactly round(ratio * n_q * n_k) zeros.

    Resamples (up to 100 times) to avoid fully masked query rows when
    n_k * (1 - ratio) >= 1 makes that avoidable; the resampling keeps
    every cell position exchangeable, so per-position mask frequency
    stays uniform.
    """
    n_q, n_k = int(n_q), int(n_k)
    if n_q < 1 or n_k < 1:
        raise ConfigurationError("mask dims must be >= 1")
    ratio = float(ratio)
    if not (0.0 <= ratio < 1.0):
        raise ConfigurationError("mask ratio must lie in [0, 1)")
    n_masked = int(np.floor(ratio * n_q * n_k + 0.5))
    for _ in range(100):
        mask = np.ones(n_q * n_k, dtype=np.uint8)
        if n_masked:
            idx = rng.choice(n_q * n_k, size=n_masked, replace=False)
            mask[idx] = 0
        mask = mask.reshape(n_q, n_k)
        if mask.any(axis=1).all():
            break
    return RelationMask(mask=mask, ratio=ratio)


def _as_batched(tokens):
    if tokens.dim() == 2:
        return tokens[None], True
    if tokens.dim() == 3:
        return tokens, False
    raise ValueError("tokens must be (n, d) or (B, n, d)")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; heads split the model dim.

    forward(query_tokens, context_tokens=None, mask=None): context
    defaults to the queries (self-attention). Stores the last softmax
    weights and row-liveness for inspection.
    """

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights = None
        self.last_alive = None

    def forward(self, query_tokens, context_tokens=None, mask=None):
        x, squeeze = _as_batched(query_tokens)
        ctx = x if context_tokens is None else _as_batched(context_tokens)[0]
        b, n_q, d = x.shape
        n_k = ctx.shape[1]
        dh = d // self.heads

        def split(t):
            return t.view(b, -1, self.heads, dh).transpose(1, 2)  # (b, h, n, dh)

        q, k, v = split(self.q(x)), split(self.k(ctx)), split(self.v(ctx))
        scores = q @ k.transpose(-1, -2) / dh**0.5  # (b, h, n_q, n_k)

        if mask is not None:
            if isinstance(mask, RelationMask):
                mask = mask.mask
            visible = torch.as_tensor(np.asarray(mask) != 0, device=x.device)
            if visible.shape != (n_q, n_k):
                raise ConfigurationError(
                    f"mask shape {tuple(visible.shape)} does not match scores ({n_q}, {n_k})"
                )
            alive = visible.any(dim=1)  # (n_q,)
            # dead rows get uniform scores so softmax stays finite; their
            # outputs are zeroed after the output projection
            safe = visible | ~alive[:, None]
            scores = scores.masked_fill(~safe, float("-inf"))
        else:
            alive = torch.ones(n_q, dtype=torch.bool, device=x.device)

        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        self.last_alive = alive.detach()
        out = self.out((weights @ v).transpose(1, 2).reshape(b, n_q, d))
        out = out * alive.to(out.dtype)[None, :, None]
        return out[0] if squeeze else out


def multi_head_self_attention(tokens, params, mask=None):
    """Self-attention over one token set. params: a MultiHeadAttention."""
    return params(tokens, mask=mask)


class MaskedRelationalFusion(nn.Module):
    """The full two-branch block: intra MSA, cross MSA, mode-dependent merge."""

    def __init__(self, dim, heads=4):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.intra_node = MultiHeadAttention(dim, heads)
        self.intra_tumor = MultiHeadAttention(dim, heads)
        self.cross_node = MultiHeadAttention(dim, heads)   # node queries, tumor keys
        self.cross_tumor = MultiHeadAttention(dim, heads)  # tumor queries, node keys
        self.merge_node = nn.Linear(dim, dim)
        self.merge_tumor = nn.Linear(dim, dim)
        # instrumentation for the train-vs-infer path assertions
        self.train_calls = 0
        self.infer_calls = 0
        self.last_mode = None
        self.last_mask_counts = None

    def forward(self, tumor_tokens, node_tokens, mode, ratio=0.15, rng=None):
        if mode not in ("train", "infer"):
            raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
        x_t, _ = _as_batched(torch.as_tensor(tumor_tokens))
        x_n, _ = _as_batched(torch.as_tensor(node_tokens))
        squeeze = torch.as_tensor(tumor_tokens).dim() == 2

        x_n_s = self.intra_node(x_n)
        x_t_s = self.intra_tumor(x_t)
        c_n_u = self.cross_node(x_n_s, x_t_s)
        c_t_u = self.cross_tumor(x_t_s, x_n_s)

        align = {}
        if mode == "train":
            if rng is None:
                rng = np.random.default_rng()
            # draw order: node-branch mask, then tumor-branch mask
            m_n = sample_relation_mask(x_n.shape[1], x_t.shape[1], ratio, rng)
            m_t = sample_relation_mask(x_t.shape[1], x_n.shape[1], ratio, rng)
            c_n_m = self.cross_node(x_n_s, x_t_s, mask=m_n)
            c_t_m = self.cross_tumor(x_t_s, x_n_s, mask=m_t)
            align = {
                "gtvN": (c_n_u.mean(dim=-2), c_n_m.mean(dim=-2)),
                "gtvT": (c_t_u.mean(dim=-2), c_t_m.mean(dim=-2)),
            }
            c_n_sel, c_t_sel = c_n_m, c_t_m
            self.train_calls += 1
            self.last_mask_counts = (m_n.n_masked, m_t.n_masked)
        else:
            c_n_sel, c_t_sel = c_n_u, c_t_u
            self.infer_calls += 1
            self.last_mask_counts = None
        self.last_mode = mode

        z_n = self.merge_node((x_n_s + c_n_sel).mean(dim=-2))
        z_t = self.merge_tumor((x_t_s + c_t_sel).mean(dim=-2))
        if squeeze:
            z_t, z_n = z_t[0], z_n[0]
            align = {k: (u[0], m[0]) for k, (u, m) in align.items()}
        return z_t, z_n, align


def mmrl_forward(x_t_tokens, x_n_tokens, params, mode, ratio=0.15, rng=None):
    """Functional entry point; params is a MaskedRelationalFusion."""
    return params(x_t_tokens, x_n_tokens, mode=mode, ratio=ratio, rng=rng)


def alignment_loss(cu, cm):
    """Mean squared error over all entries of the pooled pair."""
    cu = torch.as_tensor(cu)
    cm = torch.as_tensor(cm)
    if cu.shape != cm.shape:
        raise ValueError(f"shape mismatch {tuple(cu.shape)} vs {tuple(cm.shape)}")
    return ((cu - cm) ** 2).mean()
