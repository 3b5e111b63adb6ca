"""Masked-attention mask transformer for end-to-end diarization.

    X (B, T, D') --ConvDown--> (B, T10, D) --Conformer--> E_low --ConvUp--> E (B, T, D)

    Q(0) --[masked cross-attn -> self-attn -> FF]--> Q(1) ... Q(L)
    logits(l) = E . MLP(Q(l))^T       (B, T, N)
    probs(l)  = sigmoid(Lin(Q(l)))    (B, N)

T10 = ceil(T / 10). Batches are zero-padded to the longest recording and carry
per-recording lengths; padded frames never influence valid outputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diar_core import FrameMask

DOWN_STRIDE = 10
UP_KERNELS = (3, 5)
UP_STRIDES = (2, 5)


@dataclass
class ModelConfig:
    in_dim: int = 23
    d_model: int = 256
    n_heads: int = 4
    conformer_layers: int = 6
    conformer_ff: int = 1024
    conv_kernel: int = 49
    down_kernel: int = 15
    decoder_layers: int = 6
    decoder_ff: int = 1024
    n_queries: int = 50
    mask_hidden: int = 0  # 0 -> d_model
    backbone_dropout: float = 0.1
    query_dropout: float = 0.0
    masked_attention: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type == "int" and f.name != "mask_hidden" and value < 1:
                raise ValueError(f"{f.name} must be positive")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InferenceConfig:
    class_threshold: float = 0.8
    mask_threshold: float = 0.5

    def __post_init__(self):
        for name in ("class_threshold", "mask_threshold"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")


def low_length(n_frames: int) -> int:
    return -(-n_frames // DOWN_STRIDE)


def frame_validity(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; ``visible`` False entries get weight exactly 0."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.last_weights = None

    def forward(self, query, key, value, visible=None, keep_weights=False):
        # query (B, Nq, D); key/value (B, Nk, D); visible broadcastable to (B, Nq, Nk)
        batch, n_q, d_model = query.shape
        n_k = key.shape[1]
        d_head = d_model // self.n_heads
        q = self.q_proj(query).view(batch, n_q, self.n_heads, d_head).transpose(1, 2)
        k = self.k_proj(key).view(batch, n_k, self.n_heads, d_head).transpose(1, 2)
        v = self.v_proj(value).view(batch, n_k, self.n_heads, d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d_head)
        if visible is not None:
            scores = scores.masked_fill(~visible[:, None], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        if keep_weights:
            self.last_weights = weights.detach()
        out = self.dropout(weights) @ v
        out = out.transpose(1, 2).reshape(batch, n_q, d_model)
        return self.out_proj(out)


class ConvDownsample(nn.Module):
    """Depthwise-separable strided convolution to 1/10 resolution, then LayerNorm and dropout."""

    def __init__(self, in_dim: int, d_model: int, kernel: int = 15, dropout: float = 0.1):
        super().__init__()
        self.kernel = kernel
        self.depthwise = nn.Conv1d(in_dim, in_dim, kernel, stride=DOWN_STRIDE, groups=in_dim)
        self.pointwise = nn.Conv1d(in_dim, d_model, 1)
        self.norm = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, valid):
        # window of output i is centred on input frame 10 i
        n_frames = x.shape[1]
        n_out = low_length(n_frames)
        left = self.kernel // 2
        right = max((n_out - 1) * DOWN_STRIDE + self.kernel - n_frames - left, 0)
        h = (x * valid[..., None]).transpose(1, 2)
        h = F.pad(h, (left, right))
        h = self.pointwise(self.depthwise(h))[:, :, :n_out].transpose(1, 2)
        return self.dropout(self.norm(h))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.lin1 = nn.Linear(d_model, d_ff)
        self.lin2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = self.dropout(F.silu(self.lin1(self.norm(x))))
        return self.dropout(self.lin2(h))


class ConvModule(nn.Module):
    def __init__(self, d_model: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pointwise_in = nn.Conv1d(d_model, 2 * d_model, 1)
        self.depthwise = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2, groups=d_model)
        # LayerNorm in place of BatchNorm keeps padding out of the statistics
        self.conv_norm = nn.LayerNorm(d_model)
        self.pointwise_out = nn.Conv1d(d_model, d_model, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, valid):
        h = self.pointwise_in(self.norm(x).transpose(1, 2))
        h = F.glu(h, dim=1) * valid[:, None, :]
        h = self.depthwise(h).transpose(1, 2)
        h = F.silu(self.conv_norm(h)).transpose(1, 2)
        return self.dropout(self.pointwise_out(h).transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, p = cfg.d_model, cfg.backbone_dropout
        self.ff1 = FeedForward(d, cfg.conformer_ff, p)
        self.attn_norm = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.n_heads)
        self.attn_dropout = nn.Dropout(p)
        self.conv = ConvModule(d, cfg.conv_kernel, p)
        self.ff2 = FeedForward(d, cfg.conformer_ff, p)
        self.final_norm = nn.LayerNorm(d)

    def forward(self, x, valid):
        keys_visible = valid[:, None, :]
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        x = x + self.attn_dropout(self.attn(h, h, h, keys_visible))
        x = x + self.conv(x, valid)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x) * valid[..., None]


class ConvUpsample(nn.Module):
    """Two transposed-conv + LayerNorm + GELU blocks (x2 then x5), cropped to T frames."""

    def __init__(self, d_model: int):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for kernel, stride in zip(UP_KERNELS, UP_STRIDES):
            # output length is exactly stride * input length
            padding = (kernel - stride + 1) // 2
            output_padding = stride - kernel + 2 * padding
            self.convs.append(
                nn.ConvTranspose1d(d_model, d_model, kernel, stride, padding=padding, output_padding=output_padding)
            )
            self.norms.append(nn.LayerNorm(d_model))

    def forward(self, e_low, low_lengths, target_len: int):
        h = e_low
        lengths = low_lengths
        for conv, norm, stride in zip(self.convs, self.norms, UP_STRIDES):
            valid = frame_validity(lengths, h.shape[1])
            h = conv((h * valid[..., None]).transpose(1, 2)).transpose(1, 2)
            h = F.gelu(norm(h))
            lengths = lengths * stride
        if target_len > h.shape[1]:
            raise ValueError(f"cannot upsample {e_low.shape[1]} frames to {target_len}")
        return h[:, :target_len]


class MaskMLP(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(d_model, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, d_model),
        )

    def forward(self, q):
        return self.layers(q)


def mask_logits(mlp: MaskMLP, queries: torch.Tensor, e_full: torch.Tensor) -> torch.Tensor:
    """(B, T, N) logits E . MLP(Q)^T."""
    return torch.einsum("btd,bnd->btn", e_full, mlp(queries))


def interpolate_logits(logits: torch.Tensor, lengths: torch.Tensor, out_lengths: torch.Tensor | None = None):
    """Linearly resample each recording's (T_b, N) logits to ``out_lengths[b]`` frames.

    ``out_lengths`` defaults to ceil(T_b / 10). Sample-centre alignment: output
    frame k sits at source position (k + 0.5) * T_b / out_b - 0.5, clamped to the
    first/last frame. Returns (B, max(out_lengths), N); entries past each
    recording's own output length are undefined.
    """
    batch, n_frames, n_queries = logits.shape
    if out_lengths is None:
        out_lengths = low_length_tensor(lengths)
    t_len = lengths.to(logits.dtype)
    n_out = int(out_lengths.max())
    k = torch.arange(n_out, dtype=logits.dtype, device=logits.device)[None, :]
    pos = (k + 0.5) * (t_len / out_lengths.to(logits.dtype))[:, None] - 0.5
    pos = torch.minimum(pos.clamp(min=0.0), (t_len - 1)[:, None])
    i0 = pos.floor().long()
    i1 = torch.minimum(i0 + 1, (lengths - 1)[:, None])
    frac = (pos - i0.to(logits.dtype))[..., None]
    g0 = torch.gather(logits, 1, i0[..., None].expand(batch, n_out, n_queries))
    g1 = torch.gather(logits, 1, i1[..., None].expand(batch, n_out, n_queries))
    return g0 * (1 - frac) + g1 * frac


def downsample_mask(logits: torch.Tensor, lengths: torch.Tensor, fallback: bool = True) -> torch.Tensor:
    """(B, N, T10) visibility: interpolated logit > 0, restricted to valid low frames.

    A query that would see no frame at all is given every valid frame instead.
    """
    with torch.no_grad():
        low = interpolate_logits(logits, lengths)
        low_valid = frame_validity(low_length_tensor(lengths), low.shape[1])
        visible = (low > 0).transpose(1, 2) & low_valid[:, None, :]
        if fallback:
            empty = ~visible.any(-1, keepdim=True)
            visible = torch.where(empty, low_valid[:, None, :].expand_as(visible), visible)
    return visible


def low_length_tensor(lengths: torch.Tensor) -> torch.Tensor:
    return torch.div(lengths + DOWN_STRIDE - 1, DOWN_STRIDE, rounding_mode="floor")


class QueryDecoderLayer(nn.Module):
    """Transformer decoder layer with cross-attention ahead of self-attention (post-norm)."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.cross_norm = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.self_norm = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model))
        self.ff_norm = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, q, pos, e_low, visible, keep_weights=False):
        h = self.cross_attn(q + pos, e_low, e_low, visible, keep_weights=keep_weights)
        q = self.cross_norm(q + self.dropout(h))
        h = self.self_attn(q + pos, q + pos, q, keep_weights=keep_weights)
        q = self.self_norm(q + self.dropout(h))
        return self.ff_norm(q + self.dropout(self.ff(q)))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Conv1d, nn.ConvTranspose1d)):
        nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class EENDM2F(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d = cfg.d_model
        self.backbone = nn.ModuleDict(
            {
                "down": ConvDownsample(cfg.in_dim, d, cfg.down_kernel, cfg.backbone_dropout),
                "conformer": nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.conformer_layers)),
                "up": ConvUpsample(d),
            }
        )
        self.mask_mlp = MaskMLP(d, cfg.mask_hidden or d)
        self.decoder = nn.ModuleList(
            QueryDecoderLayer(d, cfg.n_heads, cfg.decoder_ff, cfg.query_dropout) for _ in range(cfg.decoder_layers)
        )
        self.class_head = nn.Linear(d, 1)
        self.apply(_init_weights)
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, d))
        self.query_pos = nn.Parameter(torch.randn(cfg.n_queries, d))

    def encode(self, x, lengths):
        """Return (e_low, e_full, low_lengths)."""
        valid = frame_validity(lengths, x.shape[1])
        h = self.backbone["down"](x, valid)
        low_lengths = low_length_tensor(lengths)
        low_valid = frame_validity(low_lengths, h.shape[1])
        h = h * low_valid[..., None]
        for block in self.backbone["conformer"]:
            h = block(h, low_valid)
        e_full = self.backbone["up"](h, low_lengths, x.shape[1]) * valid[..., None]
        return h, e_full, low_lengths

    def classify(self, queries):
        return torch.sigmoid(self.class_head(queries)).squeeze(-1)

    def forward(self, x, lengths=None, attn_masks=None, keep_weights=False):
        """Run the model on a (B, T, D') or (T, D') feature batch.

        Returns a list of L + 1 (logits (B, T, N), class_probs (B, N)) pairs, one
        per query set Q(0)..Q(L). ``attn_masks`` may supply the L visibility masks
        (B, N, T10) to use instead of the thresholded predictions.
        """
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        batch, n_frames, _ = x.shape
        if n_frames == 0:
            raise ValueError("cannot run on an empty feature sequence")
        if lengths is None:
            lengths = torch.full((batch,), n_frames, dtype=torch.long, device=x.device)
        lengths = torch.as_tensor(lengths, dtype=torch.long, device=x.device)
        e_low, e_full, low_lengths = self.encode(x, lengths)

        q = self.queries.unsqueeze(0).expand(batch, -1, -1)
        pos = self.query_pos.unsqueeze(0)
        low_valid = frame_validity(low_lengths, e_low.shape[1])
        self.last_masks = []
        outputs = []
        for layer_idx in range(len(self.decoder) + 1):
            logits = mask_logits(self.mask_mlp, q, e_full)
            outputs.append((logits, self.classify(q)))
            if layer_idx == len(self.decoder):
                break
            if attn_masks is not None:
                visible = attn_masks[layer_idx]
            elif self.cfg.masked_attention:
                visible = downsample_mask(logits, lengths)
            else:
                visible = low_valid[:, None, :].expand(batch, q.shape[1], -1)
            self.last_masks.append(visible)
            q = self.decoder[layer_idx](q, pos, e_low, visible, keep_weights)
        if squeeze:
            outputs = [(lg[0], p[0]) for lg, p in outputs]
        return outputs

    @torch.no_grad()
    def infer(self, x, cfg: InferenceConfig | None = None, frame_rate: int = 100) -> tuple[FrameMask, int]:
        """Diarize one (T, D') feature sequence; returns (mask T x S_hat, S_hat)."""
        cfg = cfg or InferenceConfig()
        was_training = self.training
        self.eval()
        try:
            x = torch.as_tensor(np.asarray(x), dtype=self.queries.dtype)
            logits, probs = self.forward(x)[-1]
        finally:
            self.train(was_training)
        data = binarize_outputs(logits.cpu().numpy(), probs.cpu().numpy(), cfg)
        return FrameMask(data, frame_rate), data.shape[1]

    @torch.no_grad()
    def infer_batch(self, x, lengths, cfg: InferenceConfig | None = None) -> list[np.ndarray]:
        cfg = cfg or InferenceConfig()
        logits, probs = self.forward(x, lengths)[-1]
        logits = logits.cpu().numpy()
        probs = probs.cpu().numpy()
        return [binarize_outputs(logits[b, : int(n)], probs[b], cfg) for b, n in enumerate(lengths)]


def binarize_outputs(logits: np.ndarray, class_probs: np.ndarray, cfg: InferenceConfig) -> np.ndarray:
    """Keep queries with class probability > threshold, binarize their activity probabilities."""
    keep = np.asarray(class_probs) > cfg.class_threshold
    probs = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)[:, keep]))
    return probs > cfg.mask_threshold


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
