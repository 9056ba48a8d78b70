"""Text-guided differentiable frame selection.

Pipeline: mean-pool per-patch channels, embed each frame's pooled feature
vector, score frames (per temporal segment in the segmented design, or
per-frame keep/drop in the free-form design), draw a Gumbel selection, and
fuse the masked visual tokens with the question text through cross-attention.

Selection is trained through the Gumbel-Softmax relaxation; the straight-
through variant keeps the hard one-hot mask in the forward pass while
gradients follow the relaxed weights. Inference uses the noiseless argmax,
which agrees with the tau=0.01 soft mask to ~1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

SEGMENTED = "segmented"
FREE_FORM = "free_form"


@dataclass
class FramePrompterConfig:
    frames: int = 32            # T, input frames
    segments: int = 4           # S, also the selected-frame count (segmented design)
    patches: int = 4            # N, patch tokens per frame
    channels: int = 8           # C, channels per patch from the visual encoder
    d_model: int = 64
    design: str = SEGMENTED
    tau_start: float = 1.0
    tau_end: float = 0.01
    straight_through: bool = True
    embed_hidden: int = 32
    num_heads: int = 1

    def __post_init__(self):
        if self.design not in (SEGMENTED, FREE_FORM):
            raise ValueError(f"unknown design {self.design!r}")
        if not 1 <= self.segments <= self.frames:
            raise ValueError(f"need frames >= segments >= 1, got T={self.frames}, S={self.segments}")
        if self.design == SEGMENTED and self.frames % self.segments != 0:
            raise ValueError(f"segmented design needs segments to divide frames: T={self.frames}, S={self.segments}")
        if self.tau_end <= 0:
            raise ValueError("tau_end must be positive")
        if self.tau_start < self.tau_end:
            raise ValueError("tau_start must be >= tau_end")

    @property
    def frames_per_segment(self) -> int:
        return self.frames // self.segments


@dataclass
class FramePrompterParams:
    """Learnable state: frame embedding, selection head, text-guidance attention."""

    embed: nn.MlpParams
    select_head: nn.MlpParams
    guide_attn: nn.AttentionParams

    @classmethod
    def init(cls, cfg: FramePrompterConfig, rng: np.random.Generator) -> "FramePrompterParams":
        n, h = cfg.patches, cfg.embed_hidden
        embed = nn.MlpParams([
            nn.fc_step(n, h, rng, bias=False),
            nn.ln_step(h),
            nn.act_step("relu"),
            nn.fc_step(h, n, rng, bias=False),
        ])
        if cfg.design == SEGMENTED:
            # small init keeps the initial per-segment distribution near uniform
            head = nn.MlpParams([nn.fc_step(cfg.frames_per_segment * n, cfg.frames_per_segment, rng, scale=0.01)])
        else:
            head = nn.MlpParams([nn.fc_step(n, 2, rng, scale=0.01)])
        guide = nn.AttentionParams.init(cfg.d_model, cfg.num_heads, rng)
        return cls(embed=embed, select_head=head, guide_attn=guide)

    def named(self, prefix: str) -> dict:
        out = {}
        out.update(self.embed.named(f"{prefix}.embed"))
        out.update(self.select_head.named(f"{prefix}.select"))
        out.update(self.guide_attn.named(f"{prefix}.guide"))
        return out


@dataclass
class SelectionMask:
    """One sampled (or argmax) frame selection for a batch.

    hard: [B, T] 0/1 array; soft: the differentiable [B, T] mask when a
    relaxed sample exists (values equal `hard` bitwise under straight-
    through); per_segment: [B, S, T/S] segment-local weights (segmented
    design only); selected: per-row sorted frame indices.
    """

    hard: np.ndarray
    selected: list
    soft: Tensor | None = None
    per_segment: Tensor | None = None
    per_segment_hard: np.ndarray | None = None

    def mask_tensor(self) -> Tensor:
        """The [B, T] mask to weight attention keys with."""
        return self.soft if self.soft is not None else Tensor(self.hard)


def pool_and_embed(x: Tensor, params: FramePrompterParams, cfg: FramePrompterConfig) -> Tensor:
    """[B, T, N, C] -> mean over channels -> per-frame MLP -> [B, T, N]."""
    if x.shape[1:] != (cfg.frames, cfg.patches, cfg.channels):
        raise ValueError(f"expected [B, {cfg.frames}, {cfg.patches}, {cfg.channels}], got {x.shape}")
    pooled = T.mean_axis(x, axis=3)
    return nn.mlp_apply(params.embed, pooled)


def segment_logits(embedded: Tensor, params: FramePrompterParams, cfg: FramePrompterConfig) -> Tensor:
    """[B, T, N] -> contiguous temporal chunks -> FC -> [B, S, T/S] logits."""
    if cfg.frames % cfg.segments != 0:
        raise ValueError(f"segments {cfg.segments} do not divide frames {cfg.frames}")
    b = embedded.shape[0]
    fps = cfg.frames_per_segment
    chunks = T.reshape(embedded, (b, cfg.segments, fps * cfg.patches))
    return nn.mlp_apply(params.select_head, chunks)


def _gumbel(rng: np.random.Generator, shape, noise: np.ndarray | None) -> np.ndarray:
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != tuple(shape):
            raise ValueError(f"noise shape {noise.shape} != logits shape {tuple(shape)}")
        return noise
    if rng is None:
        raise ValueError("rng is required when no noise override is given")
    return rng.gumbel(size=shape)


def _assemble_segmented(one_hot_seg: np.ndarray, cfg: FramePrompterConfig):
    """Per-segment one-hot [B, S, T/S] -> flat hard mask [B, T] + indices."""
    b = one_hot_seg.shape[0]
    hard = one_hot_seg.reshape(b, cfg.frames)
    pick = one_hot_seg.argmax(axis=2)  # [B, S]
    offsets = np.arange(cfg.segments) * cfg.frames_per_segment
    indices = pick + offsets  # strictly increasing across segments
    selected = [sorted(int(i) for i in row) for row in indices]
    return hard, selected


def gumbel_sample_hard(logits: Tensor, rng: np.random.Generator | None,
                       cfg: FramePrompterConfig, noise: np.ndarray | None = None) -> SelectionMask:
    """One hard frame per segment via Gumbel-max over log softmax(logits).

    Pass `noise=0` arrays to get the plain per-segment argmax (the inference
    path). Ties break toward the lowest index.
    """
    data = logits.data
    if not np.all(np.isfinite(data)):
        raise ValueError("gumbel_sample_hard requires finite logits")
    g = _gumbel(rng, data.shape, noise)
    shifted = data - data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    z = logp + g
    pick = z.argmax(axis=-1)
    one_hot = np.zeros_like(data)
    np.put_along_axis(one_hot, pick[..., None], 1.0, axis=-1)
    hard, selected = _assemble_segmented(one_hot, cfg)
    return SelectionMask(hard=hard, selected=selected, per_segment_hard=one_hot)


def gumbel_sample_soft(logits: Tensor, tau: float, rng: np.random.Generator | None,
                       cfg: FramePrompterConfig, straight_through: bool = True,
                       noise: np.ndarray | None = None) -> SelectionMask:
    """Relaxed per-segment selection: softmax((log p + g) / tau).

    With straight_through the forward mask equals the hard one-hot from the
    same noise draw, while gradients flow through the relaxed weights.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    g = _gumbel(rng, logits.shape, noise)
    hard_mask = gumbel_sample_hard(logits.detach(), None, cfg, noise=g)

    logp = T.log_softmax(logits, axis=-1)
    z = T.add(logp, Tensor(g)) * (1.0 / tau)
    soft_seg = T.softmax(z, axis=-1)  # [B, S, T/S]
    b = logits.shape[0]
    soft_flat = T.reshape(soft_seg, (b, cfg.frames))

    if straight_through:
        seg = T.add(Tensor(hard_mask.per_segment_hard), T.sub(soft_seg, soft_seg.detach()))
        flat = T.add(Tensor(hard_mask.hard), T.sub(soft_flat, soft_flat.detach()))
    else:
        seg, flat = soft_seg, soft_flat
    return SelectionMask(hard=hard_mask.hard, selected=hard_mask.selected,
                         soft=flat, per_segment=seg,
                         per_segment_hard=hard_mask.per_segment_hard)


def tau_schedule(step: int, total_steps: int, cfg: FramePrompterConfig) -> float:
    """Geometric anneal tau_start -> tau_end over the training run."""
    if total_steps == 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** (step / total_steps)


def free_form_mask(embedded: Tensor, params: FramePrompterParams, cfg: FramePrompterConfig,
                   tau: float, rng: np.random.Generator | None,
                   straight_through: bool = True, noise: np.ndarray | None = None) -> SelectionMask:
    """Per-frame keep/drop relaxation (class 1 = keep); variable-size pick."""
    if cfg.design != FREE_FORM:
        raise ValueError("free_form_mask requires the free_form design")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits2 = nn.mlp_apply(params.select_head, embedded)  # [B, T, 2]
    g = _gumbel(rng, logits2.shape, noise)
    b = embedded.shape[0]

    z_data = logits2.data - logits2.data.max(axis=-1, keepdims=True)
    logp_data = z_data - np.log(np.exp(z_data).sum(axis=-1, keepdims=True))
    hard = ((logp_data + g).argmax(axis=-1) == 1).astype(np.float64)  # [B, T]
    selected = [sorted(int(i) for i in np.flatnonzero(row)) for row in hard]

    logp = T.log_softmax(logits2, axis=-1)
    soft2 = T.softmax(T.add(logp, Tensor(g)) * (1.0 / tau), axis=-1)
    keep = T.reshape(T.narrow(soft2, 2, 1, 1), (b, cfg.frames))
    if straight_through:
        keep = T.add(Tensor(hard), T.sub(keep, keep.detach()))
    return SelectionMask(hard=hard, selected=selected, soft=keep)


def apply_mask_and_fuse(x_tokens: Tensor, mask: SelectionMask, text: Tensor,
                        params: FramePrompterParams, cfg: FramePrompterConfig,
                        hard: bool = False) -> Tensor:
    """CrossAttn(text queries <- masked visual tokens) -> [B, Lt, d_model].

    Hard mode gathers the selected frames' patch tokens as keys/values; soft
    mode keeps every frame and applies the mask as additive log-weights on
    the attention logits (exact key removal in the hard limit).
    """
    b, t, n, d = x_tokens.shape
    if t != cfg.frames or n != cfg.patches or d != cfg.d_model:
        raise ValueError(f"expected [B, {cfg.frames}, {cfg.patches}, {cfg.d_model}] tokens, got {x_tokens.shape}")
    if hard:
        counts = {len(row) for row in mask.selected}
        if 0 in counts:
            raise ValueError("no attendable keys: a batch row selected zero frames")
        if len(counts) == 1:
            idx = np.array(mask.selected)
            gathered = T.gather_frames(x_tokens, idx)  # [B, S, N, d]
            kv = T.reshape(gathered, (b, idx.shape[1] * n, d))
            return nn.cross_attention(params.guide_attn, text, kv)
        # variable-size selections (free-form design): a 0/1 key mask removes
        # unselected frames exactly, so this equals a per-row gather
        mask = SelectionMask(hard=mask.hard, selected=mask.selected, soft=Tensor(mask.hard))
    weights = mask.mask_tensor()  # [B, T]
    per_token = T.reshape(T.broadcast_to(T.reshape(weights, (b, t, 1)), (b, t, n)), (b, t * n))
    kv = T.reshape(x_tokens, (b, t * n, d))
    return nn.cross_attention(params.guide_attn, text, kv, key_mask=per_token)


def select_frames(video_features: Tensor, visual_tokens: Tensor, text: Tensor,
                  params: FramePrompterParams, cfg: FramePrompterConfig,
                  mode: str, tau: float | None = None,
                  rng: np.random.Generator | None = None,
                  noise: np.ndarray | None = None):
    """End-to-end selection: returns (fused [B, Lt, d_model], SelectionMask).

    mode "train": relaxed Gumbel sample at `tau` (straight-through per
    config), soft fusion over all frames. mode "infer": noiseless argmax,
    hard gather fusion. mode "soft_infer": noiseless relaxed mask at `tau`
    (no Gumbel noise), soft fusion. Both inference modes are deterministic.
    """
    if mode not in ("train", "infer", "soft_infer"):
        raise ValueError(f"mode must be 'train', 'infer' or 'soft_infer', got {mode!r}")
    embedded = pool_and_embed(video_features, params, cfg)
    needs_tau = mode in ("train", "soft_infer")
    if needs_tau and tau is None:
        raise ValueError(f"{mode} mode requires tau")

    if cfg.design == SEGMENTED:
        logits = segment_logits(embedded, params, cfg)
        if mode == "train":
            mask = gumbel_sample_soft(logits, tau, rng, cfg,
                                      straight_through=cfg.straight_through, noise=noise)
        elif mode == "soft_infer":
            mask = gumbel_sample_soft(logits.detach(), tau, None, cfg,
                                      straight_through=False, noise=np.zeros(logits.shape))
        else:
            mask = gumbel_sample_hard(logits.detach(), None, cfg, noise=np.zeros(logits.shape))
    else:
        zero = np.zeros((embedded.shape[0], cfg.frames, 2))
        if mode == "train":
            mask = free_form_mask(embedded, params, cfg, tau, rng,
                                  straight_through=cfg.straight_through, noise=noise)
        elif mode == "soft_infer":
            mask = free_form_mask(embedded, params, cfg, tau, None,
                                  straight_through=False, noise=zero)
        else:
            mask = free_form_mask(embedded, params, cfg, tau=1.0, rng=None,
                                  straight_through=True, noise=zero)

    fused = apply_mask_and_fuse(visual_tokens, mask, text, params, cfg, hard=(mode == "infer"))
    return fused, mask
