"""Miniature query-denoising transformer decoder.

Learnable detection queries are concatenated with denoising (DN) queries built
from an object list.  Self-attention visibility between the two parts is
switchable:

* ``NoMask_QDN``  - every query sees every other query,
* ``DnDetrMask``  - learnable queries cannot see DN queries, and each DN group
  sees only itself and the learnable queries,
* ``NoDN``        - no DN queries at all.

Cross-attention runs over the flattened multi-view feature grid with an
optional per-key log-Gaussian bias shared by all queries and heads.  Keys and
queries carry Fourier encodings of viewing direction, and each cross-attention
head adds a learnable multiple of a fixed bearing-alignment kernel between a
query's reference center and every key ray.  Learnable references start on
equal-area rings around the ego and box centers are refined in polar form.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraRig, ray_grid
from .io import atomic_write_bytes
from .masks import EPS, shared_mask_for_objects
from .matching import (
    DataError,
    MatchCost,
    box_l1,
    dn_reconstruction_loss,
    gt_boxes,
    hungarian_assign,
    match_cost_matrix,
    set_prediction_loss,
)
from .scene import Bounds, N_CLASSES, ObjectList, ObjectRecord, SourceTag, wrap_angle


def polar_anchors(n: int, bounds: Bounds) -> np.ndarray:
    """Planar anchors on equal-area rings around the ego, in normalized bounds coordinates."""
    lo, hi = np.asarray(bounds.lo[:2]), np.asarray(bounds.hi[:2])
    radius = 0.5 * float(np.min(hi - lo))
    n_rings = max(1, int(round(math.sqrt(n / 3))))
    per = np.full(n_rings, n // n_rings)
    per[: n - per.sum()] += 1
    pts = []
    for k, m in enumerate(per):
        r = radius * math.sqrt((k + 0.5) / n_rings)
        off = 0.5 * (k % 2)
        for t in range(m):
            a = 2 * math.pi * (t + off) / m
            pts.append((r * math.cos(a), r * math.sin(a)))
    pts = (np.asarray(pts) - lo) / (hi - lo)
    return np.clip(pts, 0.02, 0.98)


class MaskMode(str, enum.Enum):
    NOMASK_QDN = "NoMask_QDN"
    DNDETR = "DnDetrMask"
    NODN = "NoDN"


class NumericFault(ArithmeticError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    n_learnable_queries: int = 60
    n_dn_groups: int = 3
    mask_mode: MaskMode = MaskMode.NOMASK_QDN
    use_gaussian_bias: bool = False
    dn_jitter_ratio: float = 0.02
    n_classes: int = N_CLASSES
    n_channels: int = 16
    ffn_dim: int = 0  # 0 means 2 * d_model
    mask_sigma: float = 2.0
    mask_eps: float = EPS
    score_threshold: float = 0.3
    nms_distance: float = 1.0
    pe_frequencies: int = 5
    spatial_prior: float = 8.0  # initial per-head weight of the bearing kernel, 0 disables

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_dn_groups < 0:
            raise ValueError("n_dn_groups must be >= 0")
        if self.pe_frequencies < 1:
            raise ValueError("pe_frequencies must be >= 1")
        object.__setattr__(self, "mask_mode", MaskMode(self.mask_mode))

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def uses_dn(self) -> bool:
        return self.mask_mode is not MaskMode.NODN and self.n_dn_groups > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_mode"] = self.mask_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class DnQueryBatch:
    """Jittered object-list states, one row per (group, record)."""
    boxes: np.ndarray  # (n, 7): normalized center, size (m), yaw
    labels: np.ndarray  # (n,) possibly corrupted class ids
    targets: np.ndarray  # (n,) gt index or -1 for false positives
    groups: np.ndarray  # (n,) group id

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1 if len(self) else 0

    @classmethod
    def empty(cls) -> "DnQueryBatch":
        return cls(np.zeros((0, 7)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, np.int64))


def encode_dn_queries(objects: ObjectList, targets: Sequence[int] | None, n_groups: int,
                      bounds: Bounds, rng: np.random.Generator | None = None,
                      jitter_ratio: float = 0.02) -> DnQueryBatch:
    """Replicate an object list into ``n_groups`` denoising groups.

    Group 0 carries the list verbatim; later groups get extra Gaussian jitter of
    ``jitter_ratio`` times each size dimension (yaw: times pi).
    """
    if n_groups < 1:
        raise ValueError("need at least one denoising group")
    n = len(objects)
    if n == 0:
        return DnQueryBatch.empty()
    a = objects.arrays()
    targets = np.full(n, -1, np.int64) if targets is None else np.asarray(targets, np.int64)
    rng = rng if rng is not None else np.random.default_rng(0)
    boxes, labels, tgt, groups = [], [], [], []
    for g in range(n_groups):
        center, size, yaw = a["center"].copy(), a["size"].copy(), a["yaw"].copy()
        if g > 0 and jitter_ratio > 0:
            center = center + jitter_ratio * size * rng.standard_normal((n, 3))
            size = np.maximum(size + jitter_ratio * size * rng.standard_normal((n, 3)), 0.1)
            yaw = yaw + jitter_ratio * math.pi * rng.standard_normal(n)
        c = np.clip(bounds.normalize(center), 0.0, 1.0)
        boxes.append(np.concatenate([c, size, yaw[:, None]], axis=1))
        labels.append(a["class_id"])
        tgt.append(targets)
        groups.append(np.full(n, g, np.int64))
    return DnQueryBatch(np.concatenate(boxes), np.concatenate(labels),
                        np.concatenate(tgt), np.concatenate(groups))


def build_self_attention_mask(n_learnable: int, dn: DnQueryBatch | None,
                              mode: MaskMode) -> np.ndarray:
    """Boolean visibility matrix, ``True`` where the row query may attend the column."""
    mode = MaskMode(mode)
    n_dn = 0 if dn is None or mode is MaskMode.NODN else len(dn)
    n = n_learnable + n_dn
    vis = np.ones((n, n), dtype=bool)
    if mode is MaskMode.DNDETR and n_dn:
        vis[:n_learnable, n_learnable:] = False
        g = dn.groups
        vis[n_learnable:, n_learnable:] = g[:, None] == g[None, :]
    return vis


def sine_embedding(pos: torch.Tensor, dims_per_axis: int, temperature: float = 1e4) -> torch.Tensor:
    """Sinusoidal encoding of normalized coordinates, ``(..., 3) -> (..., 3 * dims_per_axis)``."""
    half = dims_per_axis // 2
    i = torch.arange(half, dtype=pos.dtype, device=pos.device)
    dim_t = temperature ** (2.0 * i / dims_per_axis)
    x = pos[..., :, None] * (2.0 * math.pi) / dim_t
    emb = torch.cat([x.sin(), x.cos()], dim=-1)
    return emb.flatten(-2)


def fourier_features(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """``[sin(2^k pi x), cos(2^k pi x)]`` for k < n_freq, per input component."""
    f = (2.0 ** torch.arange(n_freq, dtype=x.dtype, device=x.device)) * math.pi
    z = x[..., :, None] * f
    return torch.cat([z.sin(), z.cos()], dim=-1).flatten(-2)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x / (1.0 - x))


class Attention(nn.Module):
    """Multi-head attention; ``spatial_init`` adds a per-head weight on an extra logit term."""

    def __init__(self, d_model: int, n_heads: int, spatial_init: float | None = None):
        super().__init__()
        self.h = n_heads
        self.dk = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.spatial_scale = (nn.Parameter(torch.full((n_heads,), float(spatial_init)))
                              if spatial_init else None)

    def forward(self, q, k, v, visible=None, bias=None, spatial=None):
        B, nq, d = q.shape
        nk = k.shape[1]
        h, dk = self.h, self.dk
        # scale folded into Q so the logits come out of one fused matmul
        Q = (self.q(q) * dk ** -0.5).view(B, nq, h, dk).transpose(1, 2).reshape(B * h, nq, dk)
        K = self.k(k).view(B, nk, h, dk).transpose(1, 2).reshape(B * h, nk, dk)
        V = self.v(v).view(B, nk, h, dk).transpose(1, 2)
        add = None
        if spatial is not None and self.spatial_scale is not None:
            add = self.spatial_scale[:, None, None] * spatial[:, None]
        if bias is not None:
            b = bias[:, None, None, :]
            add = b if add is None else add + b
        if add is None:
            logits = torch.bmm(Q, K.transpose(1, 2))
        else:
            add = add.expand(B, h, nq, nk).reshape(B * h, nq, nk)
            logits = torch.baddbmm(add, Q, K.transpose(1, 2))
        logits = logits.view(B, h, nq, nk)
        if visible is not None:
            logits = logits.masked_fill(~visible[:, None], float("-inf"))
        w = torch.softmax(logits, dim=-1)
        out = (w @ V).transpose(1, 2).reshape(B, nq, d)
        return self.o(out)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, spatial_init: float = 0.0):
        super().__init__()
        self.self_attn = Attention(d_model, n_heads)
        self.cross_attn = Attention(d_model, n_heads, spatial_init)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, d_model))
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, x, qpos, keys, values, visible, bias, spatial=None):
        q = x + qpos
        x = self.norm1(x + self.self_attn(q, q, x, visible=visible))
        x = self.norm2(x + self.cross_attn(x + qpos, keys, values, bias=bias, spatial=spatial))
        return self.norm3(x + self.ffn(x))


@dataclass
class DecoderOutput:
    logits: list[torch.Tensor]  # per layer, (B, n_q, n_classes + 1)
    boxes: list[torch.Tensor]  # per layer, (B, n_q, 7)
    n_learnable: int
    dn_counts: list[int]


# typical (l, w, h) used to initialize learnable reference sizes
_REF_SIZE = (2.5, 1.2, 1.55)


class QdnDecoder(nn.Module):
    """Decoder parameters plus the fixed key ray directions of one rig."""

    def __init__(self, config: DecoderConfig, rays: np.ndarray, bounds: Bounds = Bounds(),
                 seed: int = 0, ground_z: float = -1.0):
        super().__init__()
        self.config = config
        self.bounds = bounds
        d = config.d_model
        self.dims_per_axis = 2 * max(1, (d // 2) // 6)
        self.sine_dims = 3 * self.dims_per_axis
        self.register_buffer("rays", torch.as_tensor(np.asarray(rays, dtype=float).reshape(-1, 3),
                                                     dtype=torch.float32))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.key_proj = nn.Linear(config.n_channels, d)
            n_pe = 6 * config.pe_frequencies
            self.ray_pe = nn.Sequential(nn.Linear(n_pe, d), nn.GELU(), nn.Linear(d, d))
            self.center_pe = nn.Linear(n_pe, d)
            self.dn_proj = nn.Linear(d // 2 + 5, d)
            self.class_embed = nn.Embedding(config.n_classes, d)
            self.query_content = nn.Parameter(torch.randn(config.n_learnable_queries, d) * 0.1)
            ref = torch.zeros(config.n_learnable_queries, 7)
            z0 = float(bounds.normalize((0.0, 0.0, ground_z + 0.8))[2])
            anchors = polar_anchors(config.n_learnable_queries, bounds)
            ref[:, :2] = inverse_sigmoid(torch.as_tensor(anchors, dtype=torch.float32))
            ref[:, 2] = inverse_sigmoid(torch.tensor(z0))
            ref[:, 3:6] = torch.log(torch.tensor(_REF_SIZE))
            self.query_ref = nn.Parameter(ref)
            ffn = config.ffn_dim or 2 * d
            self.layers = nn.ModuleList(DecoderLayer(d, config.n_heads, ffn, config.spatial_prior)
                                        for _ in range(config.n_layers))
            self.cls_head = nn.Linear(d, config.n_classes + 1)
            self.box_head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 7))
            nn.init.zeros_(self.box_head[2].weight)
            nn.init.zeros_(self.box_head[2].bias)

    # -- encoders ------------------------------------------------------------

    def _sine(self, center: torch.Tensor) -> torch.Tensor:
        return sine_embedding(center, self.dims_per_axis)

    def embed_dn(self, dn: DnQueryBatch) -> torch.Tensor:
        """DN embeddings: sinusoidal center + size/yaw features, projected, plus class."""
        dtype = self.query_content.dtype
        boxes = torch.as_tensor(dn.boxes, dtype=dtype)
        if len(dn) == 0:
            return boxes.new_zeros((0, self.config.d_model))
        half = self.config.d_model // 2
        s = self._sine(boxes[:, :3])
        s = F.pad(s, (0, half - s.shape[-1])) if s.shape[-1] < half else s[:, :half]
        yaw = boxes[:, 6:7]
        feats = torch.cat([s, torch.log(boxes[:, 3:6]), yaw.sin(), yaw.cos()], dim=-1)
        return self.dn_proj(feats) + self.class_embed(torch.as_tensor(dn.labels))

    def dn_reference(self, dn: DnQueryBatch) -> torch.Tensor:
        boxes = torch.as_tensor(dn.boxes, dtype=self.query_content.dtype)
        return torch.cat([inverse_sigmoid(boxes[:, :3]), torch.log(boxes[:, 3:6]), boxes[:, 6:]], -1)

    def _fourier(self, x: torch.Tensor) -> torch.Tensor:
        return fourier_features(x, self.config.pe_frequencies)

    def _bearing(self, ref: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.bounds.lo, dtype=ref.dtype)
        ext = torch.as_tensor(self.bounds.extent, dtype=ref.dtype)
        world = lo + torch.sigmoid(ref[..., :3]) * ext
        return world / world.norm(dim=-1, keepdim=True).clamp_min(1e-6)

    def query_pos(self, ref: torch.Tensor) -> torch.Tensor:
        center = torch.sigmoid(ref[..., :3])
        return self.ray_pe(self._fourier(self._bearing(ref))) + self.center_pe(self._fourier(2 * center - 1))

    def spatial_kernel(self, ref: torch.Tensor, ray_feat: torch.Tensor) -> torch.Tensor:
        """Bearing alignment in [-1, 1] between reference centers and key rays, (B, nq, nk)."""
        fq = self._fourier(self._bearing(ref))
        return (fq @ ray_feat.T) / (3 * self.config.pe_frequencies)

    def decode_boxes(self, ref: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
        # planar center moves in azimuth and log-range from the reference
        lo = torch.as_tensor(self.bounds.lo[:2], dtype=ref.dtype)
        ext = torch.as_tensor(self.bounds.extent[:2], dtype=ref.dtype)
        xy = lo + torch.sigmoid(ref[..., :2]) * ext
        rho = xy.norm(dim=-1).clamp_min(0.1) * torch.exp(0.5 * delta[..., 1])
        th = torch.atan2(xy[..., 1], xy[..., 0]) + 0.2 * delta[..., 0]
        xy = torch.stack([rho * th.cos(), rho * th.sin()], -1)
        cxy = ((xy - lo) / ext).clamp(1e-4, 1 - 1e-4)
        cz = torch.sigmoid(ref[..., 2:3] + delta[..., 2:3])
        center = torch.cat([cxy, cz], -1)
        size = torch.exp((ref[..., 3:6] + delta[..., 3:6]).clamp(max=4.0))
        yaw = ref[..., 6:] + delta[..., 6:]
        return torch.cat([center, size, yaw], dim=-1)

    # -- forward ---------------------------------------------------------------

    def forward(self, keys: torch.Tensor, dn: Sequence[DnQueryBatch | None] | None = None,
                bias: torch.Tensor | None = None, mask_mode: MaskMode | None = None,
                dn_embeddings: Sequence[torch.Tensor] | None = None) -> DecoderOutput:
        """Run all layers.

        ``keys`` is ``(B, n_keys, C)``; ``dn`` holds one DN batch (or ``None``) per
        scene; ``bias`` is an optional ``(B, n_keys)`` additive attention bias.
        """
        cfg = self.config
        mode = MaskMode(mask_mode or cfg.mask_mode)
        B = keys.shape[0]
        dtype = self.query_content.dtype
        keys = keys.to(dtype)
        if dn is None or mode is MaskMode.NODN:
            dn = [None] * B
        dn = [d if d is not None and len(d) else None for d in dn]
        counts = [0 if d is None else len(d) for d in dn]
        n_l = cfg.n_learnable_queries
        n_max = max(counts, default=0)
        nq = n_l + n_max

        content = self.query_content.unsqueeze(0).expand(B, -1, -1)
        ref = self.query_ref.unsqueeze(0).expand(B, -1, -1)
        visible = torch.ones((B, nq, nq), dtype=torch.bool)
        if n_max:
            dn_c, dn_r = [], []
            for b, d in enumerate(dn):
                pad = n_max - counts[b]
                if d is None:
                    dn_c.append(content.new_zeros((n_max, cfg.d_model)))
                    dn_r.append(ref.new_zeros((n_max, 7)))
                    vis = build_self_attention_mask(n_l, None, mode)
                else:
                    emb = dn_embeddings[b] if dn_embeddings is not None else self.embed_dn(d)
                    dn_c.append(F.pad(emb.to(dtype), (0, 0, 0, pad)))
                    dn_r.append(F.pad(self.dn_reference(d), (0, 0, 0, pad)))
                    vis = build_self_attention_mask(n_l, d, mode)
                m = np.zeros((nq, nq), dtype=bool)
                k = vis.shape[0]
                m[:k, :k] = vis
                m[np.arange(k, nq), np.arange(k, nq)] = True  # padding rows see only themselves
                visible[b] = torch.from_numpy(m)
            content = torch.cat([content, torch.stack(dn_c)], dim=1)
            ref = torch.cat([ref, torch.stack(dn_r)], dim=1)
        qpos = self.query_pos(ref)

        ray_feat = self._fourier(self.rays.to(dtype))
        keys_in = self.key_proj(keys) + self.ray_pe(ray_feat).unsqueeze(0)
        spatial = self.spatial_kernel(ref, ray_feat) if cfg.spatial_prior else None
        if bias is not None:
            bias = bias.to(dtype)
        vis_arg = None if bool(visible.all()) else visible

        x = content
        logits, boxes = [], []
        for li, layer in enumerate(self.layers):
            x = layer(x, qpos, keys_in, keys_in, vis_arg, bias, spatial)
            if not torch.isfinite(x).all():
                raise NumericFault(f"non-finite activation after layer {li}", layer=li)
            logits.append(self.cls_head(x))
            boxes.append(self.decode_boxes(ref, self.box_head(x)))
        return DecoderOutput(logits, boxes, n_l, counts)


def gaussian_bias(rig: CameraRig, objects: ObjectList | None, config: DecoderConfig) -> np.ndarray:
    """Flattened ``log(G) / sqrt(d_k)`` bias over keys; all zeros without objects."""
    if objects is None:
        return np.zeros(rig.n_keys)
    shared = shared_mask_for_objects(rig, objects, config.mask_sigma, config.mask_eps)
    return np.log(shared.flat) / math.sqrt(config.d_head)


@dataclass
class TrainSample:
    """Everything one scene contributes to a training step."""
    keys: np.ndarray  # (n_keys, C)
    gt: ObjectList
    dn: DnQueryBatch | None
    bias: np.ndarray | None  # (n_keys,)
    bounds: Bounds = field(default_factory=Bounds)


def scene_losses(model: QdnDecoder, samples: Sequence[TrainSample],
                 cost: MatchCost = MatchCost()) -> tuple[torch.Tensor, dict[str, float]]:
    """Total loss (mean over scenes, summed over layers) and its float breakdown."""
    cfg = model.config
    dtype = model.query_content.dtype
    keys = torch.as_tensor(np.stack([s.keys for s in samples]), dtype=dtype)
    bias = None
    if cfg.use_gaussian_bias:
        bias = torch.as_tensor(np.stack([s.bias if s.bias is not None else np.zeros(len(s.keys))
                                         for s in samples]), dtype=dtype)
    out = model(keys, [s.dn for s in samples], bias)
    terms = batched_losses(out, samples, cost, cfg.n_classes)
    total = sum(terms.values())
    if not torch.isfinite(total):
        raise NumericFault("non-finite loss")
    parts = {k: float(v.detach()) for k, v in terms.items()}
    parts["det_loss"] = detection_loss(out, samples, cfg.mask_mode, cost, cfg.n_classes)
    return total, parts


@torch.no_grad()
def detection_loss(out: DecoderOutput, samples: Sequence[TrainSample], mode: MaskMode,
                   cost: MatchCost = MatchCost(), n_classes: int = N_CLASSES) -> float:
    """Set-prediction loss of the last layer over every query that counts as a detection.

    Unlike the training objective this is comparable across variants: it scores
    the candidate set the model would emit, including DN outputs where they are kept.
    """
    keep = keeps_dn_outputs(mode)
    total = 0.0
    for b, s in enumerate(samples):
        n = out.n_learnable + (out.dn_counts[b] if keep else 0)
        t = set_prediction_loss(out.logits[-1][b, :n], out.boxes[-1][b, :n], s.gt, s.bounds,
                                cost, n_classes)
        total += float(t["cls"] + t["box_l1"])
    return total / max(len(samples), 1)


def reference_losses(out: DecoderOutput, samples: Sequence[TrainSample],
                     cost: MatchCost = MatchCost(), n_classes: int = N_CLASSES) -> dict[str, torch.Tensor]:
    """Per-scene, per-layer evaluation of the loss definitions (slow path)."""
    n_l = out.n_learnable
    parts = {}
    for logits, boxes in zip(out.logits, out.boxes):
        for b, s in enumerate(samples):
            terms = dict(set_prediction_loss(logits[b, :n_l], boxes[b, :n_l], s.gt, s.bounds,
                                             cost, n_classes))
            k = out.dn_counts[b]
            if k:
                terms.update(dn_reconstruction_loss(logits[b, n_l:n_l + k], boxes[b, n_l:n_l + k],
                                                    s.dn.targets, s.gt, s.bounds, cost, n_classes))
            for name, v in terms.items():
                parts[name] = parts.get(name, 0.0) + v / len(samples)
    for name in ("cls", "box_l1", "dn_cls", "dn_box"):
        parts.setdefault(name, out.logits[0].new_zeros(()))
    return parts


def batched_losses(out: DecoderOutput, samples: Sequence[TrainSample],
                   cost: MatchCost = MatchCost(), n_classes: int = N_CLASSES) -> dict[str, torch.Tensor]:
    """Same values as :func:`reference_losses`, computed with a handful of tensor ops."""
    n_l = out.n_learnable
    logits = torch.stack(out.logits)  # (L, B, nq, K+1)
    boxes = torch.stack(out.boxes)
    L, B = logits.shape[:2]
    dtype = logits.dtype
    lg_np = logits[:, :, :n_l].detach().cpu().numpy().astype(float)
    bx_np = boxes[:, :, :n_l].detach().cpu().numpy().astype(float)

    cls_t = np.full((L, B, n_l), n_classes, dtype=np.int64)
    cls_w = np.full((L, B, n_l), cost.no_object_weight / (n_l * B))
    m_idx, m_gt, m_w = [], [], []
    gt_box_all = []
    for b, s in enumerate(samples):
        gcls = s.gt.arrays()["class_id"]
        gbox = gt_boxes(s.gt, s.bounds)
        gt_box_all.append(gbox)
        if not len(s.gt):
            continue
        for li in range(L):
            c = match_cost_matrix(lg_np[li, b], bx_np[li, b], gcls, gbox, cost)
            assign = hungarian_assign(c)
            g = np.fromiter(assign.keys(), dtype=np.int64)
            p = np.fromiter(assign.values(), dtype=np.int64)
            cls_t[li, b, p] = gcls[g]
            cls_w[li, b, p] = 1.0 / (n_l * B)
            m_idx.append(np.stack([np.full_like(p, li), np.full_like(p, b), p], 1))
            m_gt.append(gbox[g])
            m_w.append(np.full(len(p), cost.w_box / (len(s.gt) * B)))

    ce = F.cross_entropy(logits[:, :, :n_l].reshape(-1, n_classes + 1),
                         torch.as_tensor(cls_t.reshape(-1)), reduction="none")
    parts = {"cls": (ce * torch.as_tensor(cls_w.reshape(-1), dtype=dtype)).sum()}
    if m_idx:
        idx = np.concatenate(m_idx)
        pb = boxes[idx[:, 0], idx[:, 1], idx[:, 2]]
        d = box_l1(pb, torch.as_tensor(np.concatenate(m_gt), dtype=dtype))
        parts["box_l1"] = (d * torch.as_tensor(np.concatenate(m_w), dtype=dtype)).sum()
    else:
        parts["box_l1"] = logits.new_zeros(())

    rows, cls_dn, w_cls_dn, box_rows, box_gt, w_box_dn = [], [], [], [], [], []
    for b, s in enumerate(samples):
        k = out.dn_counts[b]
        if not k:
            continue
        tg = np.asarray(s.dn.targets, dtype=np.int64)
        if np.any(tg >= len(s.gt)) or np.any(tg < -1):
            raise DataError("denoising target points outside the ground-truth list")
        gcls = s.gt.arrays()["class_id"]
        real = tg >= 0
        ct = np.full(k, n_classes, dtype=np.int64)
        ct[real] = gcls[tg[real]]
        rows.append(np.stack([np.full(k, b), n_l + np.arange(k)], 1))
        cls_dn.append(ct)
        w_cls_dn.append(np.full(k, 1.0 / (k * B)))
        if real.any():
            box_rows.append(np.stack([np.full(real.sum(), b), n_l + np.flatnonzero(real)], 1))
            box_gt.append(gt_box_all[b][tg[real]])
            w_box_dn.append(np.full(real.sum(), cost.w_box / (real.sum() * B)))
    if rows:
        r = np.concatenate(rows)
        lg = logits[:, r[:, 0], r[:, 1]]  # (L, n, K+1)
        t = torch.as_tensor(np.concatenate(cls_dn)).repeat(L)
        ce = F.cross_entropy(lg.reshape(-1, n_classes + 1), t, reduction="none")
        w = torch.as_tensor(np.concatenate(w_cls_dn), dtype=dtype).repeat(L)
        parts["dn_cls"] = (ce * w).sum()
    else:
        parts["dn_cls"] = logits.new_zeros(())
    if box_rows:
        r = np.concatenate(box_rows)
        pb = boxes[:, r[:, 0], r[:, 1]].reshape(-1, 7)
        gt_t = torch.as_tensor(np.concatenate(box_gt), dtype=dtype).repeat(L, 1)
        w = torch.as_tensor(np.concatenate(w_box_dn), dtype=dtype).repeat(L)
        parts["dn_box"] = (box_l1(pb, gt_t) * w).sum()
    else:
        parts["dn_box"] = logits.new_zeros(())
    return parts


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: float = 1.0


def make_optimizer(model: QdnDecoder, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                             weight_decay=cfg.weight_decay)


def train_step(model: QdnDecoder, optimizer: torch.optim.Optimizer, samples: Sequence[TrainSample],
               cost: MatchCost = MatchCost(), grad_clip: float = 1.0) -> dict[str, float]:
    """One optimizer step; returns the loss breakdown plus ``total``."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total, parts = scene_losses(model, samples, cost)
    total.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    parts["total"] = float(total.detach())
    return parts


def suppress_duplicates(records: list[ObjectRecord], distance: float) -> list[ObjectRecord]:
    """Greedy planar center-distance suppression keeping higher confidence."""
    kept: list[ObjectRecord] = []
    for r in sorted(records, key=lambda r: -r.confidence):
        if all(math.hypot(r.center[0] - k.center[0], r.center[1] - k.center[1]) >= distance
               for k in kept):
            kept.append(r)
    return kept


def keeps_dn_outputs(mode: MaskMode) -> bool:
    """Whether DN-query outputs count as detections at inference.

    Under the DN-DETR mask the denoising part is a training device only, so its
    outputs are dropped; QDN treats them as ordinary detection candidates.
    """
    return MaskMode(mode) is MaskMode.NOMASK_QDN


def inference_mode(mode: MaskMode) -> MaskMode:
    """Self-attention mode used at inference.

    The DN-DETR visibility mask only exists while denoising queries are trained,
    so DN queries injected at inference are seen by every query.
    """
    return MaskMode.NOMASK_QDN if MaskMode(mode) is MaskMode.DNDETR else MaskMode(mode)


@torch.no_grad()
def predict_batch(model: QdnDecoder, keys: Sequence[np.ndarray], rig: CameraRig,
                  object_lists: Sequence[ObjectList | None]) -> list[ObjectList]:
    cfg = model.config
    model.eval()
    dtype = model.query_content.dtype
    dn, bias = [], []
    for objs in object_lists:
        if objs is not None and cfg.uses_dn and len(objs):
            dn.append(encode_dn_queries(objs, None, 1, model.bounds))
        else:
            dn.append(None)
        bias.append(gaussian_bias(rig, objs, cfg) if cfg.use_gaussian_bias else None)
    k = torch.as_tensor(np.stack(keys), dtype=dtype)
    b = None
    if cfg.use_gaussian_bias:
        b = torch.as_tensor(np.stack([x if x is not None else np.zeros(k.shape[1]) for x in bias]),
                            dtype=dtype)
    out = model(k, dn, b, mask_mode=inference_mode(cfg.mask_mode))
    logits, boxes = out.logits[-1], out.boxes[-1]
    prob = torch.softmax(logits, dim=-1)[..., :cfg.n_classes]
    conf, cls = prob.max(dim=-1)
    results = []
    lo, ext = np.asarray(model.bounds.lo), model.bounds.extent
    for bi in range(k.shape[0]):
        n = out.n_learnable + (out.dn_counts[bi] if keeps_dn_outputs(cfg.mask_mode) else 0)
        recs = []
        bx = boxes[bi, :n].double().numpy()
        cf = conf[bi, :n].double().numpy()
        cl = cls[bi, :n].numpy()
        for q in np.flatnonzero(cf >= cfg.score_threshold):
            c = lo + bx[q, :3] * ext
            recs.append(ObjectRecord(
                center=tuple(float(v) for v in c),
                size=tuple(float(v) for v in bx[q, 3:6]),
                yaw=wrap_angle(float(bx[q, 6])),
                velocity=(0.0, 0.0),
                class_id=int(cl[q]),
                confidence=float(min(max(cf[q], 0.0), 1.0)),
            ))
        recs = suppress_duplicates(recs, cfg.nms_distance)
        results.append(ObjectList(tuple(recs), SourceTag.EXTERNAL))
    return results


def predict(model: QdnDecoder, keys: np.ndarray, rig: CameraRig,
            object_list: ObjectList | None = None) -> ObjectList:
    """Detections for one scene; ``object_list=None`` is the modality-loss setting."""
    return predict_batch(model, [keys], rig, [object_list])[0]


def build_model(config: DecoderConfig, rig: CameraRig, bounds: Bounds = Bounds(),
                seed: int = 0, dtype=torch.float32) -> QdnDecoder:
    rays = ray_grid(rig).reshape(-1, 3)
    return QdnDecoder(config, rays, bounds, seed).to(dtype)


# -- checkpoint files --------------------------------------------------------

CKPT_MAGIC = b"CLFCKPT\x00"
CKPT_VERSION = 1


def checkpoint_bytes(model: QdnDecoder, extra: dict | None = None) -> bytes:
    """Header, JSON metadata, then named float64 tensors (all little-endian)."""
    meta = {"decoder": model.config.to_dict(),
            "bounds": {"lo": list(model.bounds.lo), "hi": list(model.bounds.hi)}}
    if extra:
        meta.update(extra)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    state = model.state_dict()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_b)), meta_b,
             struct.pack("<I", len(state))]
    for name, t in state.items():
        nb = name.encode()
        arr = t.detach().cpu().double().numpy()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def parse_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(buf[off:off + meta_len])
    off += meta_len
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode()
        off += ln
        (nd,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}Q", buf, off)
        off += 8 * nd
        count = int(np.prod(shape)) if nd else 1
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    return meta, tensors


def save_checkpoint(path, model: QdnDecoder, extra: dict | None = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model, extra))


def load_checkpoint(path, dtype=torch.float32) -> tuple[QdnDecoder, dict]:
    with open(path, "rb") as fh:
        meta, tensors = parse_checkpoint(fh.read())
    cfg = DecoderConfig.from_dict(meta["decoder"])
    b = meta["bounds"]
    bounds = Bounds(tuple(b["lo"]), tuple(b["hi"]))
    model = QdnDecoder(cfg, tensors["rays"], bounds).to(dtype)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return model, meta
