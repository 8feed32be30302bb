"""DARNet: spatiotemporal construction, dual attention refinement, feature fusion.

Shapes for the reference configuration (``c_in=64, d_model=16, T=128``)::

    E  (c_in, T)      -> temporal conv   (4*d_model, c_in, T)
                      -> spatial conv    (d_model, 1, T) -> S (d_model, T)
    S + positional    -> refine layer 1  F1 (d_model, T/2)
                      -> refine layer 2  F2 (d_model, T/4)
    pool+linear(F1), pool+linear(F2) -> concat (2*fusion_dim) -> logits (2)
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

VARIANTS = ("full", "no_spatial", "no_temporal", "no_fusion", "single_layer")


class ModelConfigError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DarnetConfig:
    c_in: int = 64
    d_model: int = 16
    temporal_kernel: int = 8
    refine_kernel: int = 3
    pool_stride: int = 2
    n_heads: int = 4
    n_refine_layers: int = 2
    fusion_dim: int = 4
    n_classes: int = 2
    variant: str = "full"
    residual_norm: bool = False
    max_len: int = 512

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if min(self.c_in, self.d_model, self.temporal_kernel, self.n_heads, self.fusion_dim) < 1:
            raise ModelConfigError("all sizes must be positive")
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.refine_kernel < 1 or self.refine_kernel % 2 == 0:
            raise ModelConfigError("refine_kernel must be odd so the convolution preserves length")
        if self.pool_stride != 2:
            raise ModelConfigError("only stride-2 distilling pools are supported")
        if self.n_classes != 2:
            raise ModelConfigError("DARNet is a binary classifier")
        if self.variant in ("full", "no_spatial", "no_temporal", "no_fusion") and self.n_refine_layers != 2:
            raise ModelConfigError(f"variant {self.variant!r} uses exactly two refinement layers")

    @property
    def refine_layers(self) -> int:
        return 1 if self.variant == "single_layer" else self.n_refine_layers

    def with_variant(self, variant: str) -> DarnetConfig:
        d = asdict(self)
        d["variant"] = variant
        d["n_refine_layers"] = 1 if variant == "single_layer" else 2
        return DarnetConfig(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> DarnetConfig:
        return cls(**json.loads(text))


def sequence_lengths(config: DarnetConfig, t: int) -> list[int]:
    """Time lengths of S, F1[, F2] for a window of ``t`` samples."""
    out = [t]
    for _ in range(config.refine_layers):
        out.append((out[-1] + 1) // 2)
    return out


def sinusoidal_table(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    k2 = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, k2 / d_model)
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return table


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # x: (B, L, D); returns output (B, L, D) and weights (B, H, L, L)
        b, length, d = x.shape
        dh = d // self.n_heads

        def heads(t):
            return t.view(b, length, self.n_heads, dh).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, length, d)
        return self.o(y), attn


def distill_pool(x: torch.Tensor) -> torch.Tensor:
    """Max-pool over time (kernel 3, stride 2, padding 1): length L -> ceil(L/2)."""
    return F.max_pool1d(x, kernel_size=3, stride=2, padding=1)


class AttentionRefine(nn.Module):
    """Self-attention, conv over time, ELU, then a stride-2 max-pool halving the length."""

    def __init__(self, config: DarnetConfig):
        super().__init__()
        d = config.d_model
        self.attn = MultiHeadSelfAttention(d, config.n_heads)
        self.conv = nn.Conv1d(d, d, config.refine_kernel, padding=(config.refine_kernel - 1) // 2)
        self.residual_norm = config.residual_norm
        if config.residual_norm:
            self.norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # x: (B, L, D) time-major
        y, attn = self.attn(x)
        if self.residual_norm:
            y = self.norm(x + y)
        y = F.elu(self.conv(y.transpose(1, 2)))
        y = distill_pool(y)
        return y.transpose(1, 2), attn


class Darnet(nn.Module):
    def __init__(self, config: DarnetConfig):
        super().__init__()
        self.config = config
        c, d = config.c_in, config.d_model
        if config.variant != "no_temporal":
            self.temporal_conv = nn.Conv2d(1, 4 * d, (1, config.temporal_kernel))
        in_ch = 1 if config.variant == "no_temporal" else 4 * d
        if config.variant == "no_spatial":
            self.channel_map = nn.Conv1d(in_ch, d, 1)
        else:
            self.spatial_conv = nn.Conv2d(in_ch, d, (c, 1))
        self.refine = nn.ModuleList(AttentionRefine(config) for _ in range(config.refine_layers))
        n_branches = 2 if config.variant in ("full", "no_spatial", "no_temporal") else 1
        self.fusion = nn.ModuleList(nn.Linear(d, config.fusion_dim) for _ in range(n_branches))
        self.classifier = nn.Linear(n_branches * config.fusion_dim, config.n_classes)
        self.register_buffer("positional", sinusoidal_table(config.max_len, d), persistent=False)

    def construct(self, e: torch.Tensor) -> torch.Tensor:
        """(B, c_in, T) CSP features -> S as (B, d_model, T)."""
        cfg = self.config
        x = e.unsqueeze(1)  # (B, 1, c_in, T)
        if cfg.variant != "no_temporal":
            k = cfg.temporal_kernel
            x = F.pad(x, ((k - 1) // 2, k // 2))
            x = F.gelu(self.temporal_conv(x))
        if cfg.variant == "no_spatial":
            return F.gelu(self.channel_map(x.mean(dim=2)))
        return F.gelu(self.spatial_conv(x)).squeeze(2)

    def forward(self, e: torch.Tensor, return_intermediates: bool = False):
        cfg = self.config
        single = e.dim() == 2
        if single:
            e = e.unsqueeze(0)
        if e.dim() != 3 or e.shape[1] != cfg.c_in:
            raise EvaluationError(f"expected input (batch, {cfg.c_in}, T), got {tuple(e.shape)}")
        t = e.shape[2]
        if t < 1 or t > cfg.max_len:
            raise EvaluationError(f"window length {t} outside [1, {cfg.max_len}]")
        if not torch.isfinite(e).all():
            raise EvaluationError("non-finite values in model input")

        s = self.construct(e)
        x = s.transpose(1, 2) + self.positional[:t].to(s.dtype)
        feats, attns = [], []
        for layer in self.refine:
            x, attn = layer(x)
            feats.append(x.transpose(1, 2))
            attns.append(attn)

        if cfg.variant == "no_fusion":
            branches = [feats[1]]
        elif cfg.variant == "single_layer":
            branches = [feats[0]]
        else:
            branches = feats
        fused = torch.cat([lin(f.mean(dim=2)) for lin, f in zip(self.fusion, branches)], dim=1)
        logits = self.classifier(fused)
        if not torch.isfinite(logits).all():
            raise EvaluationError("non-finite logits (check parameters)")
        if single:
            logits = logits[0]
        if not return_intermediates:
            return logits
        inter = {"S": s, "fused": fused, "attention": attns}
        for i, f in enumerate(feats, start=1):
            inter[f"F{i}"] = f
        return logits, inter


def init_params(model: Darnet, seed: int) -> Darnet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero, deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:  # layer-norm gain
                p.fill_(1.0)
            else:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return model


def build_model(config: DarnetConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Darnet:
    model = Darnet(config)
    init_params(model, seed)
    return model.to(dtype)


def count_parameters(config: DarnetConfig) -> int:
    """Exact learnable scalar count, computed from the configuration alone."""
    c, d, k = config.c_in, config.d_model, config.temporal_kernel
    total = 0
    if config.variant != "no_temporal":
        total += 4 * d * k + 4 * d
    in_ch = 1 if config.variant == "no_temporal" else 4 * d
    if config.variant == "no_spatial":
        total += in_ch * d + d
    else:
        total += in_ch * d * c + d
    per_layer = 4 * (d * d + d) + d * d * config.refine_kernel + d
    if config.residual_norm:
        per_layer += 2 * d
    total += config.refine_layers * per_layer
    branches = 2 if config.variant in ("full", "no_spatial", "no_temporal") else 1
    total += branches * (d * config.fusion_dim + config.fusion_dim)
    total += branches * config.fusion_dim * config.n_classes + config.n_classes
    return total


def gradients(model: Darnet, e: torch.Tensor, labels: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of the mean cross-entropy over the batch, keyed by parameter name."""
    from darnet.training import cross_entropy

    model.zero_grad(set_to_none=True)
    loss = cross_entropy(model(e), labels)
    loss.backward()
    return {name: p.grad.detach().clone() for name, p in model.named_parameters() if p.grad is not None}


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"DRNT"
CKPT_VERSION = 1


def encode_state(model: Darnet) -> bytes:
    """Versioned blob: per tensor name, shape and float32 payload, then a CRC32."""
    params = list(model.named_parameters())
    parts = [struct.pack("<4sHI", CKPT_MAGIC, CKPT_VERSION, len(params))]
    for name, p in params:
        raw_name = name.encode("utf-8")
        arr = p.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode_state(raw: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(raw) < 14:
        raise CheckpointError(f"{source}: too short to be a checkpoint")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) != crc:
        raise CheckpointError(f"{source}: checksum mismatch (file corrupted)")
    magic, version, count = struct.unpack_from("<4sHI", blob)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CheckpointError(f"{source}: not a DARNet checkpoint (magic {magic!r}, version {version})")
    off = 10
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 4
        out[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy()
        off += size
    if off != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - off} trailing bytes")
    return out


def save_checkpoint(model: Darnet, directory: str | os.PathLike) -> None:
    """Write ``model.bin`` and ``model.cfg`` atomically into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for fname, payload in (("model.bin", encode_state(model)), ("model.cfg", model.config.to_json().encode())):
        tmp = directory / (fname + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, directory / fname)


def load_checkpoint(directory: str | os.PathLike, dtype: torch.dtype = torch.float32) -> Darnet:
    directory = Path(directory)
    config = DarnetConfig.from_json((directory / "model.cfg").read_text(encoding="utf-8"))
    state = decode_state((directory / "model.bin").read_bytes(), source=str(directory / "model.bin"))
    model = Darnet(config)
    expected = dict(model.named_parameters())
    if set(state) != set(expected):
        raise CheckpointError(f"{directory}: tensor names do not match config variant {config.variant!r}")
    with torch.no_grad():
        for name, p in expected.items():
            if tuple(p.shape) != state[name].shape:
                raise CheckpointError(f"{directory}: tensor {name} has shape {state[name].shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(state[name]))
    return model.to(dtype)
