"""
Conv + transformer encoder for microphone windows.

Architecture:
- 3 valid 1-D strided convolutions over time (GELU between layers)
- residual enrichment: latent + GELU(same-padded conv(latent))
- linear projection to d_model, learned positional embedding
- pre-norm transformer encoder (multi-head self-attention + GELU feed-forward)
- self-attention pooling to one vector
- task heads: texture logits (4), position mm (2), velocity mm/s (1)

Inputs are (batch, n, 10) windows in filtered counts. Regression outputs are
de-standardized with fixed buffers set from the training labels.
"""
import dataclasses
import logging
import math
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import _ConfigMixin
from errors import ConfigError, DataError, NumericalError
from sensor_sim import N_MICS


logger = logging.getLogger(__name__)

HEAD_SIZES = {"texture": 4, "localize": 2, "velocity": 1}
ModelParams = Dict[str, torch.Tensor]


@dataclasses.dataclass(frozen=True)
class ModelConfig(_ConfigMixin):
    """Encoder hyperparameters and the task whose head forward() uses."""

    kernel_sizes: Tuple[int, ...] = (7, 5, 5)
    strides: Tuple[int, ...] = (4, 2, 2)
    latent_channels: int = 10
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    ff_width: int = 64
    residual_kernel: int = 3
    task: str = "texture"
    seed: int = 42
    positional_embedding: bool = True
    max_tokens: int = 128
    window_size: Optional[int] = None

    def validate(self) -> None:
        if self.task not in HEAD_SIZES:
            raise ConfigError(f"model task '{self.task}' has no head (expected one of {sorted(HEAD_SIZES)})")
        if len(self.kernel_sizes) != len(self.strides) or not self.kernel_sizes:
            raise ConfigError("kernel_sizes and strides must be non-empty and the same length")
        if min(self.strides) < 1 or min(self.kernel_sizes) < 1:
            raise ConfigError("kernel sizes and strides must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.residual_kernel % 2 != 1:
            raise ConfigError("residual_kernel must be odd for same padding")
        if self.window_size is not None:
            m = self.compressed_length(self.window_size)
            if m < 1:
                raise ConfigError(f"window {self.window_size} compresses to {m} tokens")
            if self.positional_embedding and m > self.max_tokens:
                raise ConfigError(f"window {self.window_size} gives {m} tokens > max_tokens {self.max_tokens}")

    def compressed_length(self, n: int) -> int:
        """Token count after the valid-conv chain; <= 0 when the window is too short."""
        m = int(n)
        for k, s in zip(self.kernel_sizes, self.strides):
            if m < k:
                return 0
            m = (m - k) // s + 1
        return m


# ============================================================================
# LAYERS
# ============================================================================

class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention that also returns its weights."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.output = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, m, _ = x.shape
        return x.view(b, m, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.output(mixed), weights


class EncoderLayer(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, d_model: int, n_heads: int, ff_width: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff_in = nn.Linear(d_model, ff_width)
        self.ff_out = nn.Linear(ff_width, d_model)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        attended, weights = self.attn(self.norm_attn(x))
        x = x + attended
        x = x + self.ff_out(F.gelu(self.ff_in(self.norm_ff(x))))
        return x, weights


class AttentionPool(nn.Module):
    """softmax_t(w . token_t) weighted sum of tokens."""

    def __init__(self, d_model: int):
        super().__init__()
        self.score = nn.Parameter(torch.zeros(d_model))

    def forward(self, tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        weights = torch.softmax(tokens @ self.score, dim=-1)
        return torch.einsum("bm,bmd->bd", weights, tokens), weights


# ============================================================================
# ENCODER
# ============================================================================

class TactileEncoder(nn.Module):
    """Shared encoder with texture, position and velocity heads."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        config.validate()
        self.config = config
        c = config.latent_channels

        convs = []
        in_ch = N_MICS
        for k, s in zip(config.kernel_sizes, config.strides):
            convs.append(nn.Conv1d(in_ch, c, k, stride=s))
            in_ch = c
        self.convs = nn.ModuleList(convs)
        self.enrich = nn.Conv1d(c, c, config.residual_kernel, padding=config.residual_kernel // 2)
        self.project = nn.Linear(c, config.d_model)
        if config.positional_embedding:
            self.pos_embedding = nn.Parameter(torch.zeros(config.max_tokens, config.d_model))
        else:
            self.register_parameter("pos_embedding", None)
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.ff_width) for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.d_model)
        self.pool = AttentionPool(config.d_model)
        self.heads = nn.ModuleDict({task: nn.Linear(config.d_model, size) for task, size in HEAD_SIZES.items()})

        # fixed standardization, set from training data
        self.register_buffer("input_scale", torch.ones(()))
        self.register_buffer("target_mean", torch.zeros(2))
        self.register_buffer("target_std", torch.ones(2))

        init_params(self, config.seed)

    # ---- stages ----

    def conv_encode(self, window: torch.Tensor) -> torch.Tensor:
        """(batch, n, 10) -> (batch, m, C); GELU between conv layers, not after the last."""
        n = window.shape[1]
        if self.config.compressed_length(n) < 1:
            raise DataError(f"window of {n} steps too short for kernels {self.config.kernel_sizes} "
                            f"and strides {self.config.strides}")
        x = window.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.gelu(x)
        return x.transpose(1, 2)

    def residual_enrich(self, latent: torch.Tensor) -> torch.Tensor:
        enriched = F.gelu(self.enrich(latent.transpose(1, 2))).transpose(1, 2)
        return latent + enriched

    def embed(self, latent: torch.Tensor) -> torch.Tensor:
        tokens = self.project(latent)
        if self.pos_embedding is not None:
            m = tokens.shape[1]
            if m > self.pos_embedding.shape[0]:
                raise DataError(f"{m} tokens exceed max_tokens {self.pos_embedding.shape[0]}")
            tokens = tokens + self.pos_embedding[:m]
        return tokens

    def transformer_encode(self, tokens: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Returns encoded tokens and per-layer attention weights (batch, heads, m, m)."""
        attention = []
        for layer in self.layers:
            tokens, weights = layer(tokens)
            attention.append(weights)
        return self.final_norm(tokens), attention

    def attention_pool(self, tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.pool(tokens)

    def head(self, pooled: torch.Tensor, task: str) -> torch.Tensor:
        out = self.heads[task](pooled)
        if task == "localize":
            out = out * self.target_std + self.target_mean
        elif task == "velocity":
            out = (out * self.target_std[:1] + self.target_mean[:1]).squeeze(-1)
        return out

    def forward(self, window: torch.Tensor, task: Optional[str] = None, check_finite: bool = False) -> torch.Tensor:
        """
        Args:
            window: (batch, n, 10) or (n, 10) filtered counts
            task: head to use; defaults to config.task
            check_finite: raise NumericalError naming the first stage with NaN/Inf

        Returns:
            texture (batch, 4) logits, localize (batch, 2) mm, velocity (batch,) mm/s
        """
        task = task or self.config.task
        if task not in HEAD_SIZES:
            raise ConfigError(f"unknown task '{task}'")
        single = window.dim() == 2
        if single:
            window = window.unsqueeze(0)
        if window.dim() != 3 or window.shape[-1] != N_MICS:
            raise DataError(f"expected (batch, n, {N_MICS}) input, got {tuple(window.shape)}")
        if self.config.window_size is not None and window.shape[1] != self.config.window_size:
            raise DataError(f"window of {window.shape[1]} steps, model expects {self.config.window_size}")

        stages = []
        x = self.conv_encode(window * self.input_scale)
        stages.append(("conv_encode", x))
        x = self.residual_enrich(x)
        stages.append(("residual_enrich", x))
        x, _ = self.transformer_encode(self.embed(x))
        stages.append(("transformer_encode", x))
        x, _ = self.attention_pool(x)
        stages.append(("attention_pool", x))
        out = self.head(x, task)
        stages.append((f"heads.{task}", out))
        if check_finite:
            for name, value in stages:
                if not torch.isfinite(value).all():
                    raise NumericalError("non-finite activation", layer=name)
        return out[0] if single else out

    def set_standardization(self, input_scale: float, target_mean=None, target_std=None) -> None:
        with torch.no_grad():
            self.input_scale.fill_(float(input_scale))
            if target_mean is not None:
                mean = torch.as_tensor(target_mean, dtype=self.target_mean.dtype).reshape(-1)
                std = torch.as_tensor(target_std, dtype=self.target_std.dtype).reshape(-1)
                self.target_mean.copy_(mean.expand(2) if mean.numel() == 1 else mean)
                self.target_std.copy_(std.expand(2) if std.numel() == 1 else std)


def init_params(model: TactileEncoder, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, unit norm gains; seeded."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            elif ".norm" in name or name.startswith("final_norm"):
                param.fill_(1.0)
            else:
                fan_in = param.shape[-1] if param.dim() == 1 or name == "pos_embedding" else math.prod(param.shape[1:])
                bound = 1.0 / math.sqrt(fan_in)
                param.copy_(torch.rand(param.shape, generator=gen, dtype=param.dtype) * 2.0 * bound - bound)


def build_model(config: ModelConfig, dtype: str = "float32") -> TactileEncoder:
    model = TactileEncoder(config)
    return model.to(dtype=getattr(torch, dtype))


# ============================================================================
# LOSS AND GRADIENTS
# ============================================================================

def loss(outputs: torch.Tensor, labels: torch.Tensor, task: str) -> torch.Tensor:
    """Batch-mean cross-entropy (texture) or mean squared error (localize, velocity)."""
    if outputs.shape[0] == 0:
        raise DataError("empty batch")
    if task == "texture":
        if labels.shape != outputs.shape[:1]:
            raise DataError(f"labels {tuple(labels.shape)} do not match logits {tuple(outputs.shape)}")
        return F.cross_entropy(outputs, labels.long())
    if task in ("localize", "velocity"):
        if labels.shape != outputs.shape:
            raise DataError(f"labels {tuple(labels.shape)} do not match outputs {tuple(outputs.shape)}")
        return F.mse_loss(outputs, labels.to(outputs.dtype))
    raise ConfigError(f"unknown task '{task}'")


def gradient(model: TactileEncoder, windows: torch.Tensor, labels: torch.Tensor, task: str) -> ModelParams:
    """
    Reverse-mode gradient of the batch loss for every parameter.

    Parameters off the task's path (other heads) get zero tensors.

    Raises:
        NumericalError: non-finite activation, loss or gradient, naming the layer
    """
    params = dict(model.named_parameters())
    outputs = model(windows, task=task, check_finite=True)
    value = loss(outputs, labels, task)
    if not torch.isfinite(value):
        raise NumericalError("non-finite loss", layer="loss")
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    result = {}
    for (name, param), grad in zip(params.items(), grads):
        grad = torch.zeros_like(param) if grad is None else grad
        if not torch.isfinite(grad).all():
            raise NumericalError("non-finite gradient", layer=name)
        result[name] = grad
    return result


def check_params_finite(model: TactileEncoder) -> None:
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise NumericalError("non-finite parameter", layer=name)
