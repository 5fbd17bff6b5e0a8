"""The separator network.

A fully-convolutional 2D U-Net over (time, frequency) with densely connected
convolution blocks, self-attention over the time axis, and frequency-positional
embeddings. All convolutions are causal in time (past-only padding) and
non-causal in frequency. The network consumes real+imaginary channels of the
mixture STFT and emits one complex ratio mask per source; masks are raw,
unbounded outputs.

Down/upsampling is 2x2 average pooling / nearest-neighbor upsampling. The
upsampled path is delayed by one frame so that the pooled branch never leaks
future frames; the end-to-end network is exactly causal in time.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dsp import AudioClip, SourcePair, Spectrogram, istft_array, stft_array

CHECKPOINT_VERSION = 1

# Frequency bins are grouped into chunks of this width for the attention
# score computation; keys/queries are pooled per chunk, values stay per-bin.
ATTN_FREQ_CHUNK = 64


@dataclass(frozen=True)
class SeparatorConfig:
    n_levels: int = 4
    channel_schedule: tuple[int, ...] = (32, 64, 128, 256)
    dense_layers_per_block: int = 3
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    attn_channels: int = 5
    attn_key_dim: int = 20
    pos_k: int = 10
    n_sources: int = 2
    f_bins: int = 513

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        sched = tuple(int(c) for c in self.channel_schedule)
        if len(sched) != self.n_levels:
            raise ValueError("channel_schedule length must equal n_levels")
        if any(a > b for a, b in zip(sched, sched[1:])):
            raise ValueError("channel_schedule must be non-decreasing")
        if min(self.attn_channels, self.attn_key_dim, self.pos_k) < 1:
            raise ValueError("attention/embedding dimensions must be >= 1")
        if self.f_bins < 2 or (self.f_bins - 1) & (self.f_bins - 2) != 0:
            raise ValueError("f_bins must be 2^m + 1")
        object.__setattr__(self, "channel_schedule", sched)

    @property
    def fft_size(self) -> int:
        return (self.f_bins - 1) * 2

    @property
    def hop(self) -> int:
        return self.fft_size // 4


# Channel schedules sized so the named presets land near the reference
# parameter counts 1.6M / 8.3M / 15.4M. "toy" is for fast unit tests
# (small frequency axis), "micro" is a lightweight full-band model for
# quick end-to-end runs on the synthetic corpus.
PRESETS: dict[str, SeparatorConfig] = {
    "toy": SeparatorConfig(n_levels=2, channel_schedule=(8, 16), f_bins=33),
    "micro": SeparatorConfig(n_levels=2, channel_schedule=(8, 16)),
    "small": SeparatorConfig(n_levels=4, channel_schedule=(16, 32, 64, 64)),
    "medium": SeparatorConfig(n_levels=4, channel_schedule=(32, 64, 128, 160)),
    "large": SeparatorConfig(n_levels=4, channel_schedule=(32, 64, 128, 256)),
}


def preset(name: str) -> SeparatorConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown separator preset {name!r}; have {sorted(PRESETS)}") from None


def positional_embedding(t_frames: int, f_bins: int, k: int) -> np.ndarray:
    """Frequency-positional embedding, shape (t_frames, f_bins, k).

    Entry (t, f, j) = cos(2^(j-1) * pi * f/F) with F = f_bins - 1, so the
    normalized frequency spans [0, 1]. Independent of t.
    """
    if min(t_frames, f_bins, k) < 1:
        raise ValueError("t_frames, f_bins, k must all be >= 1")
    f_norm = np.arange(f_bins, dtype=np.float64) / max(f_bins - 1, 1)
    j = np.arange(1, k + 1, dtype=np.float64)
    emb = np.cos((2.0 ** (j - 1))[None, :] * np.pi * f_norm[:, None])
    return np.broadcast_to(emb[None, :, :], (t_frames, f_bins, k)).copy()


class CausalConv2d(nn.Module):
    """3x3 convolution padded (2, 0) in time and (1, 1) in frequency."""

    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int] = (3, 3)):
        super().__init__()
        self.kt, self.kf = kernel
        self.conv = nn.Conv2d(c_in, c_out, kernel, padding=0)

    def forward(self, x):
        pf = (self.kf - 1) // 2
        x = F.pad(x, (pf, self.kf - 1 - pf, self.kt - 1, 0))
        return self.conv(x)


class DenseBlock(nn.Module):
    """Three causal conv layers with dense connectivity, then a 1x1 transition.

    Each conv layer grows the feature stack by `growth` channels and is
    followed by batch normalization and ReLU; the transition maps the
    concatenated stack to the block's output width.
    """

    def __init__(self, c_in: int, c_out: int, n_layers: int = 3, kernel=(3, 3)):
        super().__init__()
        growth = c_out
        self.layers = nn.ModuleList()
        self.norms = nn.ModuleList()
        c = c_in
        for _ in range(n_layers):
            self.layers.append(CausalConv2d(c, growth, kernel))
            self.norms.append(nn.BatchNorm2d(growth))
            c += growth
        self.transition = nn.Conv2d(c, c_out, 1)

    def forward(self, x):
        feats = [x]
        for conv, norm in zip(self.layers, self.norms):
            y = F.relu(norm(conv(torch.cat(feats, dim=1))))
            feats.append(y)
        return self.transition(torch.cat(feats, dim=1))


class TimeAttention(nn.Module):
    """Self-attention over the time axis, masked to current-and-past frames.

    Keys and queries are average-pooled over frequency chunks so the score
    tensor stays small; the resulting per-chunk attention weights are applied
    to per-bin value channels. Residual connection around the block.
    """

    def __init__(self, channels: int, attn_channels: int = 5, key_dim: int = 20):
        super().__init__()
        self.key_dim = key_dim
        self.to_q = nn.Conv2d(channels, key_dim, 1)
        self.to_k = nn.Conv2d(channels, key_dim, 1)
        self.to_v = nn.Conv2d(channels, attn_channels, 1)
        self.to_out = nn.Conv2d(attn_channels, channels, 1)

    def forward(self, x):
        b, _, t, f = x.shape
        q, k, v = self.to_q(x), self.to_k(x), self.to_v(x)
        n_chunks = -(-f // ATTN_FREQ_CHUNK)
        pad_f = n_chunks * ATTN_FREQ_CHUNK - f
        if pad_f:
            q = F.pad(q, (0, pad_f))
            k = F.pad(k, (0, pad_f))
        # (b, d, t, f) -> (b, chunks, t, d), pooled over the chunk's bins
        q = q.view(b, self.key_dim, t, n_chunks, -1).mean(dim=4).permute(0, 3, 2, 1)
        k = k.view(b, self.key_dim, t, n_chunks, -1).mean(dim=4).permute(0, 3, 2, 1)
        scores = torch.matmul(q, k.transpose(2, 3)) / self.key_dim**0.5
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=3)  # (b, chunks, t, t)
        # expand chunk weights to bins and mix values along time
        attn_bins = attn.repeat_interleave(ATTN_FREQ_CHUNK, dim=1)[:, :f]  # (b, f, t, t)
        v = v.permute(0, 3, 2, 1)  # (b, f, t, cv)
        mixed = torch.matmul(attn_bins, v)  # (b, f, t, cv)
        mixed = mixed.permute(0, 3, 2, 1)  # (b, cv, t, f)
        return x + self.to_out(mixed)


def _causal_downsample(x):
    """2x2 average pooling; odd sizes are zero-padded at the trailing edge."""
    _, _, t, f = x.shape
    x = F.pad(x, (0, f % 2, 0, t % 2))
    return F.avg_pool2d(x, 2)


def _causal_upsample(x, t_out: int, f_out: int):
    """Nearest-neighbor 2x upsampling delayed one frame in time, cropped to size.

    The delay guarantees that a pooled frame (which spans two input frames)
    only ever influences output frames at or after the later of the two.
    """
    x = F.interpolate(x, scale_factor=2, mode="nearest")
    x = F.pad(x, (0, 0, 1, 0))[:, :, :-1, :]
    return x[:, :, :t_out, :f_out]


class Separator(nn.Module):
    """U-Net separator emitting one complex ratio mask per source."""

    version = CHECKPOINT_VERSION

    def __init__(self, config: SeparatorConfig):
        super().__init__()
        self.config = config
        ch = config.channel_schedule
        n_in = 2 + config.pos_k
        kernel = config.kernel
        layers = config.dense_layers_per_block

        self.encoders = nn.ModuleList()
        c_prev = n_in
        for c in ch:
            self.encoders.append(DenseBlock(c_prev, c, layers, kernel))
            c_prev = c
        self.bottleneck = DenseBlock(ch[-1], ch[-1], layers, kernel)
        self.bottleneck_attn = TimeAttention(ch[-1], config.attn_channels, config.attn_key_dim)

        self.up_convs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        c_prev = ch[-1]
        for c in reversed(ch):
            self.up_convs.append(CausalConv2d(c_prev, c, kernel))
            self.decoders.append(DenseBlock(2 * c, c, layers, kernel))
            c_prev = c
        self.final_attn = TimeAttention(ch[0], config.attn_channels, config.attn_key_dim)
        self.head = nn.Conv2d(ch[0], 2 * config.n_sources, 1)

        emb = positional_embedding(1, config.f_bins, config.pos_k)[0]  # (f, k)
        self.register_buffer(
            "pos_emb", torch.from_numpy(emb.T.copy()).float().view(1, config.pos_k, 1, config.f_bins)
        )

    def features_from_complex(self, spec: torch.Tensor) -> torch.Tensor:
        """(B, T, F) complex spectrogram -> (B, 2+k, T, F) input tensor."""
        if spec.shape[-1] != self.config.f_bins:
            raise ValueError(
                f"expected {self.config.f_bins} frequency bins, got {spec.shape[-1]}"
            )
        x = torch.stack([spec.real, spec.imag], dim=1).to(self.pos_emb.dtype)
        b, _, t, f = x.shape
        emb = self.pos_emb.expand(b, -1, t, f)
        return torch.cat([x, emb], dim=1)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        """(B, T, F) complex mixture -> (B, 2*n_sources, T, F) mask channels."""
        x = self.features_from_complex(spec)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = _causal_downsample(x)
        x = self.bottleneck(x)
        x = self.bottleneck_attn(x)
        for up, dec, skip in zip(self.up_convs, self.decoders, reversed(skips)):
            x = _causal_upsample(x, skip.shape[2], skip.shape[3])
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        x = self.final_attn(x)
        return self.head(x)

    def masks(self, spec: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, F) complex mixture -> complex masks (vocal, accompaniment)."""
        out = self.forward(spec)
        voc = torch.complex(out[:, 0], out[:, 1])
        acc = torch.complex(out[:, 2], out[:, 3])
        return voc, acc


def build_separator(config: SeparatorConfig, seed: int = 0) -> Separator:
    """Construct and deterministically initialize a separator.

    Kaiming-uniform (fan-in) for convolution kernels, zero biases, batch-norm
    scale 1 / shift 0. Identical (config, seed) gives bitwise-equal parameters.
    """
    torch.manual_seed(seed)
    model = Separator(config)
    for mod in model.modules():
        if isinstance(mod, nn.Conv2d):
            nn.init.kaiming_uniform_(mod.weight, nonlinearity="relu")
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.BatchNorm2d):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)
    model.eval()
    return model


def count_params(model: nn.Module) -> int:
    """Exact trainable scalar count."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def predict_masks(model: Separator, spec: Spectrogram | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run inference on one spectrogram; returns two complex (T, F) masks."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    x = torch.from_numpy(np.ascontiguousarray(values)).to(torch.complex64).unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        voc, acc = model.masks(x)
    if was_training:
        model.train()
    return voc[0].numpy().astype(np.complex128), acc[0].numpy().astype(np.complex128)


def separate(model: Separator, mixture: AudioClip) -> SourcePair:
    """Separate a full mixture clip into (vocal, accompaniment) estimates."""
    cfg = model.config
    spec = stft_array(mixture.samples, cfg.fft_size, cfg.hop)
    mask_voc, mask_acc = predict_masks(model, spec)
    voc = istft_array(mask_voc * spec, len(mixture), cfg.fft_size, cfg.hop)
    acc = istft_array(mask_acc * spec, len(mixture), cfg.fft_size, cfg.hop)
    return SourcePair(AudioClip(voc), AudioClip(acc))


class CheckpointError(Exception):
    """Raised when a checkpoint file is missing, malformed, or inconsistent."""


def save_checkpoint(
    path: str | Path,
    model: Separator,
    optimizer: torch.optim.Optimizer | None = None,
    iteration: int = 0,
    extra: dict | None = None,
) -> None:
    """Write a versioned checkpoint: config as JSON, tensors as named
    little-endian float32 arrays, optional optimizer state, iteration counter,
    and the torch RNG state."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.detach().numpy().astype("<f4")
    for name, b in model.named_buffers():
        if name == "pos_emb":
            continue  # derived from the config
        arr = b.detach().numpy()
        arrays[f"buffer/{name}"] = arr.astype("<i8") if arr.dtype.kind in "iu" else arr.astype("<f4")
    opt_groups = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_groups = sd["param_groups"]
        for pid, state in sd["state"].items():
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    arrays[f"opt/{pid}/{key}"] = val.numpy().astype("<f4")
                else:
                    arrays[f"opt/{pid}/{key}"] = np.asarray(val, dtype="<f8")
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "iteration": int(iteration),
        "has_optimizer": optimizer is not None,
        "opt_groups": opt_groups,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, restore_rng: bool = False) -> tuple[Separator, dict]:
    """Load a checkpoint; validates config/shape agreement against a freshly
    built model. Returns (model, info) where info carries iteration, optimizer
    state (if stored), and the extra metadata dict."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    with archive as data:
        try:
            meta = json.loads(str(data["meta"]))
        except Exception as exc:
            raise CheckpointError(f"{path}: missing or malformed metadata") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {meta.get('version')}"
            )
        cfg_dict = dict(meta["config"])
        cfg_dict["channel_schedule"] = tuple(cfg_dict["channel_schedule"])
        cfg_dict["kernel"] = tuple(cfg_dict["kernel"])
        config = SeparatorConfig(**cfg_dict)
        model = Separator(config)
        state = {}
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in data:
                raise CheckpointError(f"{path}: missing tensor {key}")
            arr = data[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: "
                    f"stored {tuple(arr.shape)}, model {tuple(p.shape)}"
                )
            state[name] = torch.from_numpy(arr.astype(np.float32))
        for name, b in model.named_buffers():
            if name == "pos_emb":
                continue
            arr = data[f"buffer/{name}"]
            state[name] = torch.from_numpy(arr).to(b.dtype)
        model.load_state_dict(state, strict=False)
        model.eval()
        opt_state = None
        if meta.get("has_optimizer"):
            opt_state = {"param_groups": meta["opt_groups"], "state": {}}
            for key in data.files:
                if not key.startswith("opt/"):
                    continue
                _, pid, field_name = key.split("/", 2)
                entry = opt_state["state"].setdefault(int(pid), {})
                arr = data[key]
                if field_name == "step":
                    entry[field_name] = torch.tensor(float(arr))
                else:
                    entry[field_name] = torch.from_numpy(arr.astype(np.float32))
        if restore_rng and "rng/torch" in data:
            torch.set_rng_state(torch.from_numpy(data["rng/torch"].astype(np.uint8)))
    info = {
        "iteration": meta["iteration"],
        "optimizer_state": opt_state,
        "extra": meta.get("extra", {}),
    }
    return model, info
