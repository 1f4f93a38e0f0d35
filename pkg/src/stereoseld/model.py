"""Hybrid convolutional encoder + bidirectional selective-SSM decoder.

The encoder is six VGG-style blocks (two 3x3 convs, batch norm, ReLU, average
pooling) that downsample 250 input frames to 50 decoder steps and collapse
the mel axis into channels. The decoder alternates factorized time/frequency
convolutions with bidirectional Mamba layers. Heads emit, per step, track and
class: a Tanh-bounded frontal direction vector (x, y) whose norm encodes
activity, and a ReLU-bounded distance in meters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import Tensor
from .labels import EventLabel, fold_azimuth
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .ssm import MambaBlock, MambaBlockConfig

TIME_DOWNSAMPLE = 5  # 250 feature frames -> 50 label frames


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 64, 128, 128)
    pools: tuple[tuple[int, int], ...] = ((1, 2), (5, 2), (1, 2), (1, 2), (1, 2), (1, 2))
    in_channels: int = 7

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        self.pools = tuple(tuple(p) for p in self.pools)
        if len(self.channels) != 6 or len(self.pools) != 6:
            raise ValueError("encoder uses exactly six blocks")
        t_prod = int(np.prod([p[0] for p in self.pools]))
        if t_prod != TIME_DOWNSAMPLE:
            raise ValueError(f"time pooling product must be {TIME_DOWNSAMPLE}, got {t_prod}")

    @property
    def freq_downsample(self) -> int:
        return int(np.prod([p[1] for p in self.pools]))


@dataclass
class SeldModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d_model: int = 128
    n_decoder_layers: int = 2
    d_state: int = 16
    expand: int = 2
    conv_kernel: int = 4
    use_asymmetric_conv: bool = True
    asym_kernel: int = 3
    asym_channels: int = 32
    tracks: int = 3
    classes: int = 13
    n_mels: int = 64

    def __post_init__(self) -> None:
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.tracks < 1 or self.classes < 1:
            raise ValueError("tracks and classes must be >= 1")
        if self.use_asymmetric_conv and self.d_model % self.asym_channels:
            raise ValueError("asym_channels must divide d_model")
        if self.n_mels % self.encoder.freq_downsample:
            raise ValueError("frequency pooling must divide n_mels")

    @property
    def d_encoder(self) -> int:
        return self.encoder.channels[-1] * (self.n_mels // self.encoder.freq_downsample)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeldModelConfig":
        d = dict(d)
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


class ConvBlock(Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> average pool."""

    def __init__(self, c_in: int, c_out: int, pool: tuple[int, int],
                 rng: np.random.Generator) -> None:
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        x = ad.relu(self.bn1(self.conv1(x)))
        x = ad.relu(self.bn2(self.conv2(x)))
        return ad.avg_pool2d(x, self.pool)


class Encoder(Module):
    """Six-block convolutional front end: [B,7,T,F] -> [B, T/5, C_last*F_res]."""

    def __init__(self, cfg: EncoderConfig, n_mels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        blocks = []
        c_in = cfg.in_channels
        for c_out, pool in zip(cfg.channels, cfg.pools):
            blocks.append(ConvBlock(c_in, c_out, pool, rng))
            c_in = c_out
        self.blocks = blocks
        self.n_mels = n_mels

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ad.ShapeError(
                f"encoder expects [B,{self.cfg.in_channels},T,F], got {x.shape}")
        for block in self.blocks:
            x = block(x)
        b, c, t, f = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, c * f))


class AsymmetricConvBlock(Module):
    """Residual factorized conv: (1xk across frequency) then (kx1 across time)."""

    def __init__(self, channels: int, kernel: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv_freq = Conv2d(channels, channels, kernel=(1, kernel), rng=rng)
        self.bn_freq = BatchNorm2d(channels)
        self.conv_time = Conv2d(channels, channels, kernel=(kernel, 1), rng=rng)
        self.bn_time = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        h = ad.relu(self.bn_freq(self.conv_freq(x)))
        h = ad.relu(self.bn_time(self.conv_time(h)))
        return ad.add(h, x)


class BiMambaLayer(Module):
    """Forward and time-reversed Mamba blocks, concatenated and fused."""

    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.fwd = MambaBlock(cfg, rng)
        self.bwd = MambaBlock(cfg, rng)
        self.fuse = Linear(2 * cfg.d_model, cfg.d_model, bias=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        forward_out = self.fwd(x)
        backward_out = ad.reverse(self.bwd(ad.reverse(x, 1)), 1)
        return self.fuse(ad.concat([forward_out, backward_out], axis=2))


class SeldModel(Module):
    """Encoder, decoder stack, and constrained output heads."""

    def __init__(self, cfg: SeldModelConfig, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder, cfg.n_mels, rng)
        self.in_proj = Linear(cfg.d_encoder, cfg.d_model, rng=rng)
        block_cfg = MambaBlockConfig(d_model=cfg.d_model, d_state=cfg.d_state,
                                     expand=cfg.expand, conv_kernel=cfg.conv_kernel)
        self.asym_blocks = ([AsymmetricConvBlock(cfg.asym_channels, cfg.asym_kernel, rng)
                             for _ in range(cfg.n_decoder_layers)]
                            if cfg.use_asymmetric_conv else [])
        self.decoder_layers = [BiMambaLayer(block_cfg, rng)
                               for _ in range(cfg.n_decoder_layers)]
        out_cells = cfg.tracks * cfg.classes
        self.doa_head = Linear(cfg.d_model, out_cells * 2, rng=rng)
        self.dist_head = Linear(cfg.d_model, out_cells, rng=rng)
        # slightly positive bias keeps the ReLU distance units alive at init
        self.dist_head.bias.data[:] = 0.1

    def _apply_asym(self, x: Tensor, i: int) -> Tensor:
        # treat d_model as (channels, residual-frequency) so the factorized
        # convs see a genuine 2-D time/frequency map
        b, length, d = x.shape
        c = self.cfg.asym_channels
        f = d // c
        grid = ad.transpose(ad.reshape(x, (b, length, c, f)), (0, 2, 1, 3))
        grid = self.asym_blocks[i](grid)
        return ad.reshape(ad.transpose(grid, (0, 2, 1, 3)), (b, length, d))

    def decode_sequence(self, x: Tensor) -> Tensor:
        """Decoder stack on [B, L, d_model]."""
        for i, layer in enumerate(self.decoder_layers):
            if self.cfg.use_asymmetric_conv:
                x = self._apply_asym(x, i)
            x = layer(x)
        return x

    def forward(self, feat: Tensor) -> Tensor:
        """[B, 7, T, n_mels] -> [B, T/5, tracks, classes, 3] with (x, y, distance)."""
        enc = self.encoder(feat)
        dec = self.decode_sequence(self.in_proj(enc))
        b, length, _ = dec.shape
        t, c = self.cfg.tracks, self.cfg.classes
        doa = ad.tanh(self.doa_head(dec))
        doa = ad.reshape(doa, (b, length, t, c, 2))
        dist = ad.relu(self.dist_head(dec))
        dist = ad.reshape(dist, (b, length, t, c, 1))
        return ad.concat([doa, dist], axis=4)


# ---------------------------------------------------------------------------
# Prediction decoding
# ---------------------------------------------------------------------------


def decode_predictions(output: np.ndarray, act_threshold: float = 0.5,
                       unify_deg: float = 15.0) -> list[EventLabel]:
    """Turn one clip's output [frames, tracks, classes, 3] into event labels.

    A track is active when its direction norm exceeds ``act_threshold``.
    Active tracks of the same class whose azimuths lie within ``unify_deg``
    are averaged into a single event (the duplicated-target training scheme
    drives all tracks toward the same value for a single source); set
    ``unify_deg=0`` to disable merging.
    """
    output = np.asarray(output)
    if output.ndim != 4 or output.shape[3] != 3:
        raise ValueError(f"expected [frames, tracks, classes, 3], got {output.shape}")
    frames, tracks, classes, _ = output.shape
    events: list[EventLabel] = []
    for f in range(frames):
        for c in range(classes):
            active = []
            for t in range(tracks):
                x, y, dist = output[f, t, c]
                if np.hypot(x, y) > act_threshold:
                    active.append((fold_azimuth(np.degrees(np.arctan2(y, x))),
                                   max(float(dist), 0.0)))
            clusters: list[list[tuple[float, float]]] = []
            for az, dist in active:
                for cluster in clusters:
                    center = sum(a for a, _ in cluster) / len(cluster)
                    if unify_deg > 0 and abs(az - center) <= unify_deg:
                        cluster.append((az, dist))
                        break
                else:
                    clusters.append([(az, dist)])
            for k, cluster in enumerate(clusters):
                az = sum(a for a, _ in cluster) / len(cluster)
                dist = sum(d for _, d in cluster) / len(cluster)
                events.append(EventLabel(frame=f, class_id=c, source_id=k,
                                         azimuth_deg=az, distance_m=dist))
    return events


# ---------------------------------------------------------------------------
# Parameter and MAC accounting
# ---------------------------------------------------------------------------


def _mamba_param_count(d_model: int, d_state: int, expand: int, k: int) -> int:
    di = expand * d_model
    return (d_model * 2 * di        # in_proj
            + di * k + di           # depthwise conv
            + 2 * di * d_state      # b_proj, c_proj
            + di * di + di          # dt_proj
            + di * d_state          # a_log
            + di                    # d_skip
            + di * d_model)         # out_proj


def count_params(cfg: SeldModelConfig) -> int:
    """Closed-form trainable-parameter count for a model configuration."""
    total = 0
    c_in = cfg.encoder.in_channels
    for c_out in cfg.encoder.channels:
        total += 9 * c_in * c_out + c_out + 2 * c_out      # conv1 + bn1
        total += 9 * c_out * c_out + c_out + 2 * c_out     # conv2 + bn2
        c_in = c_out
    total += cfg.d_encoder * cfg.d_model + cfg.d_model     # in_proj
    if cfg.use_asymmetric_conv:
        ac, k = cfg.asym_channels, cfg.asym_kernel
        per_asym = 2 * (k * ac * ac + ac + 2 * ac)
        total += cfg.n_decoder_layers * per_asym
    per_block = _mamba_param_count(cfg.d_model, cfg.d_state, cfg.expand, cfg.conv_kernel)
    per_layer = 2 * per_block + 2 * cfg.d_model * cfg.d_model + cfg.d_model
    total += cfg.n_decoder_layers * per_layer
    cells = cfg.tracks * cfg.classes
    total += cfg.d_model * cells * 2 + cells * 2           # doa head
    total += cfg.d_model * cells + cells                   # dist head
    return total


# multiply-accumulates charged per scan step per (channel, state) element:
# discretize (delta*a, exp folded as 1, phi*delta*b*x as 3) + recurrence 2 + output 1
SCAN_MACS_PER_ELEMENT = 6


def estimate_macs_parts(cfg: SeldModelConfig, input_shape=(7, 250, 64)) -> dict[str, int]:
    """Per-section multiply-accumulate estimate for one input of ``input_shape``.

    Counts convolution/linear/scan multiplies; normalization and activations
    are excluded. Decoder cost is linear in the sequence length.
    """
    _, t, f = input_shape
    enc = 0
    c_in = cfg.encoder.in_channels
    for c_out, (pt, pf) in zip(cfg.encoder.channels, cfg.encoder.pools):
        enc += 9 * c_in * c_out * t * f
        enc += 9 * c_out * c_out * t * f
        t //= pt
        f //= pf
        c_in = c_out
    length = t  # decoder steps after time pooling

    dec = length * cfg.d_encoder * cfg.d_model  # in_proj
    di = cfg.expand * cfg.d_model
    per_block = length * (
        cfg.d_model * 2 * di
        + di * cfg.conv_kernel
        + 2 * di * cfg.d_state
        + di * di
        + SCAN_MACS_PER_ELEMENT * di * cfg.d_state
        + di                       # gating multiply
        + di * cfg.d_model)
    per_layer = 2 * per_block + length * 2 * cfg.d_model * cfg.d_model
    if cfg.use_asymmetric_conv:
        f_d = cfg.d_model // cfg.asym_channels
        per_layer += 2 * cfg.asym_kernel * cfg.asym_channels ** 2 * length * f_d
    dec += cfg.n_decoder_layers * per_layer

    heads = length * cfg.d_model * cfg.tracks * cfg.classes * 3
    return {"encoder": enc, "decoder": dec, "heads": heads,
            "total": enc + dec + heads}


def estimate_macs(cfg: SeldModelConfig, input_shape=(7, 250, 64)) -> int:
    return estimate_macs_parts(cfg, input_shape)["total"]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CONFIG_KEY = "__config__"


def save_checkpoint(path, model: SeldModel) -> None:
    """Named-tensor checkpoint with the model configuration embedded."""
    tensors = model.state_dict()
    blob = json.dumps(model.cfg.to_dict()).encode("utf-8")
    tensors[_CONFIG_KEY] = np.frombuffer(blob, dtype=np.uint8).copy()
    tensorio.save_named(path, tensors)


def load_checkpoint(path) -> SeldModel:
    tensors = tensorio.load_named(path)
    if _CONFIG_KEY not in tensors:
        raise tensorio.FormatError(f"{path}: missing embedded model config")
    cfg = SeldModelConfig.from_dict(json.loads(tensors.pop(_CONFIG_KEY).tobytes().decode()))
    model = SeldModel(cfg, rng=np.random.default_rng(0))
    model.load_state_dict(tensors)
    model.eval()
    return model
