"""Stereo-to-feature front end.

Stereo PCM is mapped to a pseudo first-order-ambisonics set (mid-side
inverse: W = (L+R)/2, Y = (L-R)/2, X = Z = 0), then to a 7-channel feature
tensor: log-mel spectrograms of W, Y, X, Z followed by the three normalized
active-intensity channels I_x, I_y, I_z, each on a 64-band mel grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

EPS = 1e-10
LOG_FLOOR = np.log10(EPS)

SAMPLE_RATE = 24000
SEGMENT_FRAMES = 250
FRAMES_PER_LABEL = 5  # 20 ms feature hop vs 100 ms label frames


@dataclass
class StereoClip:
    """Two equal-length PCM channels at 24 kHz."""

    left: np.ndarray
    right: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.shape != self.right.shape or self.left.ndim != 1:
            raise ValueError("stereo channels must be 1-D and equal length")
        if not (np.all(np.isfinite(self.left)) and np.all(np.isfinite(self.right))):
            raise ValueError("stereo samples must be finite")

    def __len__(self) -> int:
        return self.left.shape[0]


@dataclass
class PseudoFoaClip:
    """ACN/SN3D-ordered W, Y, X, Z channels; X and Z are structurally zero."""

    w: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray


def stereo_to_pseudo_foa(clip: StereoClip) -> PseudoFoaClip:
    """Mid-side inversion: W = (L+R)/2, Y = (L-R)/2, X = Z = 0."""
    w = (clip.left + clip.right) / 2.0
    y = (clip.left - clip.right) / 2.0
    zeros = np.zeros_like(w)
    return PseudoFoaClip(w=w, y=y, x=zeros, z=zeros.copy())


@dataclass
class StftConfig:
    sample_rate: int = SAMPLE_RATE
    win_length: int = 960   # 40 ms
    hop_length: int = 480   # 20 ms
    fft_size: int = 1024

    def __post_init__(self) -> None:
        if self.hop_length > self.win_length:
            raise ValueError("hop must not exceed window length")
        if self.fft_size < self.win_length or self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two >= win_length")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def num_frames(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.win_length:
        return 0
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def stft(signal: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex spectrogram [frames, bins]; frame t covers [t*hop, t*hop+win)."""
    signal = np.asarray(signal, dtype=np.float64)
    frames = num_frames(signal.shape[0], cfg)
    if frames == 0:
        raise ValueError(
            f"signal of {signal.shape[0]} samples shorter than window {cfg.win_length}")
    window = hann_periodic(cfg.win_length)
    idx = (np.arange(frames)[:, None] * cfg.hop_length + np.arange(cfg.win_length)[None, :])
    return np.fft.rfft(signal[idx] * window[None, :], n=cfg.fft_size, axis=1)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    """Triangular mel filters over rfft bins (peak height 1, no normalization)."""

    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 12000.0
    cfg: StftConfig = field(default_factory=StftConfig)
    weights: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if not 0 <= self.fmin < self.fmax <= self.cfg.sample_rate / 2:
            raise ValueError("mel range must satisfy 0 <= fmin < fmax <= nyquist")
        bin_freqs = np.arange(self.cfg.n_bins) * self.cfg.sample_rate / self.cfg.fft_size
        mel_pts = np.linspace(_hz_to_mel(self.fmin), _hz_to_mel(self.fmax), self.n_mels + 2)
        f_pts = _mel_to_hz(mel_pts)
        w = np.zeros((self.n_mels, self.cfg.n_bins))
        for i in range(self.n_mels):
            lo, center, hi = f_pts[i], f_pts[i + 1], f_pts[i + 2]
            rising = (bin_freqs - lo) / (center - lo)
            falling = (hi - bin_freqs) / (hi - center)
            w[i] = np.clip(np.minimum(rising, falling), 0.0, None)
        sums = w.sum(axis=1)
        if np.any(sums <= 0):
            raise ValueError("mel filterbank has an empty band; widen the range "
                             "or lower n_mels")
        self.weights = w
        self._band_sums = sums

    @property
    def band_sums(self) -> np.ndarray:
        return self._band_sums


def log_mel(spec: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """log10 mel power [frames, n_mels], floored at log10(1e-10)."""
    if spec.shape[1] != fb.weights.shape[1]:
        raise ValueError(f"spectrogram has {spec.shape[1]} bins, filterbank "
                         f"expects {fb.weights.shape[1]}")
    power = np.abs(spec) ** 2
    return np.log10(power @ fb.weights.T + EPS)


def intensity_vectors(w_spec: np.ndarray, x_spec: np.ndarray, y_spec: np.ndarray,
                      z_spec: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Normalized active intensity on the mel grid, stacked [3 (x,y,z), T, n_mels].

    Per bin: I_dir = Re(conj(W) * dir) / (|W|^2 + (|X|^2+|Y|^2+|Z|^2)/3 + eps),
    then a filter-weighted average per band. The normalization bounds every
    value in [-1, 1].
    """
    shapes = {w_spec.shape, x_spec.shape, y_spec.shape, z_spec.shape}
    if len(shapes) != 1:
        raise ValueError("W, X, Y, Z spectrograms must share a shape")
    denom = (np.abs(w_spec) ** 2
             + (np.abs(x_spec) ** 2 + np.abs(y_spec) ** 2 + np.abs(z_spec) ** 2) / 3.0
             + EPS)
    out = np.empty((3, w_spec.shape[0], fb.n_mels))
    wc = np.conj(w_spec)
    for i, dir_spec in enumerate((x_spec, y_spec, z_spec)):
        ratio = np.real(wc * dir_spec) / denom
        out[i] = (ratio @ fb.weights.T) / fb.band_sums[None, :]
    return out


@dataclass
class FeatureSegment:
    """One 250-frame slice of the 7-channel feature tensor.

    ``valid_frames`` counts real (non-padded) feature frames; the rest are
    zero padding at the clip tail.
    """

    data: np.ndarray     # [7, SEGMENT_FRAMES, n_mels]
    valid_frames: int
    index: int = 0

    @property
    def valid_label_frames(self) -> int:
        return int(np.ceil(self.valid_frames / FRAMES_PER_LABEL))


def extract_features(clip: StereoClip, cfg: StftConfig | None = None,
                     fb: MelFilterbank | None = None,
                     segment_frames: int = SEGMENT_FRAMES) -> list[FeatureSegment]:
    """Full front end: stereo clip to a list of padded feature segments."""
    cfg = cfg if cfg is not None else StftConfig()
    fb = fb if fb is not None else MelFilterbank(cfg=cfg)
    foa = stereo_to_pseudo_foa(clip)
    specs = {name: stft(getattr(foa, name), cfg) for name in ("w", "y", "x", "z")}
    frames = specs["w"].shape[0]
    feat = np.empty((7, frames, fb.n_mels))
    feat[0] = log_mel(specs["w"], fb)
    feat[1] = log_mel(specs["y"], fb)
    feat[2] = log_mel(specs["x"], fb)
    feat[3] = log_mel(specs["z"], fb)
    feat[4:7] = intensity_vectors(specs["w"], specs["x"], specs["y"], specs["z"], fb)

    segments = []
    n_segments = int(np.ceil(frames / segment_frames))
    for i in range(n_segments):
        chunk = feat[:, i * segment_frames:(i + 1) * segment_frames, :]
        valid = chunk.shape[1]
        if valid < segment_frames:
            pad = np.zeros((7, segment_frames - valid, fb.n_mels))
            chunk = np.concatenate([chunk, pad], axis=1)
        segments.append(FeatureSegment(data=chunk, valid_frames=valid, index=i))
    return segments


def acs_swap_features(feat: np.ndarray) -> np.ndarray:
    """Feature-domain equivalent of swapping the stereo channels.

    Swapping L and R negates Y, which leaves every log-mel channel and the
    X/Z intensities unchanged and negates the Y intensity (channel 5).
    """
    out = feat.copy()
    out[5] = -out[5]
    return out


# ---------------------------------------------------------------------------
# Audio file handling
# ---------------------------------------------------------------------------


def resample_linear(signal: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Linear-interpolation resampling (identity when rates match)."""
    if sr_in == sr_out:
        return np.asarray(signal, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    n_out = int(round(signal.shape[0] * sr_out / sr_in))
    t_out = np.arange(n_out) / sr_out
    t_in = np.arange(signal.shape[0]) / sr_in
    return np.interp(t_out, t_in, signal)


def load_stereo_wav(path, target_sr: int = SAMPLE_RATE) -> StereoClip:
    """Read a 2-channel WAV (int16/int32/float32), resampling to 24 kHz."""
    sr, data = wavfile.read(str(path))
    if data.ndim != 2 or data.shape[1] != 2:
        raise ValueError(f"{path}: expected 2-channel WAV, got shape {data.shape}")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    left = resample_linear(data[:, 0], sr, target_sr)
    right = resample_linear(data[:, 1], sr, target_sr)
    return StereoClip(left=left, right=right, sample_rate=target_sr)


def save_stereo_wav(path, clip: StereoClip) -> None:
    """Write 16-bit PCM stereo, clipping to [-1, 1)."""
    stacked = np.stack([clip.left, clip.right], axis=1)
    pcm = np.clip(np.round(stacked * 32767.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, pcm)
