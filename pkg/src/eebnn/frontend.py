"""Log-compressed Mel-filterbank front-end for 16 kHz mono audio.

Defaults: 25 ms Hann window, 10 ms hop, 512-point FFT, 64 triangular mel
filters between 60 and 7800 Hz (HTK mel scale, 2595*log10(1 + f/700)), and
log(x + 1e-6) compression. A one-second clip at the defaults produces a
(98, 64) feature.
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class WavFormatError(ValueError):
    """Raised when a WAV file is not 16-bit PCM mono at the expected rate."""


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    fmin: float = 60.0
    fmax: float = 7800.0
    fft_size: int = 512
    log_floor: float = 1e-6

    def __post_init__(self):
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}..{self.fmax}")
        if self.window_samples > self.fft_size:
            raise ValueError(f"window ({self.window_samples} samples) exceeds fft_size {self.fft_size}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.hop_samples < 1:
            raise ValueError("hop must be at least one sample")

    @property
    def window_samples(self) -> int:
        return round(self.sample_rate * self.window_ms / 1000)

    @property
    def hop_samples(self) -> int:
        return round(self.sample_rate * self.hop_ms / 1000)

    @property
    def n_spectrum_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class MelFeature:
    """A frames x mel-bins matrix of log filterbank energies."""

    data: np.ndarray  # (T, n_mels) float32
    duration_ms: float

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


def frame_count(n_samples: int, cfg: FrontendConfig) -> int:
    return (n_samples - cfg.window_samples) // cfg.hop_samples + 1


def frame_and_window(pcm: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Slice PCM into hop-spaced frames and apply a periodic Hann window."""
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.ndim != 1:
        raise ValueError("expected mono PCM (1-D array)")
    win = cfg.window_samples
    if len(pcm) < win:
        raise ValueError(f"input of {len(pcm)} samples is shorter than one {win}-sample window")
    t = frame_count(len(pcm), cfg)
    idx = np.arange(win)[None, :] + cfg.hop_samples * np.arange(t)[:, None]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    return pcm[idx] * hann[None, :]


def power_spectrum(frames: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Magnitude-squared one-sided DFT of each frame, zero-padded to fft_size."""
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return np.abs(spec) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular mel filters as an (n_mels, fft_size/2 + 1) matrix."""
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.arange(cfg.n_spectrum_bins) * cfg.sample_rate / cfg.fft_size
    bank = np.zeros((cfg.n_mels, cfg.n_spectrum_bins))
    for m in range(cfg.n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_hz - lo) / (center - lo)
        down = (hi - bin_hz) / (hi - center)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


def filter_centers_hz(cfg: FrontendConfig) -> np.ndarray:
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def mel_project_log(spec: np.ndarray, cfg: FrontendConfig, duration_ms: float | None = None) -> MelFeature:
    """Project a power spectrum onto the mel bank and log-compress."""
    energies = spec @ mel_filterbank(cfg).T
    data = np.log(energies + cfg.log_floor).astype(np.float32)
    if duration_ms is None:
        duration_ms = (spec.shape[0] - 1) * cfg.hop_ms + cfg.window_ms
    return MelFeature(data=data, duration_ms=float(duration_ms))


def featurize(
    pcm: np.ndarray,
    cfg: FrontendConfig = FrontendConfig(),
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> MelFeature:
    """Full front-end: framing, power spectrum, mel projection, log.

    Training mode takes a random one-second crop (clips shorter than one
    second are zero-padded at the end); evaluation mode uses the whole clip.
    """
    pcm = np.asarray(pcm, dtype=np.float64)
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    duration_ms = 1000.0 * len(pcm) / cfg.sample_rate
    if mode == "train":
        crop = cfg.sample_rate
        if len(pcm) < crop:
            pcm = np.concatenate([pcm, np.zeros(crop - len(pcm))])
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            offset = int(rng.integers(0, len(pcm) - crop + 1))
            pcm = pcm[offset : offset + crop]
    frames = frame_and_window(pcm, cfg)
    spec = power_spectrum(frames, cfg)
    return mel_project_log(spec, cfg, duration_ms=duration_ms)


def load_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV file as float32 in [-1, 1).

    Raises WavFormatError for any other encoding, or when expected_rate is
    given and the file's rate differs.
    """
    path = Path(path)
    try:
        wf = wave.open(str(path), "rb")
    except (OSError, EOFError, wave.Error) as e:
        raise WavFormatError(f"{path}: {e}") from e
    with wf:
        if wf.getcomptype() != "NONE":
            raise WavFormatError(f"{path}: compressed WAV ({wf.getcomptype()}) not supported")
        if wf.getnchannels() != 1:
            raise WavFormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        rate = wf.getframerate()
        if expected_rate is not None and rate != expected_rate:
            raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return pcm, rate


def write_wav(path, pcm: np.ndarray, rate: int) -> None:
    """Write float PCM in [-1, 1] as a 16-bit mono WAV file."""
    samples = np.clip(np.asarray(pcm, dtype=np.float64), -1.0, 1.0)
    ints = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(ints.tobytes())
