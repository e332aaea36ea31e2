"""Deterministic log-mel audio features at the video frame rate."""
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParamsError

FPS = 30
SAMPLE_RATE = 16000
N_MELS = 32
N_FFT = 512
WIN_LENGTH = 400  # 25 ms at 16 kHz
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioFeatureSeq:
    frames: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64, copy=True)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise InvalidParamsError(f"audio features must be T x D with T >= 1, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InvalidParamsError("non-finite audio features")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels=N_MELS, sample_rate=SAMPLE_RATE):
    """``(n_mels + 2,)`` HTK-mel spaced edge frequencies in Hz; band ``b`` spans edges ``b..b+2``."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE):
    edges = mel_band_edges(n_mels, sample_rate)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


def n_video_frames(n_samples, sample_rate=SAMPLE_RATE, fps=FPS):
    return max(1, int(np.floor(n_samples * fps / sample_rate + 1e-9)))


def log_mel(waveform, sample_rate=SAMPLE_RATE, n_mels=N_MELS):
    """Un-normalized log-mel energies, one row per video frame."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidParamsError("expected a mono waveform")
    if x.size == 0:
        raise InvalidParamsError("empty waveform")
    if sample_rate != SAMPLE_RATE:
        raise InvalidParamsError(f"unsupported sample rate {sample_rate}; only {SAMPLE_RATE} Hz")
    n = n_video_frames(x.size, sample_rate)
    hop = sample_rate / FPS
    starts = np.round((np.arange(n) + 0.5) * hop - WIN_LENGTH / 2).astype(np.int64)
    idx = starts[:, None] + np.arange(WIN_LENGTH)
    padded = np.concatenate([x, np.zeros(1)])
    valid = (idx >= 0) & (idx < x.size)
    frames = np.where(valid, padded[np.clip(idx, 0, x.size)], 0.0)
    spec = np.abs(np.fft.rfft(frames * np.hanning(WIN_LENGTH), n=N_FFT)) ** 2
    return np.log(spec @ mel_filterbank(n_mels, N_FFT, sample_rate).T + LOG_FLOOR)


def normalize_bands(feats, var_floor=1e-8):
    mean = feats.mean(axis=0)
    var = feats.var(axis=0)
    safe = np.where(var < var_floor, 1.0, var)
    return np.where(var < var_floor, 0.0, (feats - mean) / np.sqrt(safe))


def extract_audio_features(waveform, sample_rate=SAMPLE_RATE, n_mels=N_MELS):
    """Per-band standardized log-mel features at 30 frames/s."""
    return AudioFeatureSeq(normalize_bands(log_mel(waveform, sample_rate, n_mels)))


def read_wav(path):
    """16-bit mono WAV -> (float waveform in [-1, 1), sample_rate)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise InvalidParamsError(f"{path}: expected 16-bit mono WAV")
        rate = wf.getframerate()
        data = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32768.0, rate


def write_wav(path, waveform, sample_rate=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())
