"""Waveform ingestion and the log-mel frontend (16 kHz, 25 ms / 10 ms, 80 mels)."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError

SAMPLE_RATE = 16000
N_FFT = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
FRAME_RATE = SAMPLE_RATE // HOP_LENGTH
N_MELS = 80
LOG_FLOOR_RANGE = 8.0


@dataclass
class AudioInput:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"sample rate {self.sample_rate} Hz, expected {SAMPLE_RATE} (no resampling)")
        if self.samples.size == 0:
            raise DataError("empty audio")

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [n_frames, n_mels]
    frame_rate: int = FRAME_RATE

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def pad_or_trim(audio: AudioInput, target_seconds: float) -> AudioInput:
    if target_seconds <= 0:
        raise ValueError("target_seconds must be positive")
    n = int(round(target_seconds * SAMPLE_RATE))
    x = audio.samples
    if x.size == n:
        return audio
    if x.size > n:
        return AudioInput(x[:n].copy(), audio.sample_rate)
    return AudioInput(np.concatenate([x, np.zeros(n - x.size, dtype=np.float32)]), audio.sample_rate)


def hz_to_mel(f):
    """Slaney-style mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular, area-normalized filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    mel_pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), n_mels + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (mel_pts[2 : n_mels + 2] - mel_pts[:n_mels])
    weights *= enorm[:, None]
    weights.flags.writeable = False
    return weights


def _stft_power(x: np.ndarray) -> np.ndarray:
    window = np.hanning(N_FFT + 1)[:-1]  # periodic Hann
    pad = N_FFT // 2
    padded = np.pad(x.astype(np.float64), pad, mode="reflect")
    n_frames = 1 + (padded.size - N_FFT) // HOP_LENGTH
    idx = np.arange(N_FFT)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(padded[idx] * window, axis=1)
    # drop the final centered frame so n_frames == samples // hop
    return (np.abs(spec) ** 2)[:-1]


def log_mel(audio: AudioInput, n_mels: int = N_MELS) -> MelSpectrogram:
    """Log10 mel power, floored at (max - 8) and rescaled as ``(x + 4) / 4``."""
    x = audio.samples
    if x.size < N_FFT:
        raise DataError(f"audio shorter than one window ({x.size} < {N_FFT} samples)")
    power = _stft_power(x)
    mel = power @ mel_filterbank(n_mels).T
    logs = np.log10(np.maximum(mel, 1e-10))
    logs = np.maximum(logs, logs.max() - LOG_FLOOR_RANGE)
    logs = (logs + 4.0) / 4.0
    return MelSpectrogram(frames=logs.astype(np.float32), frame_rate=FRAME_RATE)


def read_wav(path) -> AudioInput:
    """Read 16-bit mono PCM WAV at 16 kHz."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise DataError(f"{path}: {e}") from e
    except FileNotFoundError as e:
        raise DataError(f"{path}: no such file") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return AudioInput(samples, sr)


def write_wav(path, audio: AudioInput) -> None:
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())


def sine(freq: float, seconds: float, amplitude: float = 0.5, phase: float = 0.0) -> AudioInput:
    t = np.arange(int(round(seconds * SAMPLE_RATE))) / SAMPLE_RATE
    return AudioInput(amplitude * np.sin(2 * np.pi * freq * t + phase))
