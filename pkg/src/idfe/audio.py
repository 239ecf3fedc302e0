"""Waveform preprocessing: edge trimming, fixed-length cropping,
SNR-controlled mixing, impulse-response convolution, augmentation,
and 16-bit PCM WAV I/O.

All randomness comes from an explicit ``numpy.random.Generator``.
"""

import csv
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import AssetError, DegenerateNoiseError, EmptyAudioError, ParameterError

POLICIES = ("reverb", "speech", "music", "noise")

# (low, high) SNR in dB per additive policy
SNR_RANGES = {"speech": (13.0, 20.0), "music": (5.0, 15.0), "noise": (0.0, 15.0)}
SPEECH_COUNT = (3, 8)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ParameterError(f"sample rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ParameterError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ParameterError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def replace(self, samples):
        return Waveform(samples, self.sample_rate)


def rms(x):
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def frame_rms(x, frame_length=2048, hop_length=512):
    """RMS of frames starting every ``hop_length`` samples.

    Frames overrunning the end are zero-padded; one frame starts at every
    hop position before the end of the signal.
    """
    n = len(x)
    n_frames = -(-n // hop_length)
    padded = np.zeros((n_frames - 1) * hop_length + frame_length)
    padded[:n] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_length)[::hop_length]
    return np.sqrt(np.mean(np.square(frames[:n_frames]), axis=1))


def trim_edges(w: Waveform, top_db=40.0, frame_length=2048, hop_length=512):
    """Drop leading and trailing frames quieter than ``max - top_db``.

    Levels are frame RMS in dB relative to the loudest frame. The kept
    span runs from the first loud frame's start to the last loud frame's
    end, so interior samples are never touched.
    """
    if top_db <= 0:
        raise ParameterError(f"top_db must be positive, got {top_db}")
    if frame_length < 1 or not 1 <= hop_length <= frame_length:
        raise ParameterError(f"need 1 <= hop ({hop_length}) <= frame ({frame_length})")
    if len(w) == 0:
        raise EmptyAudioError("cannot trim an empty waveform")
    levels = frame_rms(w.samples, frame_length, hop_length)
    peak = levels.max()
    if peak == 0.0:
        raise EmptyAudioError("every frame is silent")
    db = 20.0 * np.log10(np.maximum(levels, 1e-10) / peak)
    loud = np.flatnonzero(db > -top_db)
    start = loud[0] * hop_length
    end = min(len(w), loud[-1] * hop_length + frame_length)
    return w.replace(w.samples[start:end])


def crop_or_wrap(x, length, rng, axis=0):
    """Random contiguous crop of ``length`` along ``axis``, or cyclic repetition if shorter."""
    x = np.asarray(x)
    n = x.shape[axis]
    if n == 0:
        raise EmptyAudioError("cannot crop or wrap an empty signal")
    if n >= length:
        start = int(rng.integers(0, n - length + 1))
        return np.take(x, np.arange(start, start + length), axis=axis)
    return np.take(x, np.arange(length) % n, axis=axis)


def segment(w: Waveform, seconds=4.0, rng=None):
    """Fixed-length training clip of ``round(seconds * sample_rate)`` samples."""
    if seconds <= 0:
        raise ParameterError(f"segment length must be positive, got {seconds}")
    if len(w) == 0:
        raise EmptyAudioError("cannot segment an empty waveform")
    target = int(round(seconds * w.sample_rate))
    if rng is None:
        rng = np.random.default_rng()
    return w.replace(crop_or_wrap(w.samples, target, rng))


def _check_rates(a, b):
    if a.sample_rate != b.sample_rate:
        raise ParameterError(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")


def snr_gain(signal, noise, snr_db):
    """Gain that puts ``noise`` at ``snr_db`` below ``signal`` (RMS-based)."""
    noise_rms = rms(noise)
    if noise_rms == 0.0:
        raise DegenerateNoiseError("noise is silent; SNR is undefined")
    return rms(signal) / noise_rms * 10.0 ** (-snr_db / 20.0)


def mix_at_snr(signal: Waveform, noise: Waveform, snr_db, rng):
    """Add ``noise`` (cropped or wrapped to length) at the requested SNR."""
    _check_rates(signal, noise)
    if len(noise) == 0 or not np.any(noise.samples):
        raise DegenerateNoiseError("noise is silent; SNR is undefined")
    fitted = crop_or_wrap(noise.samples, len(signal), rng)
    g = snr_gain(signal.samples, fitted, snr_db)
    return signal.replace(signal.samples + g * fitted)


def convolve_ir(signal: Waveform, ir: Waveform):
    """Linear convolution truncated to the signal length, peak-normalized above 1."""
    _check_rates(signal, ir)
    if len(ir) == 0:
        raise ParameterError("impulse response is empty")
    if len(signal) == 0:
        return signal
    out = fftconvolve(signal.samples, ir.samples)[: len(signal)]
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    return signal.replace(out)


@dataclass
class AudioAssets:
    """Pools for augmentation: impulse responses and speech/music/noise recordings."""

    rir: list = field(default_factory=list)
    speech: list = field(default_factory=list)
    music: list = field(default_factory=list)
    noise: list = field(default_factory=list)

    @classmethod
    def from_manifest(cls, path):
        """Load a TSV of ``path<TAB>category`` rows (category in rir/speech/music/noise)."""
        path = Path(path)
        assets = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
                if not row or row[0].startswith("#") or row[:2] == ["path", "category"]:
                    continue
                if len(row) != 2 or row[1] not in ("rir", "speech", "music", "noise"):
                    raise AssetError(f"{path}:{lineno}: expected 'path<TAB>rir|speech|music|noise'")
                audio_path = Path(row[0])
                if not audio_path.is_absolute():
                    audio_path = path.parent / audio_path
                getattr(assets, row[1]).append(read_wav(audio_path))
        return assets


@dataclass
class Augmentation:
    waveform: Waveform
    policy: str
    snrs_db: list
    sources: list  # indices into the asset pool that was used


def augment(signal: Waveform, policy, assets: AudioAssets, rng):
    """Apply one augmentation policy; ``policy=None`` draws one uniformly."""
    if policy is None:
        policy = POLICIES[int(rng.integers(len(POLICIES)))]
    if policy not in POLICIES:
        raise ParameterError(f"unknown augmentation policy {policy!r}; expected one of {POLICIES}")
    pool = getattr(assets, "rir" if policy == "reverb" else policy)
    if not pool:
        raise AssetError(f"no {policy} assets available")

    if policy == "reverb":
        idx = int(rng.integers(len(pool)))
        return Augmentation(convolve_ir(signal, pool[idx]), policy, [], [idx])

    if policy == "speech":
        lo, hi = SPEECH_COUNT
        if len(pool) < lo:
            raise AssetError(f"speech augmentation needs at least {lo} utterances, have {len(pool)}")
        k = int(rng.integers(lo, min(hi, len(pool)) + 1))
        picks = [int(i) for i in rng.choice(len(pool), size=k, replace=False)]
    else:
        picks = [int(rng.integers(len(pool)))]

    lo, hi = SNR_RANGES[policy]
    out = signal.samples.copy()
    snrs = []
    for idx in picks:
        noise = pool[idx]
        _check_rates(signal, noise)
        snr = float(rng.uniform(lo, hi))
        fitted = crop_or_wrap(noise.samples, len(signal), rng)
        out += snr_gain(signal.samples, fitted, snr) * fitted
        snrs.append(snr)
    return Augmentation(signal.replace(out), policy, snrs, picks)


def read_wav(path):
    """Read a 16-bit PCM mono WAV as floats in [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ParameterError(
                f"{path}: need 16-bit mono PCM, got {fh.getnchannels()} channel(s), "
                f"{8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())
