"""Audio buffers, WAV I/O, resampling and CSV envelope matrices."""
from __future__ import annotations

import errno
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

INTERNAL_RATE = 16000


class AudioFormatError(ValueError):
    """Raised for unreadable or unsupported audio and matrix files."""


@dataclass
class AudioBuffer:
    """Mono signal with its sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class EnvelopeMatrix:
    """Nonnegative M x T envelope (or latent) matrix sampled at ``frame_rate``.

    ``channel_freqs`` may be None when the matrix was loaded from a CSV file,
    which does not carry centre frequencies.
    """

    values: np.ndarray
    frame_rate: float
    channel_freqs: np.ndarray | None = field(default=None)
    nonnegative: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"envelope matrix must be M x T with M, T >= 1, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("envelope matrix contains non-finite values")
        if self.nonnegative and np.any(v < 0):
            raise ValueError("envelope values must be nonnegative")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        self.values = v
        self.frame_rate = float(self.frame_rate)
        if self.channel_freqs is not None:
            cf = np.asarray(self.channel_freqs, dtype=float).ravel()
            if cf.size != v.shape[0]:
                raise ValueError("channel_freqs length must equal the number of rows")
            if cf.size > 1 and np.any(np.diff(cf) <= 0):
                raise ValueError("channel_freqs must be strictly increasing")
            self.channel_freqs = cf

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    def rows(self, idx) -> "EnvelopeMatrix":
        idx = np.asarray(idx, dtype=int)
        cf = None if self.channel_freqs is None else self.channel_freqs[idx]
        return EnvelopeMatrix(self.values[idx], self.frame_rate, cf, self.nonnegative)


def read_wav(path) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file as a mono buffer scaled to [-1, 1].

    Multichannel files are averaged to mono.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(errno.ENOENT, "no such audio file", str(path))
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:  # scipy raises ValueError and others for bad headers
        raise AudioFormatError(f"cannot read WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(float)
    else:
        raise AudioFormatError(f"unsupported WAV encoding {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioFormatError(f"zero-length audio in {path}")
    return AudioBuffer(x, rate)


def write_wav(buffer: AudioBuffer, path) -> None:
    """Write ``buffer`` as a float32 WAV file (values are not clipped)."""
    if len(buffer) == 0:
        raise ValueError("cannot write an empty audio buffer")
    path = Path(path)
    try:
        wavfile.write(path, buffer.sample_rate, buffer.samples.astype(np.float32))
    except OSError as exc:
        raise OSError(f"cannot write WAV file {path}: {exc}") from exc


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited (polyphase windowed-sinc) resampling to ``target_rate``."""
    if not target_rate > 0:
        raise ValueError("target_rate must be positive")
    target_rate = int(target_rate)
    if target_rate == buffer.sample_rate:
        return AudioBuffer(buffer.samples.copy(), target_rate)
    ratio = Fraction(target_rate, buffer.sample_rate)
    y = resample_poly(buffer.samples, ratio.numerator, ratio.denominator, padtype="line")
    n_out = int(math.ceil(len(buffer) * target_rate / buffer.sample_rate))
    return AudioBuffer(y[:n_out], target_rate)


def load_audio(path, rate: int = INTERNAL_RATE) -> AudioBuffer:
    """Read a WAV file and resample it to the internal processing rate."""
    return resample(read_wav(path), rate)


_HEADER = re.compile(r"#\s*channels=(\d+)\s+frames=(\d+)\s+frame_rate=([0-9.eE+-]+)\s*$")


def write_matrix_csv(matrix: EnvelopeMatrix, path) -> None:
    """Write ``matrix`` as CSV, one row per channel, one column per frame."""
    m, t = matrix.values.shape
    with open(path, "w") as fh:
        fh.write(f"# channels={m} frames={t} frame_rate={matrix.frame_rate:.17g}\n")
        np.savetxt(fh, matrix.values, delimiter=",", fmt="%.17g")


def read_matrix_csv(path, nonnegative: bool = True) -> EnvelopeMatrix:
    """Read a matrix written by :func:`write_matrix_csv`.

    Raises AudioFormatError naming the offending line on malformed input.
    """
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise AudioFormatError(f"{path}:1: empty matrix file")
    match = _HEADER.match(lines[0].strip())
    if match is None:
        raise AudioFormatError(f"{path}:1: expected header '# channels=M frames=T frame_rate=R'")
    m, t, rate = int(match.group(1)), int(match.group(2)), float(match.group(3))
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != m:
        raise AudioFormatError(f"{path}: header declares {m} channels but found {len(body)} rows")
    rows = []
    for i, ln in enumerate(body):
        try:
            row = [float(tok) for tok in ln.split(",")]
        except ValueError:
            raise AudioFormatError(f"{path}:{i + 2}: non-numeric value") from None
        if len(row) != t:
            raise AudioFormatError(f"{path}:{i + 2}: expected {t} columns, found {len(row)}")
        rows.append(row)
    try:
        return EnvelopeMatrix(np.array(rows), rate, nonnegative=nonnegative)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
