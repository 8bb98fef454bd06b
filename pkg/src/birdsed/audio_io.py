"""WAV decoding/encoding and signal conditioning.

Everything downstream works on :class:`AudioClip`: mono float32 samples in
[-1, 1] at a known sample rate.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyChannels, MalformedHeader, TruncatedData, UnsupportedEncoding

CANONICAL_RATE = 32000

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples; use to_mono first")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate

    def clamp(self) -> "AudioClip":
        return AudioClip(np.clip(self.samples, -1.0, 1.0), self.sample_rate, self.source_id)


@dataclass
class _Format:
    format_tag: int
    channels: int
    sample_rate: int
    byte_rate: int
    block_align: int
    bits_per_sample: int
    sub_format: int | None = field(default=None)


def _parse_fmt(body: bytes) -> _Format:
    if len(body) < 16:
        raise MalformedHeader(f"fmt chunk too short ({len(body)} bytes)")
    tag, channels, rate, byte_rate, block_align, bits = struct.unpack("<HHIIHH", body[:16])
    fmt = _Format(tag, channels, rate, byte_rate, block_align, bits)
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(body) < 40:
            raise MalformedHeader("WAVE_FORMAT_EXTENSIBLE fmt chunk shorter than 40 bytes")
        # cbSize, valid bits, channel mask, then a 16-byte GUID whose first two bytes are the format code
        fmt.sub_format = struct.unpack("<H", body[24:26])[0]
    return fmt


def _read_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeader("not a RIFF/WAVE stream")
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        size = struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body = data[pos + 8:pos + 8 + size]
        yield chunk_id, size, body
        pos += 8 + size + (size & 1)


def decode_wav_channels(data: bytes) -> tuple[np.ndarray, int]:
    """Decode a WAV byte string into a ``(channels, n)`` float array and its rate."""
    fmt = None
    for chunk_id, size, body in _read_chunks(data):
        if chunk_id == b"fmt ":
            fmt = _parse_fmt(body)
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedHeader("data chunk precedes fmt chunk")
            if len(body) < size:
                raise TruncatedData(f"data chunk declares {size} bytes, only {len(body)} present")
            return _convert(body, fmt), fmt.sample_rate
    if fmt is None:
        raise MalformedHeader("missing fmt chunk")
    raise MalformedHeader("missing data chunk")


def _convert(body: bytes, fmt: _Format) -> np.ndarray:
    code = fmt.sub_format if fmt.format_tag == WAVE_FORMAT_EXTENSIBLE else fmt.format_tag
    if fmt.channels < 1:
        raise EmptyChannels("WAV header declares zero channels")
    if code == WAVE_FORMAT_PCM and fmt.bits_per_sample == 16:
        raw = np.frombuffer(body, dtype="<i2", count=len(body) // 2).astype(np.float32) / 32768.0
    elif code == WAVE_FORMAT_IEEE_FLOAT and fmt.bits_per_sample == 32:
        raw = np.frombuffer(body, dtype="<f4", count=len(body) // 4).astype(np.float32)
    else:
        raise UnsupportedEncoding(f"format code {code:#06x} with {fmt.bits_per_sample} bits per sample")
    n = len(raw) // fmt.channels
    return raw[:n * fmt.channels].reshape(n, fmt.channels).T


def to_mono(channels: np.ndarray) -> np.ndarray:
    """Average a ``(channels, n)`` array to one channel. 1-D input passes through."""
    channels = np.asarray(channels, dtype=np.float32)
    if channels.ndim == 1:
        return channels
    if channels.shape[0] == 0:
        raise EmptyChannels("no channels to average")
    if channels.shape[0] == 1:
        return channels[0]
    return channels.mean(axis=0, dtype=np.float64).astype(np.float32)


def decode_wav(data: bytes, source_id: str = "") -> AudioClip:
    channels, rate = decode_wav_channels(data)
    return AudioClip(to_mono(channels), rate, source_id)


def encode_wav(clip: AudioClip) -> bytes:
    """PCM16 little-endian mono. Values outside [-1, 1] saturate."""
    q = np.clip(np.round(clip.samples.astype(np.float64) * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    buf = io.BytesIO()
    buf.write(b"RIFF")
    buf.write(struct.pack("<I", 36 + len(payload)))
    buf.write(b"WAVE")
    buf.write(b"fmt ")
    buf.write(struct.pack("<IHHIIHH", 16, WAVE_FORMAT_PCM, 1, clip.sample_rate,
                          clip.sample_rate * 2, 2, 16))
    buf.write(b"data")
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)
    return buf.getvalue()


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampling; output length is round(n * target / source)."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    n_in = len(clip)
    n_out = int(round(n_in * target_rate / clip.sample_rate))
    if n_in == 0 or n_out == 0:
        return AudioClip(np.zeros(n_out, np.float32), target_rate, clip.source_id)
    positions = np.arange(n_out, dtype=np.float64) * (clip.sample_rate / target_rate)
    out = np.interp(positions, np.arange(n_in, dtype=np.float64), clip.samples.astype(np.float64))
    return AudioClip(out.astype(np.float32), target_rate, clip.source_id)


def read_wav(path, target_rate: int | None = CANONICAL_RATE) -> AudioClip:
    path = Path(path)
    clip = decode_wav(path.read_bytes(), source_id=path.name)
    if target_rate is not None:
        clip = resample(clip, target_rate)
    return clip.clamp()


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(encode_wav(clip))
