"""Synthetic stand-in corpus: six tone/chirp "species" and pink-noise backgrounds.

Used for end-to-end runs without field data. The six call types are
separable by construction (distinct frequency bands and modulation).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import audio_io
from .audio_io import AudioClip
from .ingest import SpeciesList, snake_case

TOY_SPECIES = SpeciesList((
    ("Steady Tone", "Toy tonus"),
    ("Rising Chirp", "Toy ascendens"),
    ("Falling Chirp", "Toy descendens"),
    ("Pulse Train", "Toy pulsans"),
    ("Harmonic Stack", "Toy harmonicus"),
    ("Trill", "Toy trillans"),
))


def _fade(x, rate, ms=10.0):
    n = min(int(rate * ms / 1000), len(x) // 2)
    if n:
        ramp = np.linspace(0.0, 1.0, n)
        x[:n] *= ramp
        x[-n:] *= ramp[::-1]
    return x


def call(kind: int, duration_s: float, rate: int = audio_io.CANONICAL_RATE, jitter: float = 0.0) -> np.ndarray:
    """One call of toy species ``kind`` (0..5), peak amplitude 1."""
    t = np.arange(int(round(duration_s * rate))) / rate
    j = 1.0 + jitter
    if kind == 0:
        x = np.sin(2 * np.pi * 2500 * j * t)
    elif kind == 1:
        f0, f1 = 3000 * j, 6000 * j
        x = np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * duration_s)))
    elif kind == 2:
        f0, f1 = 9000 * j, 5000 * j
        x = np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * duration_s)))
    elif kind == 3:
        gate = (np.sin(2 * np.pi * 8 * t) > 0).astype(float)
        x = gate * np.sin(2 * np.pi * 4000 * j * t)
    elif kind == 4:
        f = 700 * j
        x = sum(np.sin(2 * np.pi * k * f * t) / k for k in (1, 2, 3))
    elif kind == 5:
        f = np.where(np.sin(2 * np.pi * 12 * t) > 0, 10500 * j, 12000 * j)
        x = np.sin(2 * np.pi * np.cumsum(f) / rate)
    else:
        raise ValueError(f"toy species index {kind} out of range")
    x = _fade(np.asarray(x, dtype=np.float64), rate)
    peak = np.abs(x).max()
    return x / peak if peak > 0 else x


def pink_noise(n: int, rng, rms: float = 0.05) -> np.ndarray:
    """1/f noise by spectral shaping of white noise."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    x -= x.mean()
    return x * (rms / np.sqrt(np.mean(x * x)))


def make_toy_corpus(root, n_backgrounds: int = 10, background_s: float = 60.0, snippets_per_species: int = 4,
                    seed: int = 0, rate: int = audio_io.CANONICAL_RATE, noise_rms: float = 0.05,
                    n_heldout: int = 1) -> dict:
    """Write ``root/pool/<species>/*.wav``, ``root/backgrounds/*.wav`` and ``root/heldout/*.wav``.

    Call durations are drawn uniformly from 0.5-3 s. Returns the three directories.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    pool = root / "pool"
    for sid, name in enumerate(TOY_SPECIES.common_names):
        d = pool / snake_case(name)
        d.mkdir(parents=True, exist_ok=True)
        for k in range(snippets_per_species):
            dur = float(rng.uniform(0.5, 3.0))
            x = call(sid, dur, rate, jitter=float(rng.uniform(-0.03, 0.03))) * 0.8
            audio_io.write_wav(d / f"toy{sid}_{k:02d}.wav", AudioClip(x.astype(np.float32), rate, name))
    dirs = {"pool": pool}
    for sub, count in (("backgrounds", n_backgrounds), ("heldout", n_heldout)):
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        for k in range(count):
            x = pink_noise(int(background_s * rate), rng, noise_rms)
            audio_io.write_wav(d / f"{sub[:2]}{k:02d}.wav", AudioClip(x.astype(np.float32), rate, f"{sub}{k}"))
        dirs[sub] = d
    return dirs
