"""Synthetic multi-site volume series with a planted site confound and a planted diagnosis signal.

Frame ``t`` of subject ``j`` at site ``s`` with diagnosis ``d``::

    V[t] = gain[s] * (B + bias_scale * F_s + d * amplitude * sin(2 pi t / P) * M) + noise

``B`` is a smooth ball template, ``F_s`` a per-site smooth random field, ``M``
the smoothed indicator of the signal box and ``noise`` is i.i.d. Gaussian with a
per-site standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .core import SubjectRecord, VolumeSeries, save_volume_series, write_phenotype_table
from .errors import DomainError

SIGNAL_PERIOD = 10  # frames


@dataclass
class SynthConfig:
    n_sites: int = 2
    subjects_per_site: int = 20
    T: int = 32
    S: int = 16
    site_gain: list[float] = field(default_factory=lambda: [1.0, 1.3])
    site_bias_scale: float = 0.2
    noise_sigma: list[float] = field(default_factory=lambda: [0.05, 0.05])
    signal_amplitude: float = 0.5
    # (x0, x1, y0, y1, z0, z1), half-open
    signal_region: list[int] = field(default_factory=lambda: [4, 8, 4, 8, 4, 8])
    seed: int = 0
    tr_seconds: float = 2.0
    # fraction of positives per site; None means alternating (balanced up to one)
    positive_fraction: list[float] | None = None

    def validate(self) -> None:
        if self.n_sites < 2:
            raise DomainError("n_sites must be >= 2")
        if self.subjects_per_site < 1 or self.T < 1:
            raise DomainError("subjects_per_site and T must be positive")
        if self.S < 8 or self.S & (self.S - 1):
            raise DomainError(f"S must be a power of two >= 8, got {self.S}")
        if len(self.site_gain) != self.n_sites or len(self.noise_sigma) != self.n_sites:
            raise DomainError("site_gain and noise_sigma need one entry per site")
        if any(g < 0 for g in self.site_gain) or any(s < 0 for s in self.noise_sigma):
            raise DomainError("gains and noise levels must be non-negative")
        if self.site_bias_scale < 0 or self.signal_amplitude < 0:
            raise DomainError("amplitudes must be non-negative")
        if len(self.signal_region) != 6:
            raise DomainError("signal_region is (x0, x1, y0, y1, z0, z1)")
        for lo, hi in zip(self.signal_region[::2], self.signal_region[1::2]):
            if not (0 <= lo < hi <= self.S):
                raise DomainError(f"signal_region {self.signal_region} not inside [0, {self.S})^3")
        if self.positive_fraction is not None:
            if len(self.positive_fraction) != self.n_sites:
                raise DomainError("positive_fraction needs one entry per site")
            if any(not 0 <= f <= 1 for f in self.positive_fraction):
                raise DomainError("positive_fraction entries must lie in [0, 1]")
        if self.tr_seconds <= 0:
            raise DomainError("tr_seconds must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def smooth(volume: np.ndarray, width: int) -> np.ndarray:
    """Separable box filter of the given width along every axis."""
    if width <= 1:
        return volume.astype(np.float64)
    return uniform_filter(volume.astype(np.float64), size=width, mode="reflect")


def brain_template(S: int) -> np.ndarray:
    """1 inside a centred ball of radius 0.4*S, cosine roll-off to 0 at 0.5*S."""
    c = (S - 1) / 2.0
    g = np.arange(S) - c
    r = np.sqrt(g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2)
    inner, outer = 0.4 * S, 0.5 * S
    out = np.zeros_like(r)
    out[r <= inner] = 1.0
    band = (r > inner) & (r < outer)
    out[band] = 0.5 * (1.0 + np.cos(np.pi * (r[band] - inner) / (outer - inner)))
    return out


def site_field(cfg: SynthConfig, site: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, site, 0xB1A5])
    f = smooth(rng.standard_normal((cfg.S,) * 3), max(cfg.S // 4, 1))
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def signal_mask(cfg: SynthConfig) -> np.ndarray:
    m = np.zeros((cfg.S,) * 3)
    x0, x1, y0, y1, z0, z1 = cfg.signal_region
    m[x0:x1, y0:y1, z0:z1] = 1.0
    return smooth(m, max(cfg.S // 4, 1))


def diagnoses_for_site(cfg: SynthConfig, site: int) -> list[int]:
    """Spread positives evenly over subject indices; fraction 0.5 alternates 0,1,0,1..."""
    f = 0.5 if cfg.positive_fraction is None else cfg.positive_fraction[site]
    n = cfg.subjects_per_site
    return [int(math.floor((j + 1) * f + 1e-9) > math.floor(j * f + 1e-9)) for j in range(n)]


def subject_id(site: int, j: int) -> str:
    return f"s{site}_{j:03d}"


def generate_subject(cfg: SynthConfig, site: int, j: int, diagnosis: int, template=None, fields=None, mask=None):
    template = brain_template(cfg.S) if template is None else template
    fs = site_field(cfg, site) if fields is None else fields[site]
    mask = signal_mask(cfg) if mask is None else mask
    static = template + cfg.site_bias_scale * fs
    t = np.arange(cfg.T)
    wave = diagnosis * cfg.signal_amplitude * np.sin(2 * np.pi * t / SIGNAL_PERIOD)
    frames = cfg.site_gain[site] * (static[None] + wave[:, None, None, None] * mask[None])
    sigma = cfg.noise_sigma[site]
    if sigma > 0:
        rng = np.random.default_rng([cfg.seed, site, j])
        frames = frames + sigma * rng.standard_normal(frames.shape)
    return frames.astype(np.float32)


def generate_dataset(cfg: SynthConfig, out_dir) -> list[SubjectRecord]:
    """Write ``series/*.vts``, ``phenotype.csv`` and ``manifest.json`` under ``out_dir``."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "series").mkdir(parents=True, exist_ok=True)
    template = brain_template(cfg.S)
    fields = [site_field(cfg, s) for s in range(cfg.n_sites)]
    mask = signal_mask(cfg)
    records = []
    for s in range(cfg.n_sites):
        for j, d in enumerate(diagnoses_for_site(cfg, s)):
            sid = subject_id(s, j)
            data = generate_subject(cfg, s, j, d, template, fields, mask)
            path = out_dir / "series" / f"{sid}.vts"
            save_volume_series(VolumeSeries(sid, cfg.tr_seconds, data), path)
            records.append(SubjectRecord(sid, s, d, str(path)))
    write_phenotype_table(records, out_dir / "phenotype.csv", relative_to=out_dir)
    manifest = {"generator": "faderfmri.synthgen", "signal_period": SIGNAL_PERIOD, "config": asdict(cfg)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return records
