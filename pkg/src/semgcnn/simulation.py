"""Synthetic multi-source sEMG from a motor-unit linear-response model.

Each motor unit fires a renewal process during contractions and every firing
adds one copy of the MUAP kernel to the unit's train. Trains are summed into
four electrode signals, passed through an integrating sensor front-end
(rectify then smooth, as the 0-3.3 V armband sensors do) and finally through
per-posture channel mixing and per-day gain/offset drift.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special
from scipy.ndimage import uniform_filter1d

from .dataio import N_CHANNELS, N_CLASSES, SessionRecording, SourceId, save_session

logger = logging.getLogger(__name__)

DEFAULT_FS = 500.0
SPAN = (0.0, 3.3)

# relative drive of the four forearm muscles for gestures G1..G5
# (power grip, two-finger pinch, three-finger pinch, pointing, open hand)
BASE_ACTIVATION = np.array([
    [1.00, 0.80, 0.90, 0.90],
    [0.20, 0.60, 0.75, 0.20],
    [0.30, 0.75, 0.30, 0.65],
    [0.20, 0.90, 0.20, 0.10],
    [0.85, 0.90, 0.10, 0.10],
])


# ---------------------------------------------------------------------------
# linear-response core
# ---------------------------------------------------------------------------

@dataclass
class MuapKernel:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("kernel samples must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("kernel samples must be finite")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def support_s(self):
        return self.samples.size / self.sample_rate

    @classmethod
    def biphasic(cls, sample_rate=DEFAULT_FS, duration_s=0.010, amplitude=1.0):
        """Derivative-of-Gaussian wavelet: one positive then one negative lobe."""
        n = max(2, int(round(duration_s * sample_rate)))
        t = (np.arange(n) + 0.5) / n  # centre of each sample in (0, 1)
        s = 1.0 / 6.0
        h = (0.5 - t) / s * np.exp(-((t - 0.5) ** 2) / (2 * s * s))
        return cls(amplitude * h / np.abs(h).max(), sample_rate)


@dataclass
class MotorUnit:
    kernel: MuapKernel
    firing_times: np.ndarray
    gain: np.ndarray
    # optional per-firing amplitude (force dependence); defaults to 1
    amplitudes: np.ndarray | None = None

    def __post_init__(self):
        self.firing_times = np.asarray(self.firing_times, dtype=np.float64).reshape(-1)
        self.gain = np.asarray(self.gain, dtype=np.float64).reshape(-1)
        if self.gain.shape != (N_CHANNELS,) or not np.all(np.isfinite(self.gain)):
            raise ValueError(f"gain must hold {N_CHANNELS} finite entries")
        if np.any(np.diff(self.firing_times) <= 0):
            raise ValueError("firing_times must be strictly increasing")
        if self.amplitudes is not None:
            self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
            if self.amplitudes.shape != self.firing_times.shape:
                raise ValueError("one amplitude per firing time is required")


def impulse_train(unit: MotorUnit, n_samples, fs):
    idx = np.rint(unit.firing_times * fs).astype(np.int64)
    weights = unit.amplitudes if unit.amplitudes is not None else np.ones(idx.size)
    return np.bincount(idx, weights=weights, minlength=n_samples)[:n_samples]


def muapt_waveform(unit: MotorUnit, duration, fs):
    """Per-channel train ``gain[c] * sum_i a_i h(t - t_i)`` of shape (4, n).

    Firing times are snapped to the nearest sample; kernel copies running
    past the end of the window are truncated.
    """
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if not fs > 0:
        raise ValueError(f"fs must be positive, got {fs}")
    if unit.kernel.sample_rate != fs:
        raise ValueError(f"kernel sampled at {unit.kernel.sample_rate} Hz, waveform requested at {fs} Hz")
    t = unit.firing_times
    if t.size and (t[0] < 0 or t[-1] >= duration):
        raise ValueError("firing_times must lie in [0, duration)")
    n = int(round(duration * fs))
    u = np.convolve(impulse_train(unit, n, fs), unit.kernel.samples)[:n]
    return unit.gain[:, None] * u[None, :]


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GestureProtocol:
    n_repetitions: int = 10
    contraction_s: float = 3.0
    rest_s: float = 3.0
    n_classes: int = N_CLASSES
    force_level: float = 1.0

    def __post_init__(self):
        if self.n_repetitions < 1:
            raise ValueError("n_repetitions must be >= 1")
        if not (self.contraction_s > 0 and self.rest_s > 0):
            raise ValueError("contraction and rest durations must be positive")
        if self.n_classes != N_CLASSES:
            raise ValueError(f"the protocol has exactly {N_CLASSES} classes (G0 = rest)")
        if not self.force_level > 0:
            raise ValueError("force_level must be positive")

    @property
    def classes(self):
        return tuple(f"G{c}" for c in range(self.n_classes))

    def n_samples(self, fs):
        return self.n_classes * self.n_repetitions * (_count(self.contraction_s, fs) + _count(self.rest_s, fs))

    def segments(self, fs):
        """``(start, stop, label)`` per contraction segment, grouped by class.

        Every contraction is followed by a rest segment (label 0) that is not
        listed. Class 0 contractions are themselves rest.
        """
        nc, nr = _count(self.contraction_s, fs), _count(self.rest_s, fs)
        out = []
        pos = 0
        for c in range(self.n_classes):
            for _ in range(self.n_repetitions):
                out.append((pos, pos + nc, c))
                pos += nc + nr
        return out

    def labels(self, fs):
        lab = np.zeros(self.n_samples(fs), dtype=np.uint8)
        for start, stop, c in self.segments(fs):
            lab[start:stop] = c
        return lab


def _count(seconds, fs):
    return int(round(seconds * fs))


# ---------------------------------------------------------------------------
# variability model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    """Magnitudes of the synthetic variability sources (tunable, not measured)."""

    fs: float = DEFAULT_FS
    n_postures: int = 4
    # days with precomputed drift (a capacity; sessions may use fewer)
    n_days: int = 8
    # posture p sits at t_p = (p - 1) / (n_postures - 1) along a per-subject
    # direction B: |I + posture_strength * t_p * B + posture_jitter * N_p|
    posture_strength: float = 0.30
    posture_jitter: float = 0.08
    # bounded crosstalk: redraw mixes whose condition number exceeds this
    max_mix_condition: float = 5.0
    # day: exp(day_gain_strength * N + day_common_gain_strength * u) gain, with
    # u ~ U(-1, 1) shared by all channels, and day_offset_strength * N offset
    day_gain_strength: float = 0.15
    day_common_gain_strength: float = 0.80
    day_offset_strength: float = 0.08
    # execution noise on the activation pattern: initial * decay**(day - 1)
    adaptation_initial: float = 0.45
    adaptation_decay: float = 0.6
    # per-subject log-normal perturbation of BASE_ACTIVATION
    subject_strength: float = 0.15
    # minimum L2 distance between any two class activation rows (rest = 0)
    class_margin: float = 0.35
    # repetition-to-repetition force jitter (log-normal sigma)
    force_jitter: float = 0.10
    # repetition-to-repetition jitter of each muscle's drive (log-normal sigma)
    repetition_jitter: float = 0.0
    # motor-unit firing
    min_rate_hz: float = 8.0
    max_rate_hz: float = 30.0
    rate_cv: float = 0.2
    # sensor front-end
    smooth_s: float = 0.060
    noise_level: float = 0.02
    output_scale: float = 1.1
    baseline: float = 0.15


@dataclass
class SourceVariabilityModel:
    """Per-subject transforms: posture mixing, day drift and execution noise."""

    subject: int
    subject_seed: int
    posture_mix: np.ndarray  # (n_postures, 4, 4)
    day_gain: np.ndarray  # (n_days, 4)
    day_offset: np.ndarray  # (n_days, 4)
    adaptation_scale: np.ndarray  # (n_days,)
    activation: np.ndarray  # (5, 4) converged gesture -> muscle drive
    config: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        for m in self.posture_mix:
            if abs(np.linalg.det(m)) < 1e-6:
                raise ValueError("posture mixing matrices must be invertible")
        if np.any(np.diff(self.adaptation_scale) > 0):
            raise ValueError("adaptation_scale must be non-increasing in day index")

    @property
    def day_rotation(self):
        return {"gain": self.day_gain, "offset": self.day_offset}

    @classmethod
    def generate(cls, subject, seed=0, config: GeneratorConfig | None = None):
        config = config or GeneratorConfig()
        subject_seed = int(np.random.SeedSequence([seed, subject]).generate_state(1)[0])
        # independent streams, so retuning one effect leaves the others' draws alone
        posture_rng, activation_rng = (np.random.default_rng([subject_seed, 1, k]) for k in (0, 2))
        eye = np.eye(N_CHANNELS)
        # arm postures form a continuum, so mixes drift along one shared direction
        t = np.linspace(0.0, 1.0, config.n_postures) if config.n_postures > 1 else np.zeros(1)
        for _ in range(1000):
            direction = posture_rng.standard_normal((N_CHANNELS, N_CHANNELS))
            jitter = posture_rng.standard_normal((config.n_postures, N_CHANNELS, N_CHANNELS))
            mixes = np.abs(eye + config.posture_strength * t[:, None, None] * direction
                           + config.posture_jitter * jitter)
            if max(np.linalg.cond(m) for m in mixes) <= config.max_mix_condition:
                break
        else:
            raise ValueError(f"cannot draw posture mixes with condition <= {config.max_mix_condition}")
        # one stream per day, so n_days is only a capacity
        z = np.array([np.random.default_rng([subject_seed, 1, 1, d]).standard_normal(2 * N_CHANNELS + 1)
                      for d in range(1, config.n_days + 1)]).reshape(config.n_days, 2 * N_CHANNELS + 1)
        # the common-mode part is bounded: uniform on +-strength in log space
        common = 2.0 * special.ndtr(z[:, -1:]) - 1.0
        day_gain = np.exp(config.day_gain_strength * z[:, :N_CHANNELS]
                          + config.day_common_gain_strength * common)
        day_offset = config.day_offset_strength * z[:, N_CHANNELS:2 * N_CHANNELS]
        days = np.arange(config.n_days)
        adaptation = config.adaptation_initial * config.adaptation_decay ** days
        activation = _subject_activation(activation_rng, config)
        return cls(subject, subject_seed, mixes, day_gain, day_offset, adaptation, activation, config)

    def day_activation(self, day):
        """Gesture pattern executed on ``day``: converged pattern times day noise."""
        rng = np.random.default_rng([self.subject_seed, 2, day])
        z = rng.standard_normal(self.activation.shape)
        return self.activation * np.exp(self.adaptation_scale[day - 1] * z)

    def apply_channel_transforms(self, premix, source: SourceId):
        """``clip(day_gain * (posture_mix @ premix) + day_offset)`` into the sensor span."""
        m = self.posture_mix[source.posture - 1]
        g = self.day_gain[source.day - 1][:, None]
        o = self.day_offset[source.day - 1][:, None]
        return np.clip(g * (m @ premix) + o, *SPAN)


def _subject_activation(rng, config):
    rows_with_rest = None
    for _ in range(1000):
        a = BASE_ACTIVATION * np.exp(config.subject_strength * rng.standard_normal(BASE_ACTIVATION.shape))
        a = np.clip(a, 0.02, 1.0)
        rows_with_rest = np.vstack([np.zeros(N_CHANNELS), a])
        d = np.linalg.norm(rows_with_rest[:, None] - rows_with_rest[None], axis=-1)
        if d[np.triu_indices(len(d), 1)].min() >= config.class_margin:
            return a
    raise ValueError(f"cannot draw activation patterns separated by class_margin={config.class_margin}")


# ---------------------------------------------------------------------------
# motor-unit pool and session synthesis
# ---------------------------------------------------------------------------

@dataclass
class MotorPool:
    muscle: np.ndarray  # (pool,) muscle index
    threshold: np.ndarray  # (pool,) recruitment threshold in activation units
    gain: np.ndarray  # (pool, 4) electrode pick-up
    kernel_scale: np.ndarray  # (pool,) MUAP amplitude


def motor_pool(var: SourceVariabilityModel, pool_size):
    if pool_size < 1:
        raise ValueError(f"pool_size must be >= 1, got {pool_size}")
    rng = np.random.default_rng([var.subject_seed, 3, pool_size])
    muscle = np.arange(pool_size) % N_CHANNELS
    threshold = rng.uniform(0.0, 0.6, pool_size)
    # each electrode sits over one muscle and picks up its neighbours weakly
    gain = np.full((pool_size, N_CHANNELS), 0.12) + 0.05 * rng.random((pool_size, N_CHANNELS))
    gain[np.arange(pool_size), muscle] = 1.0
    # larger units are recruited later (size principle)
    kernel_scale = 0.6 + threshold + 0.1 * rng.random(pool_size)
    return MotorPool(muscle, threshold, gain, kernel_scale)


def _renewal_times(rng, start_s, stop_s, rate, cv):
    """Gamma renewal process on ``[start_s, stop_s)`` with random phase."""
    shape = 1.0 / cv ** 2
    mean_isi = 1.0 / rate
    n_max = int((stop_s - start_s) * rate * 1.5) + 4
    isi = rng.gamma(shape, mean_isi / shape, n_max)
    t = start_s + rng.uniform(0, mean_isi) + np.concatenate([[0.0], np.cumsum(isi[:-1])])
    return t[t < stop_s]


def premix_signal(source: SourceId, protocol: GestureProtocol, var: SourceVariabilityModel,
                  pool_size=40, seed=0):
    """Integrated electrode signals (4, n) before posture and day transforms.

    Depends on subject and day but not on posture, so sessions of different
    postures share the same underlying muscle activity.
    """
    pool = motor_pool(var, pool_size)
    cfg = var.config
    fs = cfg.fs
    n = protocol.n_samples(fs)
    rng = np.random.default_rng([seed, var.subject_seed, source.day, 4])
    kernel = MuapKernel.biphasic(fs)
    drive = var.day_activation(source.day)
    raw = np.zeros((N_CHANNELS, n))
    for start, stop, c in protocol.segments(fs):
        if c == 0:
            continue
        force = protocol.force_level * np.exp(cfg.force_jitter * rng.standard_normal())
        rep_drive = drive[c - 1] * np.exp(cfg.repetition_jitter * rng.standard_normal(N_CHANNELS))
        for i in range(pool_size):
            a = rep_drive[pool.muscle[i]] * force
            if a <= pool.threshold[i]:
                continue
            excess = min(1.0, (a - pool.threshold[i]) / (1.0 - pool.threshold[i] + 1e-12))
            rate = cfg.min_rate_hz + (cfg.max_rate_hz - cfg.min_rate_hz) * excess
            times = _renewal_times(rng, start / fs, stop / fs, rate, cfg.rate_cv)
            if times.size == 0:
                continue
            idx = np.rint(times * fs).astype(np.int64)
            keep = np.concatenate([[True], np.diff(idx) > 0]) & (idx < n)
            # amplitude scales linearly with force (arbitrary functional form)
            amps = pool.kernel_scale[i] * force * np.ones(keep.sum())
            train = np.bincount(idx[keep], weights=amps, minlength=n)[:n]
            raw += pool.gain[i][:, None] * train[None, :]
    raw = np.stack([np.convolve(ch, kernel.samples)[:n] for ch in raw])
    raw += cfg.noise_level * rng.standard_normal(raw.shape)
    width = max(1, int(round(cfg.smooth_s * fs)))
    env = uniform_filter1d(np.abs(raw), size=width, axis=1, mode="nearest")
    return cfg.baseline + cfg.output_scale * env / np.sqrt(pool_size / 40.0)


def synth_session(source: SourceId, protocol: GestureProtocol | None = None,
                  var: SourceVariabilityModel | None = None, pool_size=40, seed=0) -> SessionRecording:
    protocol = protocol or GestureProtocol()
    if pool_size < 1:
        raise ValueError(f"pool_size must be >= 1, got {pool_size}")
    var = var or SourceVariabilityModel.generate(source.subject, seed)
    if source.day > len(var.day_gain) or source.posture > len(var.posture_mix):
        raise ValueError(f"{source} lies outside the variability model "
                         f"({len(var.day_gain)} days, {len(var.posture_mix)} postures)")
    premix = premix_signal(source, protocol, var, pool_size, seed)
    x = var.apply_channel_transforms(premix, source).astype(np.float32)
    return SessionRecording(source, var.config.fs, x, protocol.labels(var.config.fs))


def export_dataset(sources, out_dir, protocol: GestureProtocol | None = None,
                   config: GeneratorConfig | None = None, pool_size=40, seed=0):
    """Write one session file per source plus ``manifest.csv``; returns manifest rows."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    protocol = protocol or GestureProtocol()
    models = {}
    rows = []
    for src in sorted(sources):
        if src.subject not in models:
            models[src.subject] = SourceVariabilityModel.generate(src.subject, seed, config)
        rec = synth_session(src, protocol, models[src.subject], pool_size, seed)
        save_session(rec, out_dir / src.filename)
        rows.append({"subject": src.subject, "day": src.day, "posture": src.posture,
                     "file": src.filename, "fs": repr(float(rec.fs)), "n_samples": rec.n_samples})
        logger.info("wrote %s (%d samples)", src.filename, rec.n_samples)
    manifest = out_dir / "manifest.csv"
    try:
        with open(manifest, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["subject", "day", "posture", "file", "fs", "n_samples"])
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write manifest {manifest}: {exc}") from exc
    return rows


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
