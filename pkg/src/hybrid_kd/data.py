"""EEG trials: synthetic hybrid-paradigm generator, trial files, sub-sampling and LOSO splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter
from scipy.signal.windows import tukey

from .losses import MI, N_MI, N_SI, SI

CHANNELS = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "T8", "CP5", "CP1", "CP2", "CP6", "O2",
    "AF7", "AF3", "AF4", "AF8", "C1", "C2", "C6", "TP7", "PO3", "POz", "PO4", "PO8",
)
N_CHANNELS = len(CHANNELS)
N_SAMPLES = 1000

MI_CHANNELS = tuple(CHANNELS.index(c) for c in ("CP5", "CP1", "CP2", "CP6", "C1", "C2", "C6"))
SI_CHANNELS = tuple(CHANNELS.index(c) for c in ("Fp1", "Fp2", "F7", "F3", "Fz", "F4", "T8", "AF7", "AF3", "AF4", "AF8", "TP7"))
POSTERIOR_CHANNELS = tuple(CHANNELS.index(c) for c in ("O2", "PO3", "POz", "PO4", "PO8"))

MI_CLASSES = ("cylindrical", "lumbrical", "spherical")
N_CLASSES = {MI: N_MI, SI: N_SI}


@dataclass(eq=False)
class LabeledTrial:
    samples: np.ndarray  # (24, 1000) float32, microvolts
    paradigm: int
    class_index: int
    subject_id: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.shape != (N_CHANNELS, N_SAMPLES):
            raise ValueError(f"trial must be {N_CHANNELS}x{N_SAMPLES}, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trial contains non-finite samples")
        if self.paradigm not in (MI, SI):
            raise ValueError(f"paradigm must be 0 (MI) or 1 (SI), got {self.paradigm}")
        if not 0 <= self.class_index < N_CLASSES[self.paradigm]:
            raise ValueError(f"class {self.class_index} out of range for paradigm {self.paradigm}")
        if self.subject_id < 0:
            raise ValueError("subject id must be non-negative")

    def __eq__(self, other):
        if not isinstance(other, LabeledTrial):
            return NotImplemented
        return (
            (self.paradigm, self.class_index, self.subject_id) == (other.paradigm, other.class_index, other.subject_id)
            and self.samples.tobytes() == other.samples.tobytes()
        )

    @property
    def joint_label(self) -> int:
        return self.class_index if self.paradigm == MI else N_MI + self.class_index


# ---------------------------------------------------------------------------
# trial files
#
#   offset  0  b"EEGT"
#           4  u16 version (1)
#           6  u16 subject id
#           8  u8  paradigm (0 MI, 1 SI)
#           9  u8  class index
#          10  u16 channel count (24)
#          12  u32 sample count (1000)
#          16  channels * samples float32, row-major by channel
#
# All fields little-endian.

TRIAL_MAGIC = b"EEGT"
TRIAL_VERSION = 1
TRIAL_HEADER = struct.Struct("<4sHHBBHI")


class TrialFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_trial(trial: LabeledTrial) -> bytes:
    header = TRIAL_HEADER.pack(TRIAL_MAGIC, TRIAL_VERSION, trial.subject_id, trial.paradigm,
                               trial.class_index, N_CHANNELS, N_SAMPLES)
    return header + np.ascontiguousarray(trial.samples, dtype="<f4").tobytes()


def decode_trial(buf: bytes) -> LabeledTrial:
    if len(buf) < TRIAL_HEADER.size:
        raise TrialFormatError(f"truncated header: expected {TRIAL_HEADER.size} bytes, got {len(buf)}", len(buf))
    magic, version, subject, paradigm, cls, n_ch, n_s = TRIAL_HEADER.unpack_from(buf)
    if magic != TRIAL_MAGIC:
        first = next(i for i in range(4) if magic[i] != TRIAL_MAGIC[i])
        raise TrialFormatError(f"bad magic {magic!r}", first)
    if version != TRIAL_VERSION:
        raise TrialFormatError(f"unsupported version {version}", 4)
    if paradigm not in (MI, SI):
        raise TrialFormatError(f"bad paradigm {paradigm}", 8)
    if cls >= N_CLASSES[paradigm]:
        raise TrialFormatError(f"class {cls} out of range for paradigm {paradigm}", 9)
    if n_ch != N_CHANNELS:
        raise TrialFormatError(f"expected {N_CHANNELS} channels, got {n_ch}", 10)
    if n_s != N_SAMPLES:
        raise TrialFormatError(f"expected {N_SAMPLES} samples, got {n_s}", 12)
    expected = TRIAL_HEADER.size + 4 * n_ch * n_s
    if len(buf) != expected:
        raise TrialFormatError(f"expected {expected} bytes, got {len(buf)}", min(len(buf), expected))
    samples = np.frombuffer(buf, dtype="<f4", offset=TRIAL_HEADER.size).reshape(n_ch, n_s)
    return LabeledTrial(samples.astype(np.float32), paradigm, cls, subject)


def save_trial(trial: LabeledTrial, path) -> None:
    Path(path).write_bytes(encode_trial(trial))


def load_trial(path) -> LabeledTrial:
    return decode_trial(Path(path).read_bytes())


def save_dataset(trials: Sequence[LabeledTrial], root) -> Path:
    """Write ``subject_<k>/trial_<n>.eegt`` files plus ``manifest.txt`` under ``root``."""
    root = Path(root)
    counters: dict[int, int] = {}
    lines = []
    for trial in trials:
        n = counters.get(trial.subject_id, 0)
        counters[trial.subject_id] = n + 1
        rel = Path(f"subject_{trial.subject_id}") / f"trial_{n}.eegt"
        (root / rel.parent).mkdir(parents=True, exist_ok=True)
        save_trial(trial, root / rel)
        lines.append(rel.as_posix())
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_dataset(root) -> list[LabeledTrial]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    paths = [line.strip() for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [load_trial(root / p) for p in paths]


# ---------------------------------------------------------------------------
# synthetic data

MASK64 = (1 << 64) - 1
PATTERN_BASE = 0.5


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (used to derive independent sub-seeds)."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def subject_seed(master_seed: int, subject: int) -> int:
    return splitmix64((master_seed + subject + 1) & MASK64)


def population_seed(master_seed: int) -> int:
    return splitmix64(master_seed & MASK64)


@dataclass(frozen=True)
class SyntheticConfig:
    n_subjects: int = 10
    trials_per_paradigm: int = 80
    class_separation: float = 1.0
    mi_band_hz: tuple[float, float] = (8.0, 13.0)
    si_band_hz: tuple[float, float] = (2.0, 8.0)
    noise_sigma: float = 10.0
    signal_amplitude: float = 7.0
    background_amplitude: float = 4.0
    mixing_strength: float = 0.3
    subject_freq_shift_hz: float = 0.5
    # MI trials are drawn from a larger balanced pool, then sub-sampled
    mi_pool_trials: int = 150
    sample_rate_hz: float = 200.0
    master_seed: int = 0

    def __post_init__(self):
        if self.n_subjects <= 0 or self.trials_per_paradigm <= 0:
            raise ValueError("subject and trial counts must be positive")
        if self.class_separation < 0 or self.noise_sigma <= 0:
            raise ValueError("class_separation must be >= 0 and noise_sigma > 0")
        if self.mi_pool_trials < self.trials_per_paradigm:
            raise ValueError("mi_pool_trials must be at least trials_per_paradigm")


@dataclass
class _Population:
    """Class templates shared by all subjects of one synthetic cohort."""

    patterns: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    freqs: dict[tuple[int, int], float] = field(default_factory=dict)


def _population(config: SyntheticConfig) -> _Population:
    rng = np.random.default_rng(population_seed(config.master_seed))
    pop = _Population()
    for paradigm, chans, band in ((MI, MI_CHANNELS, config.mi_band_hz), (SI, SI_CHANNELS, config.si_band_hz)):
        k = N_CLASSES[paradigm]
        lo, hi = band
        for c in range(k):
            w = np.zeros(N_CHANNELS)
            w[list(chans)] = PATTERN_BASE + rng.standard_normal(len(chans))
            pop.patterns[paradigm, c] = w / np.linalg.norm(w)
            pop.freqs[paradigm, c] = lo + (c + 0.5) * (hi - lo) / k
    return pop


def _colored_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    white = rng.standard_normal((n, N_CHANNELS, N_SAMPLES))
    ar = lfilter([1.0], [1.0, -0.7], white, axis=-1) * np.sqrt(1 - 0.7 ** 2)
    return (white + ar) / np.sqrt(2.0)


def _subject_trials(config: SyntheticConfig, pop: _Population, subject: int, paradigm: int,
                    class_counts: Sequence[int], rng: np.random.Generator, mixing: np.ndarray,
                    freq_shift: float) -> list[LabeledTrial]:
    fs = config.sample_rate_hz
    t = np.arange(N_SAMPLES) / fs
    labels = np.repeat(np.arange(len(class_counts)), class_counts)
    n = labels.size
    sources = np.zeros((n, N_CHANNELS, N_SAMPLES))
    # task burst: class-specific frequency and spatial pattern, amplitude scaled by separation
    for i, c in enumerate(labels):
        onset = rng.uniform(0.5, 1.5)
        duration = rng.uniform(2.5, 3.5)
        start, stop = int(onset * fs), min(N_SAMPLES, int((onset + duration) * fs))
        env = np.zeros(N_SAMPLES)
        env[start:stop] = tukey(stop - start, 0.5)
        f = pop.freqs[paradigm, c] + freq_shift + rng.normal(0.0, 0.2)
        amp = config.class_separation * config.signal_amplitude * rng.lognormal(0.0, 0.25)
        burst = amp * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        sources[i] += np.outer(pop.patterns[paradigm, c], burst)
    # posterior alpha background, unrelated to the label
    alpha_f = 10.0 + freq_shift + rng.normal(0.0, 0.3, size=n)
    alpha_amp = config.background_amplitude * rng.lognormal(0.0, 0.3, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    alpha = alpha_amp[:, None] * np.sin(2 * np.pi * alpha_f[:, None] * t[None, :] + phase[:, None])
    sources[:, list(POSTERIOR_CHANNELS), :] += alpha[:, None, :]
    x = np.einsum("ij,njt->nit", mixing, sources) + config.noise_sigma * _colored_noise(rng, n)
    return [LabeledTrial(x[i].astype(np.float32), paradigm, int(labels[i]), subject) for i in range(n)]


def _even_counts(total: int, k: int) -> list[int]:
    base, rem = divmod(total, k)
    return [base + (1 if c < rem else 0) for c in range(k)]


def generate_synthetic_dataset(config: SyntheticConfig = SyntheticConfig()) -> list[LabeledTrial]:
    """Synthetic hybrid-paradigm EEG, deterministic in ``config.master_seed``.

    Each subject gets an independent generator (SplitMix64 sub-seed), a
    random spatial mixing matrix near identity and a small frequency shift,
    so held-out subjects differ systematically from the training ones.
    """
    pop = _population(config)
    trials: list[LabeledTrial] = []
    for s in range(config.n_subjects):
        rng = np.random.default_rng(subject_seed(config.master_seed, s))
        mixing = np.eye(N_CHANNELS) + config.mixing_strength * rng.standard_normal((N_CHANNELS, N_CHANNELS)) / np.sqrt(N_CHANNELS)
        shift = rng.uniform(-config.subject_freq_shift_hz, config.subject_freq_shift_hz)
        mi_pool = _subject_trials(config, pop, s, MI, _even_counts(config.mi_pool_trials, N_MI), rng, mixing, shift)
        mi = balance_subsample(mi_pool, config.trials_per_paradigm, int(rng.integers(2**63)))
        si = _subject_trials(config, pop, s, SI, _even_counts(config.trials_per_paradigm, N_SI), rng, mixing, shift)
        si = [si[i] for i in rng.permutation(len(si))]
        trials.extend(mi)
        trials.extend(si)
    return trials


# ---------------------------------------------------------------------------
# sub-sampling and splits


def balance_subsample(trials: Sequence[LabeledTrial], target: int, seed: int) -> list[LabeledTrial]:
    """Class-stratified sample without replacement.

    Each class gets ``target // n_classes`` trials; the remainder goes one
    each to the lowest class indices.  The result is shuffled.
    """
    if target > len(trials):
        raise ValueError(f"cannot draw {target} trials from {len(trials)}")
    rng = np.random.default_rng(seed)
    classes = sorted({t.class_index for t in trials})
    quota = _even_counts(target, len(classes))
    chosen: list[int] = []
    for c, q in zip(classes, quota):
        idx = [i for i, t in enumerate(trials) if t.class_index == c]
        if q > len(idx):
            raise ValueError(f"class {c} has {len(idx)} trials, need {q}")
        chosen.extend(rng.choice(idx, size=q, replace=False).tolist())
    return [trials[i] for i in rng.permutation(chosen)]


def loso_split(trials: Sequence[LabeledTrial], held_out: int, seed: int = 0, valid_fraction: float = 0.15):
    """(train, valid, test) for one leave-one-subject-out fold.

    The held-out subject is the test set; the rest is split train/valid per
    (paradigm, class) stratum.  Output keeps dataset order.
    """
    subjects = {t.subject_id for t in trials}
    if held_out not in subjects:
        raise ValueError(f"subject {held_out} not in dataset (subjects {sorted(subjects)})")
    rng = np.random.default_rng(seed)
    test = [t for t in trials if t.subject_id == held_out]
    rest = [i for i, t in enumerate(trials) if t.subject_id != held_out]
    strata: dict[tuple[int, int], list[int]] = {}
    for i in rest:
        strata.setdefault((trials[i].paradigm, trials[i].class_index), []).append(i)
    valid_idx: set[int] = set()
    for key in sorted(strata):
        idx = strata[key]
        n_valid = int(round(valid_fraction * len(idx)))
        valid_idx.update(rng.permutation(idx)[:n_valid].tolist())
    train = [trials[i] for i in rest if i not in valid_idx]
    valid = [trials[i] for i in rest if i in valid_idx]
    return train, valid, test


def standardize(samples: np.ndarray) -> np.ndarray:
    """Per-channel z-score of each trial (last axis is time)."""
    mu = samples.mean(axis=-1, keepdims=True)
    sd = samples.std(axis=-1, keepdims=True)
    return (samples - mu) / np.maximum(sd, 1e-8)


def stack(trials: Sequence[LabeledTrial]):
    """Arrays for a trial list: (samples, paradigm, class_index, joint, subject)."""
    x = np.stack([t.samples for t in trials]) if trials else np.zeros((0, N_CHANNELS, N_SAMPLES), np.float32)
    paradigm = np.array([t.paradigm for t in trials], dtype=np.int64)
    cls = np.array([t.class_index for t in trials], dtype=np.int64)
    joint = np.array([t.joint_label for t in trials], dtype=np.int64)
    subject = np.array([t.subject_id for t in trials], dtype=np.int64)
    return x, paradigm, cls, joint, subject


def network_input(trials: Sequence[LabeledTrial], dtype=np.float32) -> np.ndarray:
    """(n, 1, 24, 1000) z-scored network input."""
    x = stack(trials)[0]
    return standardize(x.astype(np.float64)).astype(dtype)[:, None]
