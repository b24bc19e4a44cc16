"""Deterministic synthetic multi-speaker, multi-language waveform corpus.

Utterances are sequences of "phones" rendered as a harmonic source at the
speaker's fundamental frequency, spectrally shaped by the phone's
per-harmonic amplitude profile, with a phone-specific noise floor. Content
(the harmonic profile) and speaker identity (f0, spectral tilt, profile
shift) are separable by construction, so downstream disentanglement can be
scored against exact ground truth. Every generator is a pure function of
its seed; alignments are sample-exact.

Phone identities are global: phone_id k denotes the same prototype in
every language, and languages are (overlapping, never identical) subsets
of a shared prototype universe. Prototype profiles are drawn with greedy
rejection so that any two phones stay separated even under the mild
per-speaker profile shifts the generator applies.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
N_HARMONICS = 10
DEFAULT_TARGET_DBOV = -26.0

# minimum separation between normalized log-profiles of distinct phones,
# measured across the profile-shift variants a speaker can apply
_MIN_PROFILE_SEP = 0.55
_PROFILE_SHIFTS = (0.94, 1.0, 1.07)
_PHONE_SALT = 0x5EED


class CannotNormalizeError(ValueError):
    """Raised when a waveform has no signal to normalize."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhonePrototype:
    phone_id: int
    harmonic_amplitudes: np.ndarray  # [N_HARMONICS] linear, >= 0, max 1
    noise_fraction: float            # noise amplitude relative to harmonic RMS
    nominal_duration_ms: float

    def __post_init__(self):
        amps = np.asarray(self.harmonic_amplitudes, dtype=np.float64)
        if np.any(amps < 0) or not np.any(amps > 0):
            raise ValueError("harmonic amplitudes must be non-negative with one nonzero")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must lie in [0, 1]")
        if self.nominal_duration_ms <= 0:
            raise ValueError("nominal duration must be positive")
        object.__setattr__(self, "harmonic_amplitudes", amps)


@dataclass(frozen=True)
class LanguageSpec:
    language_id: int
    phone_inventory: tuple[PhonePrototype, ...]
    name: str

    def __post_init__(self):
        if len(self.phone_inventory) < 2:
            raise ValueError("language needs at least 2 phones")

    @property
    def phone_ids(self) -> tuple[int, ...]:
        return tuple(p.phone_id for p in self.phone_inventory)

    def prototype(self, phone_id: int) -> PhonePrototype:
        for p in self.phone_inventory:
            if p.phone_id == phone_id:
                return p
        raise ValueError(f"phone {phone_id} not in language {self.name}")


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: int
    f0_base: float          # Hz
    formant_shift: float    # multiplicative shift of the harmonic profile
    amplitude_tilt: float   # dB per octave

    def __post_init__(self):
        if not 60.0 <= self.f0_base <= 400.0:
            raise ValueError("f0_base must lie in [60, 400] Hz")
        if not 0.7 <= self.formant_shift <= 1.4:
            raise ValueError("formant_shift must lie in [0.7, 1.4]")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN or Inf")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class Alignment:
    """Ordered, non-overlapping (phone_id, start_s, end_s) spans."""

    spans: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        prev_end = 0.0
        for phone_id, start, end in self.spans:
            if end <= start:
                raise ValueError("alignment span must have end > start")
            if start < prev_end - 1e-9:
                raise ValueError("alignment spans must not overlap")
            prev_end = end

    @property
    def phone_ids(self) -> tuple[int, ...]:
        return tuple(s[0] for s in self.spans)

    def __len__(self) -> int:
        return len(self.spans)


@dataclass(frozen=True)
class Utterance:
    waveform: Waveform
    alignment: Alignment
    speaker_id: int
    language_id: int
    split: str  # train | val | heldout


@dataclass(frozen=True)
class Corpus:
    languages: tuple[LanguageSpec, ...]
    speakers: tuple[SpeakerSpec, ...]
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        lang_ids = {l.language_id for l in self.languages}
        spk_ids = {s.speaker_id for s in self.speakers}
        for u in self.utterances:
            if u.language_id not in lang_ids or u.speaker_id not in spk_ids:
                raise ValueError("utterance references unknown speaker or language")
            if u.split not in ("train", "val", "heldout"):
                raise ValueError(f"unknown split tag {u.split!r}")

    def split_utterances(self, split: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == split]

    def language(self, language_id: int) -> LanguageSpec:
        for lang in self.languages:
            if lang.language_id == language_id:
                return lang
        raise ValueError(f"no language with id {language_id}")

    def speaker(self, speaker_id: int) -> SpeakerSpec:
        for spk in self.speakers:
            if spk.speaker_id == speaker_id:
                return spk
        raise ValueError(f"no speaker with id {speaker_id}")


# ---------------------------------------------------------------------------
# phone prototype universe
# ---------------------------------------------------------------------------

def normalized_log_profile(amps: np.ndarray) -> np.ndarray:
    """Log-domain profile with tilt (linear log2-trend) and gain removed,
    scaled to unit norm. This is the phone-identity coordinate system used
    both for prototype separation and by the oracle recognizer."""
    db = 20.0 * np.log10(np.asarray(amps, dtype=np.float64) + 1e-9)
    x = np.log2(np.arange(1, len(db) + 1, dtype=np.float64))
    slope, intercept = np.polyfit(x, db, 1)
    resid = db - (slope * x + intercept)
    norm = np.linalg.norm(resid)
    return resid / norm if norm > 0 else resid


def shift_profile(amps: np.ndarray, shift: float) -> np.ndarray:
    """Resample a harmonic-amplitude profile across harmonic index, as a
    speaker's formant_shift does during synthesis."""
    k = np.arange(1, len(amps) + 1, dtype=np.float64)
    return np.interp(k / shift, k, amps)


def _draw_profile(rng: np.random.Generator) -> np.ndarray:
    """Smooth random harmonic profile, linear domain, peak-normalized."""
    knots_x = np.linspace(0.0, N_HARMONICS - 1.0, 4)
    knots_db = rng.uniform(-26.0, 0.0, size=4)
    db = np.interp(np.arange(N_HARMONICS, dtype=np.float64), knots_x, knots_db)
    db += rng.uniform(-2.0, 2.0, size=N_HARMONICS)
    kernel = np.array([0.25, 0.5, 0.25])
    db = np.convolve(np.pad(db, 1, mode="edge"), kernel, mode="valid")
    amps = 10.0 ** (db / 20.0)
    return amps / amps.max()

_universe_cache: list[PhonePrototype] = []
_PLACEMENT_ATTEMPTS = 800


def phone_universe(n: int) -> list[PhonePrototype]:
    """First n prototypes of the global phone universe (deterministic).

    Each phone is drawn so its shift-variant profiles stay at least
    _MIN_PROFILE_SEP from every earlier phone's variants, giving
    nearest-profile classification margin under speaker variation. When no
    draw reaches the threshold (large universes), the best-separated
    candidate is taken instead.
    """
    while len(_universe_cache) < n:
        pid = len(_universe_cache)
        prior = [v for other in _universe_cache for v in other_variants(other)]
        best_amps, best_sep = None, -1.0
        for attempt in range(_PLACEMENT_ATTEMPTS):
            rng = np.random.default_rng([_PHONE_SALT, pid, attempt])
            amps = _draw_profile(rng)
            variants = [normalized_log_profile(shift_profile(amps, s))
                        for s in _PROFILE_SHIFTS]
            sep = min((np.linalg.norm(v - ov) for ov in prior for v in variants),
                      default=np.inf)
            if sep > best_sep:
                best_amps, best_sep = amps, sep
            if sep >= _MIN_PROFILE_SEP:
                break
        rng = np.random.default_rng([_PHONE_SALT, pid, 10_000])
        _universe_cache.append(PhonePrototype(
            phone_id=pid,
            harmonic_amplitudes=best_amps,
            noise_fraction=float(rng.uniform(0.02, 0.12)),
            nominal_duration_ms=float(rng.uniform(110.0, 190.0)),
        ))
    return _universe_cache[:n]


def other_variants(proto: PhonePrototype) -> list[np.ndarray]:
    return [normalized_log_profile(shift_profile(proto.harmonic_amplitudes, s))
            for s in _PROFILE_SHIFTS]


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def make_language(seed: int, n_phones: int, universe_size: int | None = None,
                  language_id: int = 0, name: str | None = None) -> LanguageSpec:
    """Deterministic language: a random n_phones-subset of the phone universe.

    Distinct seeds give different subsets that typically overlap, mirroring
    shared phones across real languages.
    """
    if n_phones < 2:
        raise ValueError("a language needs at least 2 phones")
    if universe_size is None:
        universe_size = n_phones + max(2, n_phones // 6)
    if universe_size < n_phones:
        raise ValueError("universe_size must be >= n_phones")
    universe = phone_universe(universe_size)
    rng = np.random.default_rng([seed, n_phones, universe_size])
    picks = sorted(rng.choice(universe_size, size=n_phones, replace=False).tolist())
    return LanguageSpec(
        language_id=language_id,
        phone_inventory=tuple(universe[i] for i in picks),
        name=name if name is not None else f"lang{seed}",
    )


def make_speaker(seed: int, speaker_id: int = 0) -> SpeakerSpec:
    """Deterministic speaker: log-uniform f0, mild profile shift and tilt."""
    rng = np.random.default_rng([0xCAFE, seed])
    f0 = float(np.exp(rng.uniform(np.log(82.0), np.log(320.0))))
    return SpeakerSpec(
        speaker_id=speaker_id,
        f0_base=f0,
        formant_shift=float(rng.uniform(0.94, 1.07)),
        amplitude_tilt=float(rng.uniform(-3.5, 2.0)),
    )


def _raised_cosine_fades(n: int, fade: int) -> np.ndarray:
    env = np.ones(n)
    fade = min(fade, n // 2)
    if fade > 0:
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(fade) / fade))
        env[:fade] = ramp
        env[n - fade:] = ramp[::-1]
    return env


def speaker_harmonic_amplitudes(proto: PhonePrototype, spk: SpeakerSpec) -> np.ndarray:
    """Phone profile as voiced by a speaker: shifted, tilted, power-normalized."""
    amps = shift_profile(proto.harmonic_amplitudes, spk.formant_shift)
    k = np.arange(1, N_HARMONICS + 1, dtype=np.float64)
    amps = amps * 10.0 ** (spk.amplitude_tilt * np.log2(k) / 20.0)
    power = np.sum(amps ** 2) / 2.0
    return amps / np.sqrt(power) if power > 0 else amps


def synth_utterance(lang: LanguageSpec, spk: SpeakerSpec, phones,
                    rng_seed: int) -> tuple[Waveform, Alignment]:
    """Render a phone sequence for one speaker; sample-exact alignment.

    Durations are the prototype's nominal length jittered by +-20%; each
    phone gets fresh harmonic phases and an amplitude within +-1 dB of the
    nominal level. Bit-identical for identical arguments.
    """
    phones = list(phones)
    known = set(lang.phone_ids)
    for pid in phones:
        if pid not in known:
            raise ValueError(f"phone {pid} not in language {lang.name}")
    rng = np.random.default_rng([0x0A11, rng_seed])
    sr = SAMPLE_RATE
    pieces, spans = [], []
    cursor = 0
    for pid in phones:
        proto = lang.prototype(pid)
        dur_ms = proto.nominal_duration_ms * rng.uniform(0.8, 1.2)
        n = max(1, int(round(dur_ms * sr / 1000.0)))
        amps = speaker_harmonic_amplitudes(proto, spk)
        gain = 0.18 * 10.0 ** (rng.uniform(-1.0, 1.0) / 20.0)
        t = np.arange(n, dtype=np.float64) / sr
        k = np.arange(1, N_HARMONICS + 1, dtype=np.float64)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=N_HARMONICS)
        harm = (amps[:, None] * np.sin(
            2.0 * np.pi * spk.f0_base * k[:, None] * t[None, :] + phases[:, None]
        )).sum(axis=0)
        noise = proto.noise_fraction * rng.standard_normal(n)
        seg = gain * (harm + noise) * _raised_cosine_fades(n, int(0.005 * sr))
        pieces.append(seg)
        spans.append((pid, cursor / sr, (cursor + n) / sr))
        cursor += n
    samples = np.concatenate(pieces) if pieces else np.zeros(0)
    peak = np.max(np.abs(samples)) if len(samples) else 0.0
    if peak > 0.99:
        samples = samples * (0.97 / peak)
    return Waveform(samples, sr), Alignment(tuple(spans))


def _adaptive_min_f0_ratio(n_speakers: int) -> float:
    spread = (320.0 / 82.0) ** (1.0 / max(n_speakers, 1))
    return min(1.17, spread)


def gen_corpus(n_languages: int, n_speakers: int, utts_per_speaker: int,
               seed: int, n_phones: int = 12, universe_size: int | None = None,
               min_phones: int = 8, max_phones: int = 20,
               split_ratios: tuple[float, float, float] = (0.7, 0.2, 0.1),
               language_weights: list[float] | None = None,
               target_dbov: float = DEFAULT_TARGET_DBOV) -> Corpus:
    """Generate the full corpus: languages, speakers, normalized utterances
    with alignments and train/val/heldout split tags.

    Speakers are drawn with a minimum pairwise f0 ratio so identities stay
    acoustically separable at small speaker counts; every speaker covers
    two or three languages when that many exist. `language_weights` skews
    how utterances distribute over a speaker's languages (balanced by
    default).
    """
    if n_languages < 1 or n_speakers < 1 or utts_per_speaker < 1:
        raise ValueError("corpus counts must all be >= 1")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    rng = np.random.default_rng([0xC0B5, seed])
    # languages: distinct inventories enforced by redraw
    languages: list[LanguageSpec] = []
    seen_inventories: set[tuple[int, ...]] = set()
    attempt = 0
    while len(languages) < n_languages:
        lang_seed = int(rng.integers(0, 2 ** 31)) + attempt
        cand = make_language(lang_seed, n_phones, universe_size,
                             language_id=len(languages),
                             name=f"lang{len(languages)}")
        attempt += 1
        if cand.phone_ids in seen_inventories:
            continue
        seen_inventories.add(cand.phone_ids)
        languages.append(cand)

    # speakers: enforce minimum pairwise f0 ratio (deterministic rejection)
    min_ratio = _adaptive_min_f0_ratio(n_speakers)
    speakers: list[SpeakerSpec] = []
    guard = 0
    while len(speakers) < n_speakers:
        guard += 1
        if guard > 10_000:
            raise RuntimeError("could not place speakers with required f0 spread")
        cand = make_speaker(int(rng.integers(0, 2 ** 31)), speaker_id=len(speakers))
        if all(max(cand.f0_base, s.f0_base) / min(cand.f0_base, s.f0_base) >= min_ratio
               for s in speakers):
            speakers.append(cand)

    # language assignment: bilingual or trilingual when possible
    speaker_langs: dict[int, list[int]] = {}
    for spk in speakers:
        if n_languages == 1:
            speaker_langs[spk.speaker_id] = [0]
        elif n_languages == 2:
            speaker_langs[spk.speaker_id] = [0, 1]
        else:
            count = int(rng.integers(2, 4))
            picks = rng.choice(n_languages, size=min(count, n_languages), replace=False)
            speaker_langs[spk.speaker_id] = sorted(int(i) for i in picks)

    utterances: list[Utterance] = []
    for spk in speakers:
        langs = speaker_langs[spk.speaker_id]
        weights = None
        if language_weights is not None:
            w = np.array([language_weights[i] for i in langs], dtype=np.float64)
            weights = w / w.sum()
        per_spk: dict[int, list[Utterance]] = {lid: [] for lid in langs}
        for j in range(utts_per_speaker):
            if weights is None:
                lid = langs[j % len(langs)]
            else:
                lid = int(rng.choice(langs, p=weights))
            lang = languages[lid]
            n_ph = int(rng.integers(min_phones, max_phones + 1))
            ids = list(lang.phone_ids)
            seq = []
            for _ in range(n_ph):
                choices = [p for p in ids if not seq or p != seq[-1]]
                seq.append(int(choices[rng.integers(0, len(choices))]))
            wav, ali = synth_utterance(lang, spk, seq, int(rng.integers(0, 2 ** 31)))
            wav = normalize(wav, target_dbov).waveform
            per_spk[lid].append(Utterance(wav, ali, spk.speaker_id, lid, "train"))
        # split per speaker-language group so every speaker has held-out data
        for lid, utts in per_spk.items():
            n = len(utts)
            order = rng.permutation(n)
            n_held = max(1, round(split_ratios[2] * n)) if n >= 3 else (1 if n >= 2 else 0)
            n_val = max(1, round(split_ratios[1] * n)) if n >= 2 else 0
            n_val = min(n_val, n - n_held - 1) if n - n_held > 1 else 0
            tags = ["train"] * n
            for i in range(n_held):
                tags[order[i]] = "heldout"
            for i in range(n_held, n_held + n_val):
                tags[order[i]] = "val"
            for u, tag in zip(utts, tags):
                utterances.append(Utterance(u.waveform, u.alignment, u.speaker_id,
                                            u.language_id, tag))
    return Corpus(tuple(languages), tuple(speakers), tuple(utterances))


# ---------------------------------------------------------------------------
# level normalization (active-speech RMS, sv56 stand-in)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizeResult:
    waveform: Waveform
    gain_db: float
    clipped_samples: int
    input_active_dbov: float


def active_rms(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> float:
    """RMS over active 20 ms frames (those within 30 dB of the loudest frame)."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        return 0.0
    frame = max(1, int(0.020 * sample_rate))
    n_frames = max(1, len(x) // frame)
    trimmed = x[:n_frames * frame].reshape(n_frames, frame)
    energy = np.mean(trimmed ** 2, axis=1)
    peak = energy.max()
    if peak <= 0.0:
        return 0.0
    act = energy[energy >= peak * 10.0 ** (-30.0 / 10.0)]
    return float(np.sqrt(act.mean()))


def normalize(w: Waveform, target_dbov: float = DEFAULT_TARGET_DBOV) -> NormalizeResult:
    """Scale so the active-level RMS sits at target_dbov; clip at +-1.

    The +-0.1 dB level contract holds whenever clipping stays negligible;
    the clip count is reported so callers can tell.
    """
    rms = active_rms(w.samples, w.sample_rate)
    if rms <= 0.0:
        raise CannotNormalizeError("waveform has no signal to normalize")
    current_dbov = 20.0 * np.log10(rms)
    gain_db = target_dbov - current_dbov
    gain = 10.0 ** (gain_db / 20.0)
    scaled = w.samples.astype(np.float64) * gain
    clipped = int(np.count_nonzero(np.abs(scaled) > 1.0))
    scaled = np.clip(scaled, -1.0, 1.0)
    return NormalizeResult(Waveform(scaled, w.sample_rate), float(gain_db),
                           clipped, float(current_dbov))


# ---------------------------------------------------------------------------
# speech-shaped noise
# ---------------------------------------------------------------------------

_LTAS_NFFT = 1024


def corpus_average_spectrum(reference: Corpus, nfft: int = _LTAS_NFFT) -> np.ndarray:
    """Average long-term power spectrum over the corpus (per-utterance power
    normalized so quiet and loud utterances weigh equally)."""
    if not reference.utterances:
        raise ValueError("reference corpus is empty")
    window = np.hanning(nfft)
    acc = np.zeros(nfft // 2 + 1)
    n = 0
    for utt in reference.utterances:
        x = utt.waveform.samples.astype(np.float64)
        if len(x) < nfft:
            continue
        hop = nfft // 2
        frames = (len(x) - nfft) // hop + 1
        spec = np.zeros(nfft // 2 + 1)
        for i in range(frames):
            seg = x[i * hop:i * hop + nfft] * window
            spec += np.abs(np.fft.rfft(seg)) ** 2
        spec /= frames
        total = spec.sum()
        if total > 0:
            acc += spec / total
            n += 1
    if n == 0:
        raise ValueError("reference corpus has no usable utterances")
    return acc / n


def gen_speech_shaped_noise(duration_s: float, reference: Corpus,
                            seed: int) -> Waveform:
    """Noise whose long-term spectrum matches the corpus average, with a slow
    syllable-rate amplitude modulation for speech-like temporal texture."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    spectrum = corpus_average_spectrum(reference)
    sr = SAMPLE_RATE
    n = int(round(duration_s * sr))
    rng = np.random.default_rng([0x0515E, seed])
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    bins_ref = np.linspace(0.0, sr / 2.0, len(spectrum))
    bins_out = np.linspace(0.0, sr / 2.0, len(spec))
    shaping = np.sqrt(np.interp(bins_out, bins_ref, spectrum))
    shaped = np.fft.irfft(spec * shaping, n=n)
    t = np.arange(n) / sr
    am = 1.0 + 0.35 * np.sin(2.0 * np.pi * 3.7 * t + rng.uniform(0, 2 * np.pi))
    shaped *= am
    out = normalize(Waveform(shaped / (np.max(np.abs(shaped)) + 1e-12), sr)).waveform
    return out


def octave_band_levels(w: Waveform, n_bands: int = 8,
                       f_lo: float = 62.5) -> np.ndarray:
    """Mean power per octave band in dB, for spectrum-match checks."""
    x = w.samples.astype(np.float64)
    nfft = _LTAS_NFFT
    if len(x) < nfft:
        raise ValueError("waveform too short for octave analysis")
    window = np.hanning(nfft)
    hop = nfft // 2
    frames = (len(x) - nfft) // hop + 1
    spec = np.zeros(nfft // 2 + 1)
    for i in range(frames):
        seg = x[i * hop:i * hop + nfft] * window
        spec += np.abs(np.fft.rfft(seg)) ** 2
    spec /= frames
    freqs = np.linspace(0.0, w.sample_rate / 2.0, len(spec))
    levels = []
    for b in range(n_bands):
        lo, hi = f_lo * 2.0 ** b, f_lo * 2.0 ** (b + 1)
        mask = (freqs >= lo) & (freqs < hi)
        levels.append(10.0 * np.log10(spec[mask].mean() + 1e-20))
    return np.array(levels)


def spectrum_octave_levels(spectrum: np.ndarray, sample_rate: int = SAMPLE_RATE,
                           n_bands: int = 8, f_lo: float = 62.5) -> np.ndarray:
    freqs = np.linspace(0.0, sample_rate / 2.0, len(spectrum))
    levels = []
    for b in range(n_bands):
        lo, hi = f_lo * 2.0 ** b, f_lo * 2.0 ** (b + 1)
        mask = (freqs >= lo) & (freqs < hi)
        levels.append(10.0 * np.log10(spectrum[mask].mean() + 1e-20))
    return np.array(levels)


# ---------------------------------------------------------------------------
# persistence: WAV (PCM16 mono) + JSON manifest
# ---------------------------------------------------------------------------

def save_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples.astype(np.float64) * 32767.0),
                  -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def load_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono PCM16")
        sr = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, sr)


def _phone_to_dict(p: PhonePrototype) -> dict:
    return {
        "phone_id": p.phone_id,
        "harmonic_amplitudes": [float(f"{v:.9g}") for v in p.harmonic_amplitudes],
        "noise_fraction": p.noise_fraction,
        "nominal_duration_ms": p.nominal_duration_ms,
    }


def _phone_from_dict(d: dict) -> PhonePrototype:
    return PhonePrototype(d["phone_id"], np.array(d["harmonic_amplitudes"]),
                          d["noise_fraction"], d["nominal_duration_ms"])


def save_corpus(c: Corpus, out_dir) -> Path:
    """Write WAV files plus a JSON manifest; alignment times carry 6 decimals."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    records = []
    for i, utt in enumerate(c.utterances):
        rel = f"wav/utt{i:05d}.wav"
        save_wav(out / rel, utt.waveform)
        records.append({
            "path": rel,
            "speaker_id": utt.speaker_id,
            "language_id": utt.language_id,
            "split": utt.split,
            "alignment": [[pid, round(s, 6), round(e, 6)]
                          for pid, s, e in utt.alignment.spans],
        })
    manifest = {
        "sample_rate": SAMPLE_RATE,
        "languages": [{
            "language_id": l.language_id,
            "name": l.name,
            "phones": [_phone_to_dict(p) for p in l.phone_inventory],
        } for l in c.languages],
        "speakers": [{
            "speaker_id": s.speaker_id,
            "f0_base": s.f0_base,
            "formant_shift": s.formant_shift,
            "amplitude_tilt": s.amplitude_tilt,
        } for s in c.speakers],
        "utterances": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"


def load_corpus(in_dir) -> Corpus:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    languages = tuple(
        LanguageSpec(l["language_id"],
                     tuple(_phone_from_dict(p) for p in l["phones"]),
                     l["name"])
        for l in manifest["languages"])
    speakers = tuple(
        SpeakerSpec(s["speaker_id"], s["f0_base"], s["formant_shift"],
                    s["amplitude_tilt"])
        for s in manifest["speakers"])
    utterances = []
    for rec in manifest["utterances"]:
        wav = load_wav(root / rec["path"])
        ali = Alignment(tuple((pid, s, e) for pid, s, e in rec["alignment"]))
        utterances.append(Utterance(wav, ali, rec["speaker_id"],
                                    rec["language_id"], rec["split"]))
    return Corpus(languages, speakers, tuple(utterances))
