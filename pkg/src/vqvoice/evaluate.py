"""Objective evaluation harness.

Stands in for listening tests with deterministic measurements: log-mel
reconstruction distance, an oracle phone recognizer built on the corpus
generator's own prototype profiles (never on the trained model), phone
error rate, an f0-based speaker-consistency proxy, nearest-centroid
disentanglement probes, and codebook-utilization reports.

The oracle classifies frames by estimating f0, projecting out per-harmonic
amplitudes, removing gain and tilt, and matching the residual profile
against prototype templates over a small grid of profile shifts. On clean
synthetic speech this recovers phone sequences nearly exactly, which is
what makes it usable as an intelligibility stand-in for decoded audio.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import corpus as corpus_mod
from .corpus import (Alignment, Corpus, LanguageSpec, N_HARMONICS, Waveform,
                     normalized_log_profile, shift_profile)

ORACLE_FRAME = 448
ORACLE_HOP = 160
ORACLE_SHIFTS = (0.92, 0.96, 1.0, 1.04, 1.08)
ORACLE_RMS_FLOOR = 3e-3
ORACLE_PERIODICITY_FLOOR = 0.40
ORACLE_MIN_RUN = 5

MEL_BANDS = 40
MEL_FRAME = 400   # 25 ms at 16 kHz
MEL_HOP = 160     # 10 ms
MEL_NFFT = 512

F0_MIN = 65.0
F0_MAX = 420.0


# ---------------------------------------------------------------------------
# mel distance
# ---------------------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def _mel_filterbank(sample_rate: int, nfft: int = MEL_NFFT,
                    n_bands: int = MEL_BANDS) -> np.ndarray:
    n_bins = nfft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0),
                                   n_bands + 2))
    fb = np.zeros((n_bands, n_bins))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def log_mel_spectrogram(w: Waveform) -> np.ndarray:
    """[frames, MEL_BANDS] log-mel power in dB."""
    x = w.samples.astype(np.float64)
    if len(x) < MEL_FRAME:
        raise ValueError("waveform shorter than one analysis frame")
    window = np.hanning(MEL_FRAME)
    n_frames = (len(x) - MEL_FRAME) // MEL_HOP + 1
    idx = np.arange(MEL_FRAME)[None, :] + MEL_HOP * np.arange(n_frames)[:, None]
    frames = x[idx] * window
    spec = np.abs(np.fft.rfft(frames, n=MEL_NFFT, axis=1)) ** 2
    mel = spec @ _mel_filterbank(w.sample_rate).T
    return 10.0 * np.log10(mel + 1e-10)


def mel_distance(a: Waveform, b: Waveform) -> float:
    """Mean L2 distance between log-mel frames (dB); aligned by truncation."""
    if a.sample_rate != b.sample_rate:
        raise ValueError("sample rates differ")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot compare empty waveforms")
    ma, mb = log_mel_spectrogram(a), log_mel_spectrogram(b)
    n = min(len(ma), len(mb))
    return float(np.mean(np.linalg.norm(ma[:n] - mb[:n], axis=1)))


# ---------------------------------------------------------------------------
# f0 estimation
# ---------------------------------------------------------------------------

def estimate_f0(frame: np.ndarray, sample_rate: int) -> tuple[float, float] | None:
    """Autocorrelation pitch estimate. Returns (f0_hz, periodicity) or None
    for silent frames. Prefers the shortest strong lag to avoid octave-down
    errors on harmonic-rich frames."""
    x = np.asarray(frame, dtype=np.float64)
    rms = np.sqrt(np.mean(x ** 2)) if len(x) else 0.0
    if rms < ORACLE_RMS_FLOOR:
        return None
    x = x - x.mean()
    n = len(x)
    spec = np.fft.rfft(x, n=2 * n)
    r = np.fft.irfft(spec * np.conj(spec))[:n]
    if r[0] <= 0:
        return None
    r = r / r[0]
    lag_min = max(2, int(sample_rate / F0_MAX))
    lag_max = min(n - 2, int(sample_rate / F0_MIN))
    if lag_max <= lag_min:
        return None
    window = r[lag_min:lag_max + 1]
    peak = float(window.max())
    # shortest lag with a near-maximal peak that is a local maximum
    candidates = np.flatnonzero(window >= 0.90 * peak)
    lag = None
    for c in candidates:
        i = lag_min + int(c)
        if r[i] >= r[i - 1] and r[i] >= r[i + 1]:
            lag = i
            break
    if lag is None:
        lag = lag_min + int(np.argmax(window))
    # parabolic refinement
    y0, y1, y2 = r[lag - 1], r[lag], r[lag + 1]
    denom = y0 - 2.0 * y1 + y2
    delta = 0.5 * (y0 - y2) / denom if abs(denom) > 1e-12 else 0.0
    delta = float(np.clip(delta, -0.5, 0.5))
    return sample_rate / (lag + delta), float(r[lag])


def harmonic_profile(frame: np.ndarray, sample_rate: int, f0: float) -> np.ndarray:
    """Per-harmonic amplitude estimates via windowed complex projection."""
    x = np.asarray(frame, dtype=np.float64)
    n = len(x)
    window = np.hanning(n)
    xw = x * window
    k = np.arange(1, N_HARMONICS + 1, dtype=np.float64)
    freqs = k * f0
    valid = freqs < sample_rate / 2.0
    t = np.arange(n, dtype=np.float64) / sample_rate
    phasors = np.exp(-2j * np.pi * freqs[valid, None] * t[None, :])
    amps = np.zeros(N_HARMONICS)
    amps[valid] = np.abs(phasors @ xw) / (window.sum() / 2.0)
    return amps


# ---------------------------------------------------------------------------
# oracle recognizer
# ---------------------------------------------------------------------------

class _TemplateTable:
    def __init__(self, lang: LanguageSpec):
        self.phone_ids: list[int] = []
        rows = []
        for proto in lang.phone_inventory:
            for s in ORACLE_SHIFTS:
                rows.append(normalized_log_profile(
                    shift_profile(proto.harmonic_amplitudes, s)))
                self.phone_ids.append(proto.phone_id)
        self.matrix = np.stack(rows)

    def classify(self, profile: np.ndarray) -> int:
        d = np.linalg.norm(self.matrix - profile, axis=1)
        return self.phone_ids[int(np.argmin(d))]


_template_cache: dict[tuple, _TemplateTable] = {}


def _templates(lang: LanguageSpec) -> _TemplateTable:
    key = (lang.language_id, lang.phone_ids)
    if key not in _template_cache:
        _template_cache[key] = _TemplateTable(lang)
    return _template_cache[key]


def _frame_labels(w: Waveform, lang: LanguageSpec) -> np.ndarray:
    """Per-frame phone labels; -1 marks silent or aperiodic frames."""
    x = w.samples.astype(np.float64)
    table = _templates(lang)
    n_frames = max(0, (len(x) - ORACLE_FRAME) // ORACLE_HOP + 1)
    labels = np.full(n_frames, -1, dtype=np.int64)
    for i in range(n_frames):
        frame = x[i * ORACLE_HOP:i * ORACLE_HOP + ORACLE_FRAME]
        est = estimate_f0(frame, w.sample_rate)
        if est is None:
            continue
        f0, periodicity = est
        if periodicity < ORACLE_PERIODICITY_FLOOR:
            continue
        amps = harmonic_profile(frame, w.sample_rate, f0)
        labels[i] = table.classify(normalized_log_profile(amps))
    return labels


def _median3(labels: np.ndarray) -> np.ndarray:
    if len(labels) < 3:
        return labels
    out = labels.copy()
    for i in range(1, len(labels) - 1):
        trio = sorted(labels[i - 1:i + 2])
        out[i] = trio[1]
    return out


def _collapse_runs(labels: np.ndarray, min_run: int = ORACLE_MIN_RUN) -> list[int]:
    seq = []
    i = 0
    while i < len(labels):
        j = i
        while j < len(labels) and labels[j] == labels[i]:
            j += 1
        if labels[i] >= 0 and (j - i) >= min_run:
            if not seq or seq[-1] != labels[i]:
                seq.append(int(labels[i]))
        i = j
    return seq


def oracle_recognize(w: Waveform, lang: LanguageSpec) -> list[int]:
    """Recognize a phone sequence: frame-wise nearest-prototype labels,
    median-filtered, run-length collapsed. Pure silence gives []."""
    labels = _median3(_frame_labels(w, lang))
    return _collapse_runs(labels)


def classify_segment(w: Waveform, lang: LanguageSpec, t0: float, t1: float) -> int:
    """Classify one ground-truth segment by its average voiced-frame profile.

    Returns -1 when the segment has no usable frames.
    """
    sr = w.sample_rate
    x = w.samples.astype(np.float64)
    lo, hi = int(round(t0 * sr)), int(round(t1 * sr))
    profiles = []
    i = lo
    while i + ORACLE_FRAME <= hi:
        frame = x[i:i + ORACLE_FRAME]
        est = estimate_f0(frame, sr)
        if est is not None and est[1] >= ORACLE_PERIODICITY_FLOOR:
            profiles.append(normalized_log_profile(
                harmonic_profile(frame, sr, est[0])))
        i += ORACLE_HOP
    if not profiles:
        return -1
    return _templates(lang).classify(np.mean(profiles, axis=0))


def segment_phone_accuracy(w: Waveform, ali: Alignment, lang: LanguageSpec) -> float:
    """Fraction of ground-truth segments whose average profile classifies to
    the labeled phone (the corpus separability sanity floor)."""
    if not ali.spans:
        raise ValueError("empty alignment")
    hits = sum(1 for pid, t0, t1 in ali.spans
               if classify_segment(w, lang, t0, t1) == pid)
    return hits / len(ali.spans)


# ---------------------------------------------------------------------------
# phone error rate
# ---------------------------------------------------------------------------

def edit_distance(a, b) -> int:
    """Levenshtein distance (substitution, insertion, deletion all cost 1)."""
    a, b = list(a), list(b)
    prev = np.arange(len(b) + 1)
    for i, ca in enumerate(a, start=1):
        cur = np.empty(len(b) + 1, dtype=np.int64)
        cur[0] = i
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ca != cb))
        prev = cur
    return int(prev[-1])


def per(reference, hypothesis) -> float:
    """Phone error rate: edit distance normalized by reference length."""
    reference = list(reference)
    if not reference:
        raise ValueError("reference sequence must be non-empty")
    return edit_distance(reference, list(hypothesis)) / len(reference)


# ---------------------------------------------------------------------------
# speaker consistency proxy
# ---------------------------------------------------------------------------

def speaker_consistency(w: Waveform, window_s: float = 0.4) -> float:
    """Fraction of adjacent voiced windows whose f0 agree within +-10%.

    Windows are voiced when at least half their frames pass the energy
    threshold and carry a pitch estimate; with no voiced pairs the utterance
    is vacuously consistent (1.0).
    """
    sr = w.sample_rate
    win = int(round(window_s * sr))
    if len(w) < 2 * win:
        raise ValueError("waveform shorter than two consistency windows")
    x = w.samples.astype(np.float64)
    f0s = []
    for start in range(0, len(x) - win + 1, win):
        chunk = x[start:start + win]
        ests = []
        i = 0
        while i + ORACLE_FRAME <= len(chunk):
            est = estimate_f0(chunk[i:i + ORACLE_FRAME], sr)
            if est is not None:
                ests.append(est[0])
            i += ORACLE_HOP
        n_frames = max(1, (len(chunk) - ORACLE_FRAME) // ORACLE_HOP + 1)
        f0s.append(float(np.median(ests)) if len(ests) >= n_frames / 2 else None)
    pairs = [(a, b) for a, b in zip(f0s, f0s[1:]) if a is not None and b is not None]
    if not pairs:
        return 1.0
    good = sum(1 for a, b in pairs if max(a, b) / min(a, b) <= 1.10)
    return good / len(pairs)


# ---------------------------------------------------------------------------
# disentanglement probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeReport:
    task: str
    accuracy: float
    chance_level: float
    n_examples: int


def _probe_features(encodings, feature: str) -> np.ndarray:
    if feature == "speaker-code":
        dim = max(e.speaker_code for e in encodings) + 1
        out = np.zeros((len(encodings), dim))
        for i, e in enumerate(encodings):
            out[i, e.speaker_code] = 1.0
        return out
    if feature == "phone-code-histogram":
        dim = max(int(max(e.phone_codes, default=0)) for e in encodings) + 1
        out = np.zeros((len(encodings), dim))
        for i, e in enumerate(encodings):
            counts = np.bincount(np.asarray(e.phone_codes, dtype=np.int64),
                                 minlength=dim)
            total = counts.sum()
            out[i] = counts / total if total else counts
        return out
    raise ValueError(f"unknown probe feature {feature!r}")


def probe_speaker_from_codes(encodings, speaker_ids, splits,
                             feature: str) -> ProbeReport:
    """Nearest-centroid speaker classification from encoding features.

    Centroids are fit on train-split encodings and scored on the rest;
    chance is 1/n_speakers.
    """
    speaker_ids = list(speaker_ids)
    splits = list(splits)
    uniq = sorted(set(speaker_ids))
    if len(uniq) < 2:
        raise ValueError("probe needs at least 2 speakers")
    counts = {s: speaker_ids.count(s) for s in uniq}
    if min(counts.values()) < 10:
        raise ValueError("probe needs at least 10 encodings per speaker")
    feats = _probe_features(list(encodings), feature)
    train = [i for i, s in enumerate(splits) if s == "train"]
    test = [i for i, s in enumerate(splits) if s != "train"]
    if not train or not test:
        raise ValueError("probe needs both train and held-out encodings")
    centroids = {}
    for s in uniq:
        rows = [i for i in train if speaker_ids[i] == s]
        if not rows:
            raise ValueError(f"speaker {s} has no train-split encodings")
        centroids[s] = feats[rows].mean(axis=0)
    cmat = np.stack([centroids[s] for s in uniq])
    hits = 0
    for i in test:
        d = np.linalg.norm(cmat - feats[i], axis=1)
        if uniq[int(np.argmin(d))] == speaker_ids[i]:
            hits += 1
    return ProbeReport(task=f"speaker-from-{feature}",
                       accuracy=hits / len(test),
                       chance_level=1.0 / len(uniq),
                       n_examples=len(test))


# ---------------------------------------------------------------------------
# codebook collapse report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollapseReport:
    codebook_name: str
    size: int
    used_count: int
    per_language_used: dict[int, int]
    per_language_frequencies: dict[int, np.ndarray]
    total_counts: np.ndarray


def _histogram_report(name: str, size: int,
                      per_lang_counts: dict[int, np.ndarray]) -> CollapseReport:
    total = np.zeros(size)
    freqs = {}
    used = {}
    for lid, counts in per_lang_counts.items():
        total += counts
        s = counts.sum()
        freqs[lid] = counts / s if s > 0 else counts
        used[lid] = int(np.count_nonzero(counts))
    return CollapseReport(
        codebook_name=name,
        size=size,
        used_count=int(np.count_nonzero(total)),
        per_language_used=used,
        per_language_frequencies=freqs,
        total_counts=total,
    )


def collapse_report(model, corpus: Corpus) -> dict[str, CollapseReport]:
    """Encode every corpus utterance and report per-language code usage for
    both codebooks."""
    lang_ids = [l.language_id for l in corpus.languages]
    phone_counts = {lid: np.zeros(model.phone_codebook.size) for lid in lang_ids}
    speaker_counts = {lid: np.zeros(model.speaker_codebook.size) for lid in lang_ids}
    for utt in corpus.utterances:
        codes, _ = model.encode_phones(utt.waveform)
        phone_counts[utt.language_id] += np.bincount(
            codes, minlength=model.phone_codebook.size)
        spk_code, _ = model.encode_speaker(utt.waveform)
        speaker_counts[utt.language_id][spk_code] += 1
    return {
        "phone": _histogram_report("phone", model.phone_codebook.size, phone_counts),
        "speaker": _histogram_report("speaker", model.speaker_codebook.size,
                                     speaker_counts),
    }


def frequency_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# chi-square test on code histograms
# ---------------------------------------------------------------------------

def histogram_chi_square(counts_a: np.ndarray, counts_b: np.ndarray) -> float:
    """p-value of the null that two code histograms share a distribution."""
    from scipy.stats import chi2

    a = np.asarray(counts_a, dtype=np.float64)
    b = np.asarray(counts_b, dtype=np.float64)
    keep = (a + b) > 0
    a, b = a[keep], b[keep]
    na, nb = a.sum(), b.sum()
    if na == 0 or nb == 0 or len(a) < 2:
        return 1.0
    expected_a = (a + b) * na / (na + nb)
    expected_b = (a + b) * nb / (na + nb)
    stat = float((((a - expected_a) ** 2) / np.maximum(expected_a, 1e-12)).sum()
                 + (((b - expected_b) ** 2) / np.maximum(expected_b, 1e-12)).sum())
    dof = len(a) - 1
    return float(chi2.sf(stat, dof))
