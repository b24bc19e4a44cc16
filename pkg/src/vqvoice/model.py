"""Dual-encoder VQ waveform model.

Two convolutional encoders read the waveform: the phone encoder emits one
quantized vector per frame_hop samples (instance-normalized over time, so
per-utterance level and coloration cancel out of the content path), and the
speaker encoder mean-pools its frames into a single quantized vector per
utterance. An autoregressive recurrent decoder predicts mu-law sample
classes conditioned locally on the phone vectors (held for frame_hop
samples each) and globally on the speaker vector plus a one-hot language
vector.

Codebooks learn by EMA; encoder gradients cross the quantizers with the
straight-through copy. Training is deterministic per seed, checkpoints
round-trip bit-exactly, and `adapt` re-targets a pretrained model to a new
language count by resizing only the decoder's language-conditioning rows
and re-initializing its output projection.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nk
from . import vq
from .corpus import Corpus, Utterance, Waveform

CHECKPOINT_MAGIC = b"VQVC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    language_count: int = 1
    sample_rate: int = 16000
    frame_hop: int = 64                 # encoder downsample factor, samples/frame
    vector_dim: int = 64                # D, both codebooks
    phone_codebook_size: int = 512
    speaker_codebook_size: int = 256
    enc_channels: int = 32
    enc_kernel: int = 256               # first (strided) conv width
    decoder_hidden: int = 96
    n_classes: int = 256                # mu-law output classes
    commitment_beta: float = 0.25
    ema_decay: float = 0.99
    phone_instance_norm: bool = True
    speaker_pooling: str = "mean"       # mean | final
    # training schedule
    steps: int = 20000
    batch_size: int = 8
    segment_frames: int = 5             # decoder BPTT length, in frames
    window_frames: int = 64             # encoder context window, in frames
    learning_rate: float = 2e-3
    lr_decay_factor: float = 0.3
    lr_decay_at: float = 0.8            # fraction of steps after which lr decays
    val_interval: int = 500
    temperature: float = 1.0            # free-running sampling temperature
    codebook_warmup_batches: int = 8

    def __post_init__(self):
        if self.language_count < 1:
            raise ValueError("language_count must be >= 1")
        if self.frame_hop < 1:
            raise ValueError("frame_hop must be >= 1")
        if self.speaker_pooling not in ("mean", "final"):
            raise ValueError("speaker_pooling must be 'mean' or 'final'")

    @property
    def decoder_input_dim(self) -> int:
        return 1 + 2 * self.vector_dim + self.language_count

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def learning_rate_at(config: ModelConfig, step: int) -> float:
    if config.steps > 0 and step >= config.lr_decay_at * config.steps:
        return config.learning_rate * config.lr_decay_factor
    return config.learning_rate


# ---------------------------------------------------------------------------
# encodings (the manipulable discrete object)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Encoding:
    phone_codes: np.ndarray   # [frames] int64
    speaker_code: int
    language_id: int
    frame_hop: int
    source_length: int        # samples

    def __post_init__(self):
        object.__setattr__(self, "phone_codes",
                           np.asarray(self.phone_codes, dtype=np.int64))

    def to_json(self) -> str:
        return json.dumps({
            "phone_codes": self.phone_codes.tolist(),
            "speaker_code": int(self.speaker_code),
            "language_id": int(self.language_id),
            "frame_hop": int(self.frame_hop),
            "source_length": int(self.source_length),
        })

    @staticmethod
    def from_json(text: str) -> "Encoding":
        d = json.loads(text)
        return Encoding(np.asarray(d["phone_codes"], dtype=np.int64),
                        d["speaker_code"], d["language_id"],
                        d["frame_hop"], d["source_length"])


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class VQModel:
    config: ModelConfig
    params: dict[str, nk.Parameter]
    phone_codebook: vq.Codebook
    speaker_codebook: vq.Codebook
    step: int = 0
    codebooks_seeded: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    # -- encoding ----------------------------------------------------------

    def encode_phones(self, w: Waveform) -> tuple[np.ndarray, np.ndarray]:
        """One code per frame_hop samples: (codes [F], vectors [F, D])."""
        self._check_rate(w)
        n_frames = frames_for(len(w), self.config.frame_hop)
        if n_frames == 0:
            return (np.zeros(0, dtype=np.int64),
                    np.zeros((0, self.config.vector_dim), dtype=np.float32))
        z = encoder_forward(self, "pe", w.samples[None, :], 0, n_frames)[0][0]
        res = vq.quantize(z, self.phone_codebook)
        return res.codes, res.vectors

    def encode_speaker(self, w: Waveform) -> tuple[int, np.ndarray]:
        """Single (code, vector) per utterance via temporal pooling."""
        self._check_rate(w)
        n_frames = frames_for(len(w), self.config.frame_hop)
        if n_frames == 0:
            raise ValueError("cannot encode speaker of an empty waveform")
        z = encoder_forward(self, "se", w.samples[None, :], 0, n_frames)[0][0]
        pooled = z.mean(axis=0) if self.config.speaker_pooling == "mean" else z[-1]
        res = vq.quantize(pooled[None, :], self.speaker_codebook)
        return int(res.codes[0]), res.vectors[0]

    def encode_utterance(self, w: Waveform, language_id: int) -> Encoding:
        codes, _ = self.encode_phones(w)
        spk_code, _ = self.encode_speaker(w)
        return Encoding(codes, spk_code, language_id, self.config.frame_hop, len(w))

    # -- decoding ----------------------------------------------------------

    def decode(self, phone_vectors: np.ndarray, speaker_vector: np.ndarray,
               language_id: int, n_samples: int,
               mode: str = "free-running",
               rng: np.random.Generator | None = None,
               teacher_samples: np.ndarray | None = None) -> Waveform:
        return decode(self, phone_vectors, speaker_vector, language_id,
                      n_samples, mode=mode, rng=rng,
                      teacher_samples=teacher_samples)

    def decode_encoding(self, e: Encoding,
                        rng: np.random.Generator | None = None,
                        speaker_vector: np.ndarray | None = None) -> Waveform:
        """Decode an Encoding; codes index the codebooks unless an explicit
        speaker vector (e.g. a mixed one) is supplied."""
        if e.frame_hop != self.config.frame_hop:
            raise ValueError("encoding frame_hop does not match model")
        phone_vectors = self.phone_codebook.vectors[e.phone_codes]
        if speaker_vector is None:
            if not 0 <= e.speaker_code < self.speaker_codebook.size:
                raise ValueError(f"speaker code {e.speaker_code} out of range")
            speaker_vector = self.speaker_codebook.vectors[e.speaker_code]
        return self.decode(phone_vectors, speaker_vector, e.language_id,
                           e.source_length, rng=rng)

    def copy_synthesize(self, w: Waveform, language_id: int,
                        rng: np.random.Generator | None = None) -> Waveform:
        _, phone_vectors = self.encode_phones(w)
        _, speaker_vector = self.encode_speaker(w)
        return self.decode(phone_vectors, speaker_vector, language_id, len(w),
                           rng=rng)

    # -- internals ----------------------------------------------------------

    def _check_rate(self, w: Waveform) -> None:
        if w.sample_rate != self.config.sample_rate:
            raise ValueError(f"waveform rate {w.sample_rate} != model rate "
                             f"{self.config.sample_rate}")

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def cell_params(self) -> nk.RecurrentParams:
        return nk.RecurrentParams(
            wg=self.params["dec.cell.wg"], ug=self.params["dec.cell.ug"],
            bg=self.params["dec.cell.bg"], wc=self.params["dec.cell.wc"],
            uc=self.params["dec.cell.uc"], bc=self.params["dec.cell.bc"])


def frames_for(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def init_model(config: ModelConfig, seed: int) -> VQModel:
    """Fresh model; weights uniform scaled by fan-in, codebooks random until
    seeded from data at the start of training."""
    rng = np.random.default_rng([0x90DE1, seed])
    params: dict[str, nk.Parameter] = {}
    c, d, k1 = config.enc_channels, config.vector_dim, config.enc_kernel

    def add(name, shape, fan_in):
        params[name] = nk.Parameter(nk.uniform_init(rng, shape, fan_in))

    for enc in ("pe", "se"):
        add(f"{enc}.conv1.w", (c, 1, k1), k1)
        params[f"{enc}.conv1.b"] = nk.Parameter(np.zeros(c, dtype=np.float32))
        add(f"{enc}.conv2.w", (c, c, 3), 3 * c)
        params[f"{enc}.conv2.b"] = nk.Parameter(np.zeros(c, dtype=np.float32))
        add(f"{enc}.conv3.w", (d, c, 1), c)
        params[f"{enc}.conv3.b"] = nk.Parameter(np.zeros(d, dtype=np.float32))

    cell = nk.RecurrentParams.create(rng, config.decoder_input_dim,
                                     config.decoder_hidden)
    params.update(cell.named("dec.cell"))
    h = config.decoder_hidden
    add("dec.head1.w", (h, h), h)
    params["dec.head1.b"] = nk.Parameter(np.zeros(h, dtype=np.float32))
    add("dec.head2.w", (h, config.n_classes), h)
    params["dec.head2.b"] = nk.Parameter(np.zeros(config.n_classes, dtype=np.float32))

    phone_cb = vq.Codebook.create(config.phone_codebook_size, d, rng,
                                  decay=config.ema_decay)
    speaker_cb = vq.Codebook.create(config.speaker_codebook_size, d, rng,
                                    decay=config.ema_decay)
    return VQModel(config=config, params=params, phone_codebook=phone_cb,
                   speaker_codebook=speaker_cb, step=0, codebooks_seeded=False,
                   rng=np.random.default_rng([0x7A21, seed]))


# ---------------------------------------------------------------------------
# encoder forward/backward
# ---------------------------------------------------------------------------

def _enc_pad(config: ModelConfig) -> int:
    # total padding so that conv1 (stride hop) + conv2 (k3) yield exactly
    # n_frames outputs for n_frames * hop input samples
    return config.frame_hop + config.enc_kernel


def _padded_slice(x: np.ndarray, start: int, length: int) -> np.ndarray:
    """x[start:start+length] with zeros outside the array bounds."""
    out = np.zeros((x.shape[0], length), dtype=np.float32)
    lo, hi = max(start, 0), min(start + length, x.shape[1])
    if hi > lo:
        out[:, lo - start:hi - start] = x[:, lo:hi]
    return out


def encoder_forward(model: VQModel, enc: str, samples: np.ndarray,
                    first_frame: int, n_frames: int,
                    want_cache: bool = False):
    """Run encoder `enc` over frames [first_frame, first_frame + n_frames).

    samples: [batch, L] raw waveform(s); frames outside the waveform are
    zero-padded context. Returns ([batch, n_frames, D], cache).
    """
    cfg = model.config
    hop, k1 = cfg.frame_hop, cfg.enc_kernel
    pad_total = _enc_pad(cfg)
    pad_left = pad_total // 2
    t_pad = (n_frames + 1) * hop + k1
    x = _padded_slice(samples, first_frame * hop - pad_left, t_pad)[:, None, :]
    p = model.params
    y1, cache1 = nk.conv1d_forward(x, p[f"{enc}.conv1.w"].value,
                                   p[f"{enc}.conv1.b"].value, stride=hop)
    if enc == "pe" and cfg.phone_instance_norm:
        y1n, cache_in = nk.instance_norm_forward(y1)
    else:
        y1n, cache_in = y1, None
    a1, relu1 = nk.relu_forward(y1n)
    y2, cache2 = nk.conv1d_forward(a1, p[f"{enc}.conv2.w"].value,
                                   p[f"{enc}.conv2.b"].value, stride=1)
    a2, relu2 = nk.relu_forward(y2)
    y3, cache3 = nk.conv1d_forward(a2, p[f"{enc}.conv3.w"].value,
                                   p[f"{enc}.conv3.b"].value, stride=1)
    z = np.ascontiguousarray(y3.transpose(0, 2, 1))  # [batch, frames, D]
    cache = (cache1, cache_in, relu1, cache2, relu2, cache3) if want_cache else None
    return z, cache


def encoder_backward(model: VQModel, enc: str, dz: np.ndarray, cache) -> None:
    """Accumulate encoder parameter gradients; input gradients discarded."""
    cache1, cache_in, relu1, cache2, relu2, cache3 = cache
    p = model.params
    dy3 = np.ascontiguousarray(dz.transpose(0, 2, 1))
    da2, dw3, db3 = nk.conv1d_backward(dy3, cache3)
    p[f"{enc}.conv3.w"].grad += dw3
    p[f"{enc}.conv3.b"].grad += db3
    dy2 = nk.relu_backward(da2, relu2)
    da1, dw2, db2 = nk.conv1d_backward(dy2, cache2)
    p[f"{enc}.conv2.w"].grad += dw2
    p[f"{enc}.conv2.b"].grad += db2
    dy1n = nk.relu_backward(da1, relu1)
    if cache_in is not None:
        dy1 = nk.instance_norm_backward(dy1n, cache_in)
    else:
        dy1 = dy1n
    _, dw1, db1 = nk.conv1d_backward(dy1, cache1)
    p[f"{enc}.conv1.w"].grad += dw1
    p[f"{enc}.conv1.b"].grad += db1


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def _one_hot(language_id: int, count: int) -> np.ndarray:
    if not 0 <= language_id < count:
        raise ValueError(f"language id {language_id} out of range (count {count})")
    v = np.zeros(count, dtype=np.float32)
    v[language_id] = 1.0
    return v


def upsample_hold(frames: np.ndarray, hop: int, n_samples: int) -> np.ndarray:
    """Repeat each frame vector hop times, truncated to n_samples."""
    reps = np.repeat(frames, hop, axis=0)
    return reps[:n_samples]


def decode(model: VQModel, phone_vectors: np.ndarray, speaker_vector: np.ndarray,
           language_id: int, n_samples: int, mode: str = "free-running",
           rng: np.random.Generator | None = None,
           teacher_samples: np.ndarray | None = None) -> Waveform:
    """Autoregressive generation of n_samples mu-law samples.

    Local conditions are the phone vectors held for frame_hop samples;
    global conditions (speaker vector, language one-hot) repeat every step.
    The speaker vector may be any D-vector, present in the codebook or not.
    In free-running mode classes are sampled from the categorical output
    with the supplied rng; teacher-forced mode feeds `teacher_samples` back
    instead of the model's own output.
    """
    cfg = model.config
    if mode not in ("free-running", "teacher-forced"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if n_samples == 0:
        return Waveform(np.zeros(0), cfg.sample_rate)
    phone_vectors = np.asarray(phone_vectors, dtype=np.float32)
    needed = frames_for(n_samples, cfg.frame_hop)
    if len(phone_vectors) < needed:
        raise ValueError(f"need {needed} phone vectors for {n_samples} samples, "
                         f"got {len(phone_vectors)}")
    if mode == "free-running" and rng is None:
        raise ValueError("free-running mode requires an rng")
    if mode == "teacher-forced":
        if teacher_samples is None or len(teacher_samples) < n_samples:
            raise ValueError("teacher-forced mode requires n_samples teacher samples")
    speaker_vector = np.asarray(speaker_vector, dtype=np.float32)
    if speaker_vector.shape != (cfg.vector_dim,):
        raise ValueError("speaker vector has wrong dimension")
    with threadpool_limits(limits=1):
        return _decode_inner(model, phone_vectors, speaker_vector, language_id,
                             n_samples, mode, rng, teacher_samples)


def _decode_inner(model, phone_vectors, speaker_vector, language_id, n_samples,
                  mode, rng, teacher_samples) -> Waveform:
    cfg = model.config
    needed = frames_for(n_samples, cfg.frame_hop)
    local = upsample_hold(phone_vectors[:needed], cfg.frame_hop, n_samples)
    glob = np.concatenate([speaker_vector,
                           _one_hot(language_id, cfg.language_count)])
    cond = np.concatenate([local, np.tile(glob, (n_samples, 1))], axis=1)

    p = model.params
    cell = model.cell_params()
    # split input weights: row 0 couples the previous sample, the rest the
    # conditioning; conditioning contributions are batched up front
    wg, wc = cell.wg.value, cell.wc.value
    pre_g = cond @ wg[1:] + cell.bg.value
    pre_c = cond @ wc[1:] + cell.bc.value
    wg0, wc0 = wg[0], wc[0]
    ug, uc = cell.ug.value, cell.uc.value
    w1, b1 = p["dec.head1.w"].value, p["dec.head1.b"].value
    w2, b2 = p["dec.head2.w"].value, p["dec.head2.b"].value

    h = np.zeros(cfg.decoder_hidden, dtype=np.float32)
    prev = float(nk.mu_law_decode(nk.mu_law_encode(np.zeros(1), cfg.n_classes),
                                  cfg.n_classes)[0])
    inv_temp = 1.0 / max(cfg.temperature, 1e-6)
    out = np.empty(n_samples, dtype=np.float32)
    teacher_prev = None
    if mode == "teacher-forced":
        t_cls = nk.mu_law_encode(np.asarray(teacher_samples[:n_samples]),
                                 cfg.n_classes)
        t_dec = nk.mu_law_decode(t_cls, cfg.n_classes).astype(np.float32)
        teacher_prev = np.concatenate([[prev], t_dec[:-1]])
    for t in range(n_samples):
        if teacher_prev is not None:
            prev = teacher_prev[t]
        g = 0.5 * (1.0 + np.tanh(0.5 * (pre_g[t] + prev * wg0 + h @ ug)))
        c = np.tanh(pre_c[t] + prev * wc0 + h @ uc)
        h = h + g * c
        hidden = np.maximum(h @ w1 + b1, 0.0)
        logits = hidden @ w2 + b2
        if mode == "free-running":
            z = (logits - logits.max()) * inv_temp
            probs = np.exp(z)
            probs /= probs.sum()
            cls = int(np.searchsorted(np.cumsum(probs), rng.random()))
            cls = min(cls, cfg.n_classes - 1)
        else:
            cls = int(np.argmax(logits))
        sample = float(nk.mu_law_decode(np.array([cls]), cfg.n_classes)[0])
        out[t] = sample
        if teacher_prev is None:
            prev = sample
    return Waveform(out, cfg.sample_rate)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    recon_loss: float
    phone_commit: float
    speaker_commit: float
    phone_used: int
    speaker_used: int
    val_loss: float | None = None


@dataclass
class TrainBatch:
    enc_x: np.ndarray          # [B, 1, T_pad] padded encoder input slices
    seg_targets: np.ndarray    # [B, T] decoder target samples
    seg_prev: np.ndarray       # [B, T] previous samples (mu-law round-tripped)
    seg_offsets: np.ndarray    # [B] segment start frame within the window
    language_ids: np.ndarray   # [B]


def _mu_law_round_trip(x: np.ndarray, n_classes: int) -> np.ndarray:
    return nk.mu_law_decode(nk.mu_law_encode(x, n_classes), n_classes)


def build_batch(model: VQModel, utterances: list[Utterance],
                picks: np.ndarray, window_starts: np.ndarray,
                segment_starts: np.ndarray) -> TrainBatch:
    """Assemble one training batch from explicit (utterance, window frame,
    segment frame) choices; `sample_batch` draws those with the model rng."""
    cfg = model.config
    hop, k1 = cfg.frame_hop, cfg.enc_kernel
    w_frames = cfg.window_frames
    t_seg = cfg.segment_frames * hop
    pad_left = _enc_pad(cfg) // 2
    t_pad = (w_frames + 1) * hop + k1
    enc_rows, targets, prevs, offsets, langs = [], [], [], [], []
    for b, ui in enumerate(picks):
        utt = utterances[int(ui)]
        x = utt.waveform.samples
        w0 = int(window_starts[b])
        s0 = int(segment_starts[b])
        enc_rows.append(_padded_slice(x[None, :], w0 * hop - pad_left, t_pad)[0])
        lo = s0 * hop
        targets.append(x[lo:lo + t_seg])
        lead = x[lo - 1] if lo > 0 else 0.0
        prev_raw = np.concatenate([[lead], x[lo:lo + t_seg - 1]])
        prevs.append(_mu_law_round_trip(prev_raw, cfg.n_classes))
        offsets.append(s0 - w0)
        langs.append(utt.language_id)
    return TrainBatch(
        enc_x=np.stack(enc_rows)[:, None, :],
        seg_targets=np.stack(targets),
        seg_prev=np.stack(prevs).astype(np.float32),
        seg_offsets=np.asarray(offsets),
        language_ids=np.asarray(langs),
    )


def sample_batch(model: VQModel, utterances: list[Utterance],
                 rng: np.random.Generator) -> TrainBatch:
    cfg = model.config
    hop = cfg.frame_hop
    t_seg = cfg.segment_frames * hop
    picks, w_starts, s_starts = [], [], []
    for _ in range(cfg.batch_size):
        ui = int(rng.integers(0, len(utterances)))
        x = utterances[ui].waveform.samples
        n_frames = frames_for(len(x), hop)
        if n_frames < cfg.window_frames or len(x) < t_seg + 1:
            raise ValueError("utterance too short for the configured window; "
                             "reduce window_frames or segment_frames")
        w0 = int(rng.integers(0, n_frames - cfg.window_frames + 1))
        seg_max = min(w0 + cfg.window_frames - cfg.segment_frames,
                      (len(x) - t_seg) // hop)
        s0 = int(rng.integers(w0, seg_max + 1))
        picks.append(ui)
        w_starts.append(w0)
        s_starts.append(s0)
    return build_batch(model, utterances, np.asarray(picks),
                       np.asarray(w_starts), np.asarray(s_starts))


def _encoder_core(model: VQModel, enc: str, x_padded: np.ndarray,
                  want_cache: bool = False):
    cfg = model.config
    p = model.params
    y1, cache1 = nk.conv1d_forward(x_padded, p[f"{enc}.conv1.w"].value,
                                   p[f"{enc}.conv1.b"].value, stride=cfg.frame_hop)
    if enc == "pe" and cfg.phone_instance_norm:
        y1n, cache_in = nk.instance_norm_forward(y1)
    else:
        y1n, cache_in = y1, None
    a1, relu1 = nk.relu_forward(y1n)
    y2, cache2 = nk.conv1d_forward(a1, p[f"{enc}.conv2.w"].value,
                                   p[f"{enc}.conv2.b"].value, stride=1)
    a2, relu2 = nk.relu_forward(y2)
    y3, cache3 = nk.conv1d_forward(a2, p[f"{enc}.conv3.w"].value,
                                   p[f"{enc}.conv3.b"].value, stride=1)
    z = np.ascontiguousarray(y3.transpose(0, 2, 1))
    cache = (cache1, cache_in, relu1, cache2, relu2, cache3) if want_cache else None
    return z, cache


@dataclass
class QuantizedBatch:
    phone_inputs: np.ndarray    # [B*Fw, D] encoder outputs feeding the phone book
    phone_codes: np.ndarray
    speaker_inputs: np.ndarray  # [B, D] pooled speaker-encoder outputs
    speaker_codes: np.ndarray


def training_loss_and_grads(model: VQModel, batch: TrainBatch,
                            freeze: dict | None = None,
                            compute_grads: bool = True):
    """One teacher-forced step over a batch.

    Returns (losses dict, QuantizedBatch or None). With `freeze`, the
    quantizers apply fixed offsets captured earlier (z_q = z + offset), which
    makes the whole composite differentiable so finite differences can check
    the straight-through gradient path. Parameter gradients accumulate in
    place when compute_grads is set.
    """
    cfg = model.config
    p = model.params
    beta = cfg.commitment_beta
    batch_size, _, _ = batch.enc_x.shape
    t_seg = cfg.segment_frames * cfg.frame_hop
    dtype = p["dec.head1.w"].value.dtype

    z_pe, cache_pe = _encoder_core(model, "pe", batch.enc_x, want_cache=compute_grads)
    z_se, cache_se = _encoder_core(model, "se", batch.enc_x, want_cache=compute_grads)
    n_frames = z_pe.shape[1]
    if cfg.speaker_pooling == "mean":
        pooled = z_se.mean(axis=1)
    else:
        pooled = z_se[:, -1]

    z_pe_flat = z_pe.reshape(batch_size * n_frames, cfg.vector_dim)
    if freeze is None:
        phone_q = vq.quantize(z_pe_flat, model.phone_codebook)
        zq_flat = phone_q.vectors.astype(dtype)
        spk_vec = None
        spk_q = vq.quantize(pooled, model.speaker_codebook)
        spk_vec = spk_q.vectors.astype(dtype)
        quantized = QuantizedBatch(z_pe_flat, phone_q.codes, pooled, spk_q.codes)
        phone_target, speaker_target = zq_flat, spk_vec
    else:
        # frozen quantization: the decoder sees z plus a fixed offset (the
        # straight-through composite, differentiable end to end) while the
        # commitment terms keep their captured constant targets
        zq_flat = z_pe_flat + freeze["phone_offset"]
        spk_vec = pooled + freeze["speaker_offset"]
        quantized = None
        phone_target, speaker_target = freeze["phone_q0"], freeze["speaker_q0"]
    phone_commit = vq.commitment_loss(z_pe_flat, phone_target, beta)
    speaker_commit = vq.commitment_loss(pooled, speaker_target, beta)

    # decoder inputs: segment-local phone vectors + global conditions
    zq = zq_flat.reshape(batch_size, n_frames, cfg.vector_dim)
    frame_idx = batch.seg_offsets[:, None] + np.arange(cfg.segment_frames)
    seg_frames = zq[np.arange(batch_size)[:, None], frame_idx]  # [B, Fseg, D]
    local = np.repeat(seg_frames, cfg.frame_hop, axis=1)[:, :t_seg]
    onehots = np.zeros((batch_size, cfg.language_count), dtype=dtype)
    onehots[np.arange(batch_size), batch.language_ids] = 1.0
    d = cfg.vector_dim
    xs = np.empty((batch_size, t_seg, cfg.decoder_input_dim), dtype=dtype)
    xs[:, :, 0] = batch.seg_prev
    xs[:, :, 1:1 + d] = local
    xs[:, :, 1 + d:1 + 2 * d] = spk_vec[:, None, :]
    xs[:, :, 1 + 2 * d:] = onehots[:, None, :]

    cell = model.cell_params()
    h0 = np.zeros((batch_size, cfg.decoder_hidden), dtype=dtype)
    hs, cell_cache = nk.recurrent_forward(xs, h0, cell)
    hs_flat = hs.reshape(batch_size * t_seg, cfg.decoder_hidden)
    h1, cache_h1 = nk.affine_forward(hs_flat, p["dec.head1.w"].value,
                                     p["dec.head1.b"].value)
    a1, relu_mask = nk.relu_forward(h1)
    logits, cache_h2 = nk.affine_forward(a1, p["dec.head2.w"].value,
                                         p["dec.head2.b"].value)
    targets = nk.mu_law_encode(batch.seg_targets.reshape(-1), cfg.n_classes)
    recon, ce_cache = nk.softmax_xent_forward(logits, targets)

    losses = {
        "recon": recon,
        "phone_commit": phone_commit,
        "speaker_commit": speaker_commit,
        "total": recon + phone_commit + speaker_commit,
    }
    if not compute_grads:
        return losses, quantized

    dlogits = nk.softmax_xent_backward(ce_cache)
    da1, dw2, db2 = nk.affine_backward(dlogits, cache_h2)
    p["dec.head2.w"].grad += dw2
    p["dec.head2.b"].grad += db2
    dh1 = nk.relu_backward(da1, relu_mask)
    dhs_flat, dw1, db1 = nk.affine_backward(dh1, cache_h1)
    p["dec.head1.w"].grad += dw1
    p["dec.head1.b"].grad += db1
    dhs = dhs_flat.reshape(batch_size, t_seg, cfg.decoder_hidden)
    dxs, _ = nk.recurrent_backward(dhs, cell_cache, cell)

    d = cfg.vector_dim
    d_local = dxs[:, :, 1:1 + d]
    d_spk_q = dxs[:, :, 1 + d:1 + 2 * d].sum(axis=1)

    # phone path: decoder gradient lands on the segment frames via the
    # straight-through copy; the commitment term touches every window frame
    d_zq_frames = d_local.reshape(batch_size, cfg.segment_frames, cfg.frame_hop,
                                  d).sum(axis=2)
    d_z_pe = vq.commitment_grad(z_pe_flat, phone_target, beta).reshape(z_pe.shape)
    for b in range(batch_size):
        off = batch.seg_offsets[b]
        d_z_pe[b, off:off + cfg.segment_frames] += vq.straight_through(
            d_zq_frames[b])
    encoder_backward(model, "pe", d_z_pe, cache_pe)

    # speaker path
    d_pooled = vq.straight_through(d_spk_q) \
        + vq.commitment_grad(pooled, speaker_target, beta)
    if cfg.speaker_pooling == "mean":
        d_z_se = np.broadcast_to(d_pooled[:, None, :] / n_frames,
                                 z_se.shape).copy()
    else:
        d_z_se = np.zeros_like(z_se)
        d_z_se[:, -1] = d_pooled
    encoder_backward(model, "se", d_z_se, cache_se)
    return losses, quantized


def capture_freeze_offsets(model: VQModel, batch: TrainBatch) -> dict:
    """Quantization offsets (z_q - z) at the current parameters, for
    finite-difference checks of the straight-through composite."""
    cfg = model.config
    z_pe, _ = _encoder_core(model, "pe", batch.enc_x)
    z_se, _ = _encoder_core(model, "se", batch.enc_x)
    pooled = z_se.mean(axis=1) if cfg.speaker_pooling == "mean" else z_se[:, -1]
    flat = z_pe.reshape(-1, cfg.vector_dim)
    phone_q = vq.quantize(flat, model.phone_codebook)
    spk_q = vq.quantize(pooled, model.speaker_codebook)
    return {
        "phone_offset": phone_q.vectors.astype(np.float64) - flat,
        "speaker_offset": spk_q.vectors.astype(np.float64) - pooled,
        "phone_q0": phone_q.vectors.astype(np.float64),
        "speaker_q0": spk_q.vectors.astype(np.float64),
    }


def _seed_codebooks(model: VQModel, utterances: list[Utterance]) -> None:
    """Initialize both codebooks from encoder outputs (k-means++-style picks
    over a few warmup batches) so EMA starts on the data manifold."""
    cfg = model.config
    phone_samples, speaker_samples = [], []
    for _ in range(cfg.codebook_warmup_batches):
        batch = sample_batch(model, utterances, model.rng)
        z_pe, _ = _encoder_core(model, "pe", batch.enc_x)
        z_se, _ = _encoder_core(model, "se", batch.enc_x)
        phone_samples.append(z_pe.reshape(-1, cfg.vector_dim))
        pooled = z_se.mean(axis=1) if cfg.speaker_pooling == "mean" else z_se[:, -1]
        speaker_samples.append(pooled)
    model.phone_codebook = vq.init_from_samples(
        np.concatenate(phone_samples), cfg.phone_codebook_size, model.rng,
        decay=cfg.ema_decay)
    model.speaker_codebook = vq.init_from_samples(
        np.concatenate(speaker_samples), cfg.speaker_codebook_size, model.rng,
        decay=cfg.ema_decay)
    model.codebooks_seeded = True


def train(corpus: Corpus, config: ModelConfig, seed: int,
          model: VQModel | None = None) -> tuple[VQModel, list[StepMetrics]]:
    """Train (or continue training) on the corpus train split.

    Deterministic per seed: the metrics timeline, final parameters and
    codebooks are bit-identical across runs. Runs steps model.step+1 ..
    config.steps, so passing a checkpointed model resumes exactly.

    BLAS pools are pinned to one thread for the duration: the matrices here
    are small enough that threading overhead dominates, and a fixed thread
    count keeps reductions bit-reproducible across machines with different
    core counts.
    """
    with threadpool_limits(limits=1):
        return _train_inner(corpus, config, seed, model)


def _train_inner(corpus: Corpus, config: ModelConfig, seed: int,
                 model: VQModel | None = None) -> tuple[VQModel, list[StepMetrics]]:
    if not corpus.utterances:
        raise ValueError("corpus is empty")
    max_lang = max(l.language_id for l in corpus.languages)
    if max_lang >= config.language_count:
        raise ValueError(f"corpus has language id {max_lang} but config "
                         f"declares language_count={config.language_count}")
    if model is None:
        model = init_model(config, seed)
    train_utts = corpus.split_utterances("train")
    val_utts = corpus.split_utterances("val") or train_utts
    if not train_utts:
        raise ValueError("corpus has no train-split utterances")

    metrics: list[StepMetrics] = []
    if model.step >= config.steps:
        return model, metrics
    if not model.codebooks_seeded:
        _seed_codebooks(model, train_utts)

    # fixed validation batch: first utterances, centered windows
    n_val = min(len(val_utts), config.batch_size)
    val_picks = np.arange(n_val)
    v_w, v_s = [], []
    for i in range(n_val):
        x = val_utts[i].waveform.samples
        n_frames = frames_for(len(x), config.frame_hop)
        w0 = max(0, (n_frames - config.window_frames) // 2)
        s0 = min(w0 + (config.window_frames - config.segment_frames) // 2,
                 (len(x) - config.segment_frames * config.frame_hop)
                 // config.frame_hop)
        v_w.append(w0)
        v_s.append(s0)
    val_batch = build_batch(model, val_utts, val_picks,
                            np.asarray(v_w), np.asarray(v_s))

    for step in range(model.step + 1, config.steps + 1):
        batch = sample_batch(model, train_utts, model.rng)
        model.zero_grads()
        losses, quantized = training_loss_and_grads(model, batch)
        nk.adam_step(model.params, learning_rate_at(config, step))
        vq.ema_update(model.phone_codebook, quantized.phone_inputs,
                      quantized.phone_codes)
        vq.ema_update(model.speaker_codebook, quantized.speaker_inputs,
                      quantized.speaker_codes)
        val_loss = None
        if config.val_interval and (step % config.val_interval == 0
                                    or step == config.steps):
            val_losses, _ = training_loss_and_grads(model, val_batch,
                                                    compute_grads=False)
            val_loss = val_losses["recon"]
        metrics.append(StepMetrics(
            step=step,
            recon_loss=losses["recon"],
            phone_commit=losses["phone_commit"],
            speaker_commit=losses["speaker_commit"],
            phone_used=int(len(np.unique(quantized.phone_codes))),
            speaker_used=int(len(np.unique(quantized.speaker_codes))),
            val_loss=val_loss,
        ))
        model.step = step
    return model, metrics


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------

def adapt_model(pretrained: VQModel, new_language_count: int,
                config: ModelConfig, seed: int) -> VQModel:
    """Re-target a pretrained model to a new language count.

    Encoders and both codebooks carry over bit-exactly; the decoder keeps
    its recurrent weights but gets fresh language-conditioning rows (the
    conditioning width changes) and a re-initialized output projection.
    """
    old_cfg = pretrained.config
    for field_name in ("sample_rate", "frame_hop", "vector_dim",
                       "phone_codebook_size", "speaker_codebook_size",
                       "enc_channels", "enc_kernel", "decoder_hidden",
                       "n_classes", "phone_instance_norm", "speaker_pooling"):
        if getattr(old_cfg, field_name) != getattr(config, field_name):
            raise ValueError(f"adapt requires matching {field_name} "
                             f"(pretrained {getattr(old_cfg, field_name)!r}, "
                             f"new {getattr(config, field_name)!r})")
    if config.language_count != new_language_count:
        raise ValueError("config.language_count must equal new_language_count")
    rng = np.random.default_rng([0xADA9, seed])
    params: dict[str, nk.Parameter] = {}
    cond_rows = 1 + 2 * old_cfg.vector_dim
    new_input_dim = config.decoder_input_dim
    for name, param in pretrained.params.items():
        if name in ("dec.cell.wg", "dec.cell.wc"):
            fresh = nk.uniform_init(rng, (new_input_dim, old_cfg.decoder_hidden),
                                    new_input_dim)
            fresh[:cond_rows] = param.value[:cond_rows]
            params[name] = nk.Parameter(fresh)
        elif name in ("dec.head2.w", "dec.head2.b"):
            if name.endswith(".w"):
                params[name] = nk.Parameter(nk.uniform_init(
                    rng, param.value.shape, old_cfg.decoder_hidden))
            else:
                params[name] = nk.Parameter(np.zeros_like(param.value))
        else:
            params[name] = nk.Parameter(param.value.copy())
    return VQModel(
        config=config,
        params=params,
        phone_codebook=pretrained.phone_codebook.copy(),
        speaker_codebook=pretrained.speaker_codebook.copy(),
        step=0,
        codebooks_seeded=pretrained.codebooks_seeded,
        rng=np.random.default_rng([0x7A22, seed]),
    )


def adapt(pretrained: VQModel, new_corpus: Corpus, new_language_count: int,
          config: ModelConfig, seed: int = 0) -> tuple[VQModel, list[StepMetrics]]:
    adapted = adapt_model(pretrained, new_language_count, config, seed)
    return train(new_corpus, config, seed, model=adapted)


# ---------------------------------------------------------------------------
# checkpoints: versioned header + JSON metadata + raw float32 blocks
# ---------------------------------------------------------------------------

def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _array_blocks(model: VQModel) -> list[tuple[str, np.ndarray]]:
    blocks = []
    for name in sorted(model.params):
        p = model.params[name]
        blocks.append((f"param/{name}", p.value))
        blocks.append((f"adam_m/{name}", p.m))
        blocks.append((f"adam_v/{name}", p.v))
    for cb_name, cb in (("phone", model.phone_codebook),
                        ("speaker", model.speaker_codebook)):
        blocks.append((f"codebook/{cb_name}/vectors", cb.vectors))
        blocks.append((f"codebook/{cb_name}/ema_cluster_size", cb.ema_cluster_size))
        blocks.append((f"codebook/{cb_name}/ema_vector_sum", cb.ema_vector_sum))
    return blocks


def save_checkpoint(model: VQModel, path) -> None:
    """Single file: magic, version, JSON metadata, then little-endian
    float32 parameter blocks laid out per the manifest."""
    blocks = _array_blocks(model)
    manifest = []
    offset = 0
    payloads = []
    for name, arr in blocks:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    meta = {
        "config": model.config.to_dict(),
        "step": model.step,
        "codebooks_seeded": model.codebooks_seeded,
        "adam_steps": {name: model.params[name].step
                       for name in sorted(model.params)},
        "codebooks": {
            "phone": {"decay": model.phone_codebook.decay,
                      "epsilon": model.phone_codebook.epsilon},
            "speaker": {"decay": model.speaker_codebook.decay,
                        "epsilon": model.speaker_codebook.epsilon},
        },
        "rng_state": _rng_state(model.rng),
        "manifest": manifest,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> VQModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for entry in meta["manifest"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
            entry["shape"]).copy()
    config = ModelConfig.from_dict(meta["config"])
    params = {}
    for name, steps in meta["adam_steps"].items():
        p = nk.Parameter(arrays[f"param/{name}"])
        p.m = arrays[f"adam_m/{name}"]
        p.v = arrays[f"adam_v/{name}"]
        p.step = int(steps)
        params[name] = p

    def load_cb(cb_name):
        info = meta["codebooks"][cb_name]
        return vq.Codebook(
            vectors=arrays[f"codebook/{cb_name}/vectors"],
            ema_cluster_size=arrays[f"codebook/{cb_name}/ema_cluster_size"],
            ema_vector_sum=arrays[f"codebook/{cb_name}/ema_vector_sum"],
            decay=info["decay"], epsilon=info["epsilon"])

    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return VQModel(config=config, params=params,
                   phone_codebook=load_cb("phone"),
                   speaker_codebook=load_cb("speaker"),
                   step=int(meta["step"]),
                   codebooks_seeded=bool(meta["codebooks_seeded"]),
                   rng=rng)
