"""Vector-quantization codebooks.

A codebook is K prototype vectors learned by exponential-moving-average
updates: assignment counts and assigned-vector sums are tracked per entry,
and each used entry's vector is the smoothed ratio of the two. Quantization
is nearest-neighbor in squared L2 with ties broken toward the lowest code
index; gradients pass the quantizer via the straight-through copy.

Entries that have never received an assignment keep their initial vectors,
so under-utilization stays observable in the utilization statistics rather
than being hidden by re-seeding (re-seeding is available but off by
default).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Codebook:
    """K prototype vectors of dimension D with EMA statistics.

    Codes are implicitly 0..K-1, indexing rows of `vectors`.
    """

    vectors: np.ndarray              # [K, D]
    ema_cluster_size: np.ndarray     # [K]
    ema_vector_sum: np.ndarray       # [K, D]
    decay: float = 0.99
    epsilon: float = 1e-5

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @staticmethod
    def create(size: int, dim: int, rng: np.random.Generator,
               decay: float = 0.99, epsilon: float = 1e-5,
               scale: float = 1.0, dtype=np.float32) -> "Codebook":
        """Random-normal initialization; vectors are replaced on first use
        when `init_from_samples` seeds the book from data instead."""
        vectors = (rng.standard_normal((size, dim)) * scale).astype(dtype)
        return Codebook(
            vectors=vectors,
            ema_cluster_size=np.zeros(size, dtype=dtype),
            ema_vector_sum=np.zeros((size, dim), dtype=dtype),
            decay=decay,
            epsilon=epsilon,
        )

    def copy(self) -> "Codebook":
        return Codebook(self.vectors.copy(), self.ema_cluster_size.copy(),
                        self.ema_vector_sum.copy(), self.decay, self.epsilon)


@dataclass
class QuantizationResult:
    codes: np.ndarray        # [N] int64
    vectors: np.ndarray      # [N, D], exact rows of the codebook
    commitment_loss: float   # mean squared L2 distance input -> assigned entry


def quantize(inputs: np.ndarray, cb: Codebook) -> QuantizationResult:
    """Assign each row of inputs [N, D] to its nearest codebook entry.

    Ties break toward the lowest code index. The returned vectors are exact
    copies of the assigned entries.
    """
    inputs = np.atleast_2d(inputs)
    if inputs.shape[1] != cb.dim:
        raise ValueError(f"input dim {inputs.shape[1]} != codebook dim {cb.dim}")
    e = cb.vectors
    # squared distances via expansion; argmin takes the first (lowest) index
    d = (inputs * inputs).sum(axis=1, keepdims=True) \
        - 2.0 * inputs @ e.T + (e * e).sum(axis=1)
    codes = np.argmin(d, axis=1)
    vectors = e[codes]
    diff = inputs - vectors
    commitment = float(np.mean(np.sum(diff * diff, axis=1))) if len(inputs) else 0.0
    return QuantizationResult(codes=codes, vectors=vectors.copy(),
                              commitment_loss=commitment)


def straight_through(upstream_gradient: np.ndarray) -> np.ndarray:
    """Copy the gradient at the quantized vectors verbatim to the encoder."""
    return np.array(upstream_gradient, copy=True)


def commitment_loss(inputs: np.ndarray, quantized: np.ndarray, beta: float) -> float:
    """beta * mean squared L2 distance between inputs and their quantized vectors."""
    inputs = np.atleast_2d(inputs)
    quantized = np.atleast_2d(quantized)
    if inputs.shape != quantized.shape:
        raise ValueError("shape mismatch between inputs and quantized vectors")
    if len(inputs) == 0:
        return 0.0
    diff = inputs - quantized
    return float(beta * np.mean(np.sum(diff * diff, axis=1)))


def commitment_grad(inputs: np.ndarray, quantized: np.ndarray, beta: float) -> np.ndarray:
    """d(commitment_loss)/d(inputs); the quantized side is gradient-detached."""
    n = max(len(inputs), 1)
    return (2.0 * beta / n) * (inputs - quantized)


def ema_update(cb: Codebook, inputs: np.ndarray, codes: np.ndarray) -> Codebook:
    """EMA codebook update, in place (single writer); returns the codebook.

    Cluster sizes and vector sums decay toward the current batch statistics;
    entries with no assignment history keep their initial vectors.
    """
    inputs = np.atleast_2d(inputs)
    codes = np.asarray(codes)
    k, d = cb.size, cb.dim
    counts = np.bincount(codes, minlength=k).astype(cb.ema_cluster_size.dtype)
    sums = np.zeros((k, d), dtype=cb.ema_vector_sum.dtype)
    np.add.at(sums, codes, inputs)
    cb.ema_cluster_size = cb.decay * cb.ema_cluster_size + (1.0 - cb.decay) * counts
    cb.ema_vector_sum = cb.decay * cb.ema_vector_sum + (1.0 - cb.decay) * sums
    used = cb.ema_cluster_size > 0
    denom = cb.ema_cluster_size[used, None] + cb.epsilon
    cb.vectors[used] = cb.ema_vector_sum[used] / denom
    return cb


def reseed_dead_codes(cb: Codebook, recent_inputs: np.ndarray,
                      unused_steps: np.ndarray, killable_steps: int,
                      rng: np.random.Generator) -> int:
    """Re-seed entries unused for `killable_steps` from random recent inputs.

    Off by default in training (keeps codebook collapse observable); returns
    the number of entries re-seeded.
    """
    dead = np.flatnonzero(unused_steps >= killable_steps)
    if len(dead) == 0 or len(recent_inputs) == 0:
        return 0
    picks = rng.integers(0, len(recent_inputs), size=len(dead))
    cb.vectors[dead] = recent_inputs[picks].astype(cb.vectors.dtype)
    cb.ema_cluster_size[dead] = 0.0
    cb.ema_vector_sum[dead] = 0.0
    unused_steps[dead] = 0
    return int(len(dead))


@dataclass
class UtilizationStats:
    used_count: int
    entropy: float
    frequencies: np.ndarray


def utilization(code_histogram: np.ndarray) -> UtilizationStats:
    """Summarize a per-code count histogram: used entries, entropy, frequencies."""
    counts = np.asarray(code_histogram, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("histogram counts must be non-negative")
    total = counts.sum()
    used = int(np.count_nonzero(counts))
    if total <= 0:
        return UtilizationStats(0, 0.0, np.zeros_like(counts))
    freqs = counts / total
    nz = freqs[freqs > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return UtilizationStats(used, entropy, freqs)


def mix_codes(cb: Codebook, i: int, j: int) -> np.ndarray:
    """Unweighted mean of two codebook vectors: a new voice point midway
    between its parents. Not inserted back into the codebook."""
    for code in (i, j):
        if not (0 <= code < cb.size):
            raise ValueError(f"code {code} out of range for codebook of size {cb.size}")
    return (cb.vectors[i] + cb.vectors[j]) / 2.0


def init_from_samples(samples: np.ndarray, size: int, rng: np.random.Generator,
                      decay: float = 0.99, epsilon: float = 1e-5) -> Codebook:
    """Seed a codebook from data: greedy farthest-point picks spread the
    initial entries over the sample set (k-means++ style, deterministic
    per rng). Extra entries beyond the sample count get jittered repeats.
    """
    samples = np.atleast_2d(samples)
    n, dim = samples.shape
    if n == 0:
        raise ValueError("cannot initialize a codebook from zero samples")
    chosen = [int(rng.integers(0, n))]
    d2 = np.sum((samples - samples[chosen[0]]) ** 2, axis=1)
    while len(chosen) < min(size, n):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((samples - samples[nxt]) ** 2, axis=1))
    vectors = samples[chosen].astype(samples.dtype)
    if size > n:
        extra_idx = rng.integers(0, n, size=size - n)
        scale = float(samples.std() or 1.0)
        extra = samples[extra_idx] + 0.05 * scale * rng.standard_normal(
            (size - n, dim)).astype(samples.dtype)
        vectors = np.concatenate([vectors, extra.astype(samples.dtype)], axis=0)
    return Codebook(
        vectors=np.ascontiguousarray(vectors),
        ema_cluster_size=np.zeros(size, dtype=vectors.dtype),
        ema_vector_sum=np.zeros((size, dim), dtype=vectors.dtype),
        decay=decay,
        epsilon=epsilon,
    )


# ---------------------------------------------------------------------------
# persistence: JSON with 9 significant digits (exact for float32)
# ---------------------------------------------------------------------------

def _round9(a: np.ndarray):
    return [[float(f"{v:.9g}") for v in row] for row in np.atleast_2d(a)]


def to_json(cb: Codebook) -> str:
    doc = {
        "dimension": cb.dim,
        "size": cb.size,
        "decay": cb.decay,
        "epsilon": cb.epsilon,
        "entries": [[code, [float(f"{v:.9g}") for v in vec]]
                    for code, vec in enumerate(cb.vectors)],
        "ema_cluster_size": [float(f"{v:.9g}") for v in cb.ema_cluster_size],
        "ema_vector_sum": _round9(cb.ema_vector_sum),
    }
    return json.dumps(doc)


def from_json(text: str) -> Codebook:
    doc = json.loads(text)
    size, dim = doc["size"], doc["dimension"]
    vectors = np.zeros((size, dim), dtype=np.float32)
    for code, vec in doc["entries"]:
        vectors[code] = vec
    return Codebook(
        vectors=vectors,
        ema_cluster_size=np.asarray(doc["ema_cluster_size"], dtype=np.float32),
        ema_vector_sum=np.asarray(doc["ema_vector_sum"], dtype=np.float32),
        decay=doc["decay"],
        epsilon=doc["epsilon"],
    )
