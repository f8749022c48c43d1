"""Caption encoding: word vectors -> hybrid mixture Fisher vector -> PCA.

A caption is tokenized, each token mapped to a deterministic seeded word
vector, the token set encoded as normalized gradients of a hybrid
Gaussian/Laplacian mixture log-likelihood (a Fisher vector), and the
result projected to a compact embedding. Conditioning augmentation then
samples the per-stage condition vectors around an affine image of that
embedding.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import logsumexp
from torch import nn

from .errors import (
    CorruptCheckpoint,
    DegenerateCorpus,
    DimensionMismatch,
    EmptyCaption,
    RankDeficient,
)
from .serialization import ARTIFACT_MAGIC, read_container, write_container

GAUSSIAN = 0
LAPLACIAN = 1

_TOKEN_RE = re.compile(r"[^a-z0-9\s]+")


def tokenize(caption: str) -> list[str]:
    """Lowercased, punctuation-stripped whitespace tokens, order preserved."""
    cleaned = _TOKEN_RE.sub(" ", caption.lower())
    tokens = cleaned.split()
    if not tokens:
        raise EmptyCaption(f"no tokens survive normalization of {caption!r}")
    return tokens


class EmbeddingTable:
    """Deterministic word vectors derived from a seed and the token text.

    Every token (in or out of any vocabulary) maps to the same vector on
    every run: the token string and table seed are hashed into a PRNG
    seed, so no external word-vector model is needed.
    """

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ValueError("embedding dim must be positive")
        self.dim = dim
        self.seed = seed

    def vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}|{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "big"))
        return rng.standard_normal(self.dim)

    def __call__(self, tokens: list[str]) -> np.ndarray:
        if not tokens:
            raise EmptyCaption("cannot embed an empty token list")
        return np.stack([self.vector(t) for t in tokens])


def embed_tokens(tokens: list[str], table: EmbeddingTable) -> np.ndarray:
    return table(tokens)


@dataclass
class HybridMixture:
    """Diagonal mixture with a per-center Gaussian-or-Laplacian family."""

    weights: np.ndarray          # [K]
    means: np.ndarray            # [K, D]
    scales: np.ndarray           # [K, D] (std for Gaussian, diversity for Laplacian)
    families: np.ndarray         # [K] ints, GAUSSIAN or LAPLACIAN
    history: list[float] = field(default_factory=list)

    @property
    def num_centers(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def log_component_densities(self, x: np.ndarray) -> np.ndarray:
        """Per-point per-center log density, shape [N, K]."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"points have dim {x.shape[1]}, mixture has {self.dim}")
        out = np.empty((x.shape[0], self.num_centers))
        for k in range(self.num_centers):
            diff = x - self.means[k]
            s = self.scales[k]
            if self.families[k] == GAUSSIAN:
                out[:, k] = (-0.5 * np.log(2.0 * np.pi) - np.log(s)
                             - 0.5 * (diff / s) ** 2).sum(axis=1)
            else:
                out[:, k] = (-np.log(2.0 * s) - np.abs(diff) / s).sum(axis=1)
        return out

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        log_joint = self.log_component_densities(x) + np.log(self.weights)
        return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))

    def mean_log_likelihood(self, x: np.ndarray) -> float:
        log_joint = self.log_component_densities(x) + np.log(self.weights)
        return float(logsumexp(log_joint, axis=1).mean())


def _weighted_median(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-column weighted median of x [N, D] under weights w [N]."""
    order = np.argsort(x, axis=0)
    w_sorted = np.take_along_axis(np.broadcast_to(w[:, None], x.shape), order, axis=0)
    cum = np.cumsum(w_sorted, axis=0)
    half = 0.5 * cum[-1]
    idx = (cum >= half).argmax(axis=0)
    return np.take_along_axis(x, order[idx, np.arange(x.shape[1])][None, :], axis=0)[0]


def _m_step(x, resp, families, scale_floor, old_means, old_scales):
    n, _ = x.shape
    k = resp.shape[1]
    weights = resp.sum(axis=0) / n
    means = old_means.copy()
    scales = old_scales.copy()
    for j in range(k):
        r = resp[:, j]
        total = r.sum()
        if total < 1e-12:
            continue  # dead center keeps previous parameters
        if families[j] == GAUSSIAN:
            mu = (r[:, None] * x).sum(axis=0) / total
            var = (r[:, None] * (x - mu) ** 2).sum(axis=0) / total
            means[j] = mu
            scales[j] = np.maximum(np.sqrt(var), scale_floor)
        else:
            mu = _weighted_median(x, r)
            b = (r[:, None] * np.abs(x - mu)).sum(axis=0) / total
            means[j] = mu
            scales[j] = np.maximum(b, scale_floor)
    weights = np.maximum(weights, 1e-12)
    return weights / weights.sum(), means, scales


def _run_em(x, mix: HybridMixture, scale_floor, tol, max_iter):
    history = [mix.mean_log_likelihood(x)]
    for _ in range(max_iter):
        resp = mix.responsibilities(x)
        mix.weights, mix.means, mix.scales = _m_step(
            x, resp, mix.families, scale_floor, mix.means, mix.scales)
        ll = mix.mean_log_likelihood(x)
        history.append(ll)
        if abs(ll - history[-2]) <= tol * max(1.0, abs(history[-2])):
            break
    return mix, history


def _kmeanspp_init(x_unique: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x_unique[rng.integers(len(x_unique))]]
    for _ in range(1, k):
        d2 = np.min(
            [((x_unique - c) ** 2).sum(axis=1) for c in centers], axis=0)
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(len(x_unique), 1.0 / len(x_unique))
        centers.append(x_unique[rng.choice(len(x_unique), p=probs)])
    return np.stack(centers)


def fit_hybrid_mixture(corpus, num_centers: int, seed: int = 0, *,
                       scale_floor: float = 1e-4, tol: float = 1e-6,
                       max_iter: int = 200) -> HybridMixture:
    """EM-fit a hybrid mixture on the pooled word vectors of a corpus.

    Families are selected first: an all-Gaussian EM runs on a 90% split,
    each center is trialed as a Laplacian re-estimated from the final
    responsibilities, and a swap is kept when it improves the likelihood
    of the held-out 10%. The final EM pass then refits the chosen
    families on all pooled vectors; its mean log-likelihood per
    iteration (non-decreasing) is returned as ``history``.
    """
    pooled = np.vstack([np.atleast_2d(np.asarray(seq, dtype=np.float64)) for seq in corpus])
    unique = np.unique(pooled, axis=0)
    if len(unique) < num_centers:
        raise DegenerateCorpus(
            f"{len(unique)} distinct vectors < {num_centers} centers")

    rng = np.random.default_rng(seed)
    n = len(pooled)
    if n >= 10:
        perm = rng.permutation(n)
        n_held = max(1, n // 10)
        held, fit_set = pooled[perm[:n_held]], pooled[perm[n_held:]]
        if len(np.unique(fit_set, axis=0)) < num_centers:
            held, fit_set = pooled, pooled
    else:
        held, fit_set = pooled, pooled

    init_means = _kmeanspp_init(np.unique(fit_set, axis=0), num_centers, rng)
    init_scale = np.maximum(fit_set.std(axis=0), scale_floor)
    mix = HybridMixture(
        weights=np.full(num_centers, 1.0 / num_centers),
        means=init_means,
        scales=np.tile(init_scale, (num_centers, 1)),
        families=np.full(num_centers, GAUSSIAN, dtype=np.int64),
    )
    mix, _ = _run_em(fit_set, mix, scale_floor, tol, max_iter)

    # trial each center as a Laplacian, judged on the held-out split
    resp = mix.responsibilities(fit_set)
    base_ll = mix.mean_log_likelihood(held)
    for j in range(num_centers):
        r = resp[:, j]
        if r.sum() < 1e-12:
            continue
        mu = _weighted_median(fit_set, r)
        b = np.maximum((r[:, None] * np.abs(fit_set - mu)).sum(axis=0) / r.sum(),
                       scale_floor)
        trial = HybridMixture(mix.weights.copy(), mix.means.copy(),
                              mix.scales.copy(), mix.families.copy())
        trial.families[j] = LAPLACIAN
        trial.means[j] = mu
        trial.scales[j] = b
        trial_ll = trial.mean_log_likelihood(held)
        if trial_ll > base_ll:
            mix = trial
            base_ll = trial_ll

    mix, history = _run_em(pooled, mix, scale_floor, tol, max_iter)
    mix.history = history
    return mix


def fisher_vector(words: np.ndarray, mix: HybridMixture) -> np.ndarray:
    """Encode a word-vector sequence as a 2*D*K normalized gradient vector.

    Gradients of the mixture log-likelihood w.r.t. means and scales are
    responsibility-weighted, averaged over tokens, scaled by the
    per-center weight terms, then signed-sqrt power normalized and L2
    normalized (an all-zero raw vector is returned unchanged).
    """
    x = np.atleast_2d(np.asarray(words, dtype=np.float64))
    if x.shape[1] != mix.dim:
        raise DimensionMismatch(f"word dim {x.shape[1]} != mixture dim {mix.dim}")
    n = x.shape[0]
    resp = mix.responsibilities(x)

    d_mean = np.empty((mix.num_centers, mix.dim))
    d_scale = np.empty((mix.num_centers, mix.dim))
    for k in range(mix.num_centers):
        diff = x - mix.means[k]
        s = mix.scales[k]
        r = resp[:, k][:, None]
        if mix.families[k] == GAUSSIAN:
            g_mu = diff / s
            g_s = (diff / s) ** 2 - 1.0
        else:
            g_mu = np.sign(diff)
            g_s = np.abs(diff) / s - 1.0
        d_mean[k] = (r * g_mu).sum(axis=0) / (n * np.sqrt(mix.weights[k]))
        d_scale[k] = (r * g_s).sum(axis=0) / (n * np.sqrt(2.0 * mix.weights[k]))

    return power_l2_normalize(np.concatenate([d_mean.ravel(), d_scale.ravel()]))


def power_l2_normalize(raw: np.ndarray) -> np.ndarray:
    """Signed-sqrt power normalization then L2; an all-zero vector stays zero."""
    powered = np.sign(raw) * np.sqrt(np.abs(raw))
    norm = np.linalg.norm(powered)
    return powered / norm if norm > 0 else powered


@dataclass
class PcaProjection:
    mean: np.ndarray        # [F]
    components: np.ndarray  # [E, F], orthonormal rows

    @property
    def out_dim(self) -> int:
        return int(self.components.shape[0])


def pca_fit(vectors: np.ndarray, out_dim: int) -> PcaProjection:
    """Top principal directions of the centered corpus via SVD."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("pca_fit expects a [N, F] matrix")
    n, f = x.shape
    if n < out_dim:
        raise RankDeficient(f"corpus size {n} < requested dim {out_dim}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    tol = svals[0] * max(n, f) * np.finfo(np.float64).eps if svals.size else 0.0
    rank = int((svals > tol).sum())
    if rank < out_dim:
        raise RankDeficient(f"corpus rank {rank} < requested dim {out_dim}")
    components = vt[:out_dim]
    # fix the sign so refits of the same corpus are reproducible
    flips = np.sign(components[np.arange(out_dim), np.abs(components).argmax(axis=1)])
    return PcaProjection(mean=mean, components=components * flips[:, None])


def pca_project(vector: np.ndarray, projection: PcaProjection) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape[-1] != projection.mean.shape[0]:
        raise DimensionMismatch(
            f"vector dim {v.shape[-1]} != projection dim {projection.mean.shape[0]}")
    return (v - projection.mean) @ projection.components.T


def pca_reconstruct(coords: np.ndarray, projection: PcaProjection) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) @ projection.components + projection.mean


class ConditionAugmenter(nn.Module):
    """Samples a condition vector from a caption-dependent Gaussian.

    The mean and log of the diagonal std are affine in the caption
    embedding; given the noise draw the mapping is a pure function.
    """

    def __init__(self, embed_dim: int, cond_dim: int):
        super().__init__()
        self.mu_map = nn.Linear(embed_dim, cond_dim)
        self.logsigma_map = nn.Linear(embed_dim, cond_dim)
        # start with a small spread so the condition carries the caption
        # signal from the first step; the maps widen it as training asks
        nn.init.zeros_(self.logsigma_map.weight)
        nn.init.constant_(self.logsigma_map.bias, -2.0)

    def moments(self, phi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.mu_map(phi), torch.exp(self.logsigma_map(phi))

    def forward(self, phi: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        mu, sigma = self.moments(phi)
        return mu + sigma * eps

    def kl_to_standard(self, phi: torch.Tensor) -> torch.Tensor:
        """KL(N(mu, sigma) || N(0, I)), summed over dims, mean over batch."""
        mu = self.mu_map(phi)
        logsigma = self.logsigma_map(phi)
        return (0.5 * (mu ** 2 + torch.exp(2 * logsigma) - 1.0) - logsigma).sum(dim=-1).mean()


def condition_augment(phi: torch.Tensor, params: ConditionAugmenter,
                      eps: torch.Tensor) -> torch.Tensor:
    return params(phi, eps)


class CaptionEncoder:
    """Fitted caption -> embedding pipeline (table, mixture, projection)."""

    def __init__(self, table: EmbeddingTable, mixture: HybridMixture,
                 projection: PcaProjection):
        self.table = table
        self.mixture = mixture
        self.projection = projection

    @property
    def embed_dim(self) -> int:
        return self.projection.out_dim

    @classmethod
    def fit(cls, captions, *, word_dim: int, num_centers: int, embed_dim: int,
            seed: int = 0, scale_floor: float = 1e-4, tol: float = 1e-6,
            max_iter: int = 200) -> "CaptionEncoder":
        table = EmbeddingTable(word_dim, seed=seed)
        sequences = [table(tokenize(c)) for c in captions]
        mixture = fit_hybrid_mixture(sequences, num_centers, seed=seed,
                                     scale_floor=scale_floor, tol=tol,
                                     max_iter=max_iter)
        fvs = np.stack([fisher_vector(seq, mixture) for seq in sequences])
        projection = pca_fit(fvs, embed_dim)
        return cls(table, mixture, projection)

    @classmethod
    def fit_from_config(cls, captions, cfg) -> "CaptionEncoder":
        return cls.fit(captions, word_dim=cfg.word_dim,
                       num_centers=cfg.mixture_centers, embed_dim=cfg.embed_dim,
                       seed=cfg.seed, scale_floor=cfg.scale_floor,
                       tol=cfg.em_tol, max_iter=cfg.em_max_iter)

    def encode(self, caption: str) -> np.ndarray:
        words = self.table(tokenize(caption))
        return pca_project(fisher_vector(words, self.mixture), self.projection)

    def save(self, path) -> None:
        # payload stays pure float32; discrete fields live in the manifest
        arrays = {
            "weights": self.mixture.weights.astype(np.float32),
            "means": self.mixture.means.astype(np.float32),
            "scales": self.mixture.scales.astype(np.float32),
            "history": np.asarray(self.mixture.history, dtype=np.float32),
            "pca_mean": self.projection.mean.astype(np.float32),
            "pca_components": self.projection.components.astype(np.float32),
        }
        meta = {
            "word_dim": self.table.dim,
            "table_seed": self.table.seed,
            "families": [int(f) for f in self.mixture.families],
        }
        write_container(path, ARTIFACT_MAGIC, arrays, meta)

    @classmethod
    def load(cls, path) -> "CaptionEncoder":
        arrays, meta, _ = read_container(path, ARTIFACT_MAGIC)
        try:
            table = EmbeddingTable(int(meta["word_dim"]), seed=int(meta["table_seed"]))
            mixture = HybridMixture(
                weights=arrays["weights"].astype(np.float64),
                means=arrays["means"].astype(np.float64),
                scales=arrays["scales"].astype(np.float64),
                families=np.asarray(meta["families"], dtype=np.int64),
                history=[float(v) for v in arrays["history"]],
            )
            projection = PcaProjection(
                mean=arrays["pca_mean"].astype(np.float64),
                components=arrays["pca_components"].astype(np.float64),
            )
        except KeyError as exc:
            raise CorruptCheckpoint(f"{path}: missing field {exc}") from exc
        return cls(table, mixture, projection)
