"""Evaluation utilities: exact nearest-neighbor queries, dictionary-based
precision@k, mode-collapse statistics, distribution-match reports, and a
synthetic benchmark generator with known ground truth.

The synthetic benchmark draws a source cloud from a Gaussian mixture and
produces the target cloud by applying a hidden random orthogonal map (plus
optional noise), so the correct mapping is known exactly and the evaluation
pipeline can be validated end to end.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed_io import EmbeddingTable, FrequencyTable, Vocabulary
from .models import Discriminator, init_orthogonal
from .numerics import Rng


@dataclass(frozen=True)
class KBestResult:
    query: str
    neighbors: tuple  # ((token, similarity), ...) similarities non-increasing


@dataclass(frozen=True)
class PrecisionReport:
    precision: float
    hits: dict  # source token -> bool
    resolvable: int
    unresolvable: int


@dataclass(frozen=True)
class CollapseReport:
    mean_pairwise_cosine: float
    mean_dim_std: float
    sample_count: int


class BilingualDictionary:
    """Source token -> set of acceptable target tokens."""

    def __init__(self, entries: dict):
        if not entries:
            raise ValueError("dictionary must be non-empty")
        self.entries = {src: frozenset(tgts) for src, tgts in entries.items()}
        for src, tgts in self.entries.items():
            if not tgts:
                raise ValueError(f"no targets for source token {src!r}")

    @classmethod
    def load(cls, path) -> "BilingualDictionary":
        entries: dict = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'src<TAB>tgt'")
                entries.setdefault(parts[0], set()).add(parts[1])
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for src in sorted(self.entries):
                for tgt in sorted(self.entries[src]):
                    fh.write(f"{src}\t{tgt}\n")


def knn(query_vec, tgt: EmbeddingTable, k: int, query: str = "") -> KBestResult:
    """Exact top-k target tokens by cosine similarity.

    Ties break by ascending target row index, so results are deterministic.
    """
    q = np.asarray(query_vec, dtype=np.float64).ravel()
    if q.size != tgt.dim:
        raise ValueError(f"query dim {q.size} != table dim {tgt.dim}")
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError("zero query vector")
    if not (1 <= k <= len(tgt.vocab)):
        raise ValueError(f"k={k} outside [1, {len(tgt.vocab)}]")
    norms = np.linalg.norm(tgt.matrix, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.argmax(norms == 0.0))
        raise ValueError(f"zero target row for token {tgt.vocab.tokens[bad]!r}")
    sims = np.clip((tgt.matrix @ q) / (norms * qn), -1.0, 1.0)
    order = np.lexsort((np.arange(sims.size), -sims))[:k]
    neighbors = tuple((tgt.vocab.tokens[i], float(sims[i])) for i in order)
    return KBestResult(query=query, neighbors=neighbors)


def precision_at_k(mapped_src: EmbeddingTable, tgt: EmbeddingTable,
                   dictionary: BilingualDictionary, k: int) -> PrecisionReport:
    """Fraction of resolvable entries whose top-k contains an accepted target."""
    hits = {}
    unresolvable = 0
    for src_tok, accepted in dictionary.entries.items():
        targets = {t for t in accepted if t in tgt.vocab}
        if src_tok not in mapped_src.vocab or not targets:
            unresolvable += 1
            continue
        result = knn(mapped_src.row(src_tok), tgt, k, query=src_tok)
        hits[src_tok] = any(tok in targets for tok, _ in result.neighbors)
    if not hits:
        raise ValueError("no resolvable dictionary entries")
    precision = sum(hits.values()) / len(hits)
    return PrecisionReport(
        precision=float(precision),
        hits=hits,
        resolvable=len(hits),
        unresolvable=unresolvable,
    )


def collapse_metric(outputs) -> CollapseReport:
    """Mean pairwise cosine similarity plus mean per-dimension spread.

    Near-constant generator output shows up as mean pairwise cosine close
    to 1 together with per-dimension standard deviation close to 0.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim != 2 or outputs.shape[0] < 2:
        raise ValueError("need a matrix with at least 2 rows")
    m = outputs.shape[0]
    norms = np.linalg.norm(outputs, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero row in generator outputs")
    unit = outputs / norms[:, None]
    s = unit.sum(axis=0)
    # sum over i<j of cos_ij equals (||sum of units||^2 - m) / 2
    mean_cos = (float(s @ s) - m) / (m * (m - 1))
    return CollapseReport(
        mean_pairwise_cosine=float(np.clip(mean_cos, -1.0, 1.0)),
        mean_dim_std=float(outputs.std(axis=0).mean()),
        sample_count=m,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int = 16
    source_size: int = 2000
    target_size: int = 2000
    components: int = 5
    means_scale: float = 1.0
    cov_scale: float = 1.0
    noise_sigma: float = 0.0
    zipf_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.dim, self.source_size, self.target_size, self.components) < 1:
            raise ValueError("dim, sizes and component count must be positive")
        if self.noise_sigma < 0.0:
            raise ValueError("noise sigma must be >= 0")


@dataclass(frozen=True)
class SyntheticData:
    src: EmbeddingTable
    tgt: EmbeddingTable
    src_freq: FrequencyTable
    tgt_freq: FrequencyTable
    truth: BilingualDictionary
    map_matrix: np.ndarray


def _zipf_counts(size: int, exponent: float) -> list:
    base = 1_000_000.0
    return [max(1, round(base / (r + 1) ** exponent)) for r in range(size)]


def _tokens(prefix: str, size: int) -> list:
    width = max(4, len(str(size)))
    return [f"{prefix}{i + 1:0{width}d}" for i in range(size)]


def synth_generate(spec: SyntheticSpec) -> SyntheticData:
    """Build aligned source/target tables with a hidden orthogonal mapping."""
    rng = Rng(spec.seed, "synth")
    base = max(spec.source_size, spec.target_size)
    means = rng.substream("means").normal(size=(spec.components, spec.dim)) * spec.means_scale
    assign = np.minimum(
        (rng.substream("assign").uniform(size=base) * spec.components).astype(int),
        spec.components - 1,
    )
    cloud = means[assign] + rng.substream("cloud").normal(size=(base, spec.dim)) * spec.cov_scale
    q = init_orthogonal(spec.dim, rng.substream("map"))

    src_matrix = cloud[: spec.source_size]
    tgt_matrix = cloud[: spec.target_size] @ q
    if spec.noise_sigma > 0.0:
        tgt_matrix = tgt_matrix + (
            rng.substream("noise").normal(size=tgt_matrix.shape) * spec.noise_sigma
        )

    src_tokens = _tokens("s", spec.source_size)
    tgt_tokens = _tokens("t", spec.target_size)
    src_vocab = Vocabulary(src_tokens)
    tgt_vocab = Vocabulary(tgt_tokens)
    src = EmbeddingTable(src_vocab, src_matrix)
    tgt = EmbeddingTable(tgt_vocab, tgt_matrix)
    src_freq = FrequencyTable(
        src_vocab, dict(zip(src_tokens, _zipf_counts(spec.source_size, spec.zipf_exponent)))
    )
    tgt_freq = FrequencyTable(
        tgt_vocab, dict(zip(tgt_tokens, _zipf_counts(spec.target_size, spec.zipf_exponent)))
    )
    paired = min(spec.source_size, spec.target_size)
    truth = BilingualDictionary(
        {src_tokens[i]: {tgt_tokens[i]} for i in range(paired)}
    )
    return SyntheticData(src=src, tgt=tgt, src_freq=src_freq, tgt_freq=tgt_freq,
                         truth=truth, map_matrix=q)


def distribution_match_report(mapped, target_sample,
                              monitor: Discriminator | None = None) -> dict:
    """First/second-moment agreement between two samples, plus how well the
    monitoring discriminator can still tell them apart.

    Accuracy uses threshold 0.5 with ties classified as negative (mapped), so
    an untrained monitor scoring everything 0.5 gets all targets wrong.
    """
    mapped = np.asarray(mapped, dtype=np.float64)
    target_sample = np.asarray(target_sample, dtype=np.float64)
    if mapped.ndim != 2 or target_sample.ndim != 2:
        raise ValueError("samples must be matrices")
    if mapped.shape[1] != target_sample.shape[1]:
        raise ValueError(
            f"dimension mismatch: {mapped.shape[1]} vs {target_sample.shape[1]}"
        )
    if mapped.shape[0] < 2 or target_sample.shape[0] < 2:
        raise ValueError("need at least 2 rows per sample")

    mu_m = mapped.mean(axis=0)
    mu_t = target_sample.mean(axis=0)
    tgt_norm = np.linalg.norm(mu_t)
    diff = np.linalg.norm(mu_m - mu_t)
    mean_diff = diff if tgt_norm < 1e-9 else diff / tgt_norm

    cm = _covariance(mapped)
    ct = _covariance(target_sample)
    ct_norm = np.linalg.norm(ct)
    cov_diff = np.linalg.norm(cm - ct)
    cov_error = cov_diff if ct_norm < 1e-12 else cov_diff / ct_norm

    report = {
        "mean_diff": float(mean_diff),
        "cov_frobenius_error": float(cov_error),
        "monitor_accuracy": None,
    }
    if monitor is not None:
        p_t = monitor.predict(target_sample)
        p_m = monitor.predict(mapped)
        correct = int(np.sum(p_t > 0.5)) + int(np.sum(p_m <= 0.5))
        report["monitor_accuracy"] = correct / (p_t.size + p_m.size)
    return report


def _covariance(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    return xc.T @ xc / (x.shape[0] - 1)
