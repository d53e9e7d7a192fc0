"""Training loops for the two adversarial procedures, plus metrics logging
and bit-exact checkpointing.

``gan`` mode trains the linear generator against the adversarial loss alone;
``aae`` mode jointly minimizes reconstruction through the tied decoder, the
adversarial loss, and a latent cosine penalty against target samples. In both
modes the training discriminator and a structurally identical monitoring
discriminator are updated on the same batches every step; the monitor never
influences the generator and exists purely as an over/underfitting probe.

Checkpoints capture parameters, batch-norm running statistics, optimizer
moments, every RNG substream and the step counter, so a restored run
continues exactly the trajectory of an uninterrupted one.
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embed_io import EmbeddingTable, FrequencyTable
from .evaluation import collapse_metric, distribution_match_report
from .layers import (
    adversarial_loss,
    adversarial_loss_grad,
    bce_loss,
    bce_loss_grads,
    cosine_dissim_grads,
    cosine_dissim_loss,
)
from .models import Discriminator, EncoderDecoder, ModelConfig, build_models
from .numerics import RNG_ALGORITHM, Rng
from .optim import Adam, NonFiniteGradient
from .sampling import SamplerConfig, build_adjusted, sample_batch

CHECKPOINT_MAGIC = b"XLAAE001"
CHECKPOINT_VERSION = 1

TRAIN_MODES = ("gan", "aae")


class CheckpointError(ValueError):
    pass


class NonFiniteMetric(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite metric at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    mode: str = "aae"
    lambda_r: float = 1.0
    lambda_a: float = 1.0
    lambda_c: float = 1.0
    batch_size: int = 256
    lr_gen: float = 0.001
    lr_disc: float = 0.01
    max_steps: int = 50000
    eval_every: int = 1000
    eval_size: int = 256
    checkpoint_every: int = 10000
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if min(self.lambda_r, self.lambda_a, self.lambda_c) < 0.0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch norm)")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.eval_every < 1 or self.checkpoint_every < 1 or self.eval_size < 2:
            raise ValueError("eval/checkpoint intervals must be >= 1, eval size >= 2")
        if self.lr_gen <= 0.0 or self.lr_disc <= 0.0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d["model"])
        d["sampler"] = SamplerConfig(**d["sampler"])
        return cls(**d)


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss_recon: float
    loss_adv: float
    loss_cos: float
    loss_total: float
    disc_bce: float
    monitor_bce: float
    monitor_acc: float
    collapse_cos: float
    collapse_std: float
    wall_time: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["type"] = "step"
        return d

    def finite(self) -> bool:
        return all(
            np.isfinite(v) for k, v in asdict(self).items() if k != "step"
        )


def _collapse_stats(outputs: np.ndarray):
    """Collapse statistic tolerant of all-zero rows (maximal collapse)."""
    std = float(outputs.std(axis=0).mean())
    nonzero = outputs[np.linalg.norm(outputs, axis=1) > 0.0]
    if nonzero.shape[0] < 2:
        return 1.0, std
    return collapse_metric(nonzero).mean_pairwise_cosine, std


class Trainer:
    """Owns the models, optimizers, samplers and RNG substreams of one run."""

    STREAMS = ("sample_src", "sample_tgt", "dropout_train", "dropout_monitor", "eval")

    def __init__(self, cfg: TrainConfig, src: EmbeddingTable, tgt: EmbeddingTable,
                 src_freq: FrequencyTable | None = None,
                 tgt_freq: FrequencyTable | None = None):
        if src.dim != cfg.model.dim or tgt.dim != cfg.model.dim:
            raise ValueError(
                f"embedding dims (src {src.dim}, tgt {tgt.dim}) do not match "
                f"model dim {cfg.model.dim}"
            )
        self.cfg = cfg
        self.src = src
        self.tgt = tgt
        if src_freq is None:
            src_freq = FrequencyTable.uniform(src.vocab)
        if tgt_freq is None:
            tgt_freq = FrequencyTable.uniform(tgt.vocab)
        self.src_dist = build_adjusted(src_freq, cfg.sampler)
        self.tgt_dist = build_adjusted(tgt_freq, cfg.sampler)

        root = Rng(cfg.seed)
        self.rngs = {name: root.substream(name) for name in self.STREAMS}
        self.encoder, self.d_train, self.d_monitor = build_models(
            cfg.model, root.substream("init")
        )
        self.opt_gen = Adam(self.encoder.params(), cfg.lr_gen)
        self.opt_disc = Adam(self.d_train.params(), cfg.lr_disc)
        self.opt_monitor = Adam(self.d_monitor.params(), cfg.lr_disc)
        self.step_count = 0

    # -- single training steps -------------------------------------------

    def step(self) -> StepMetrics:
        t0 = time.perf_counter()
        if self.cfg.mode == "gan":
            vals = self._gan_step()
        else:
            vals = self._aae_step()
        self.step_count += 1
        metrics = StepMetrics(
            step=self.step_count,
            wall_time=time.perf_counter() - t0,
            **vals,
        )
        if not metrics.finite():
            raise NonFiniteMetric(self.step_count, repr(metrics))
        return metrics

    def _gan_step(self) -> dict:
        n = self.cfg.batch_size
        f, _ = sample_batch(self.src_dist, self.src, n, self.rngs["sample_src"])

        e_hat = self.encoder.encode(f)
        p = self.d_train.forward(e_hat, self.rngs["dropout_train"])
        loss_adv = adversarial_loss(p)
        collapse_cos, collapse_std = _collapse_stats(e_hat)

        grad_e_hat = self.d_train.backward(adversarial_loss_grad(p))
        self.encoder.encode_backward(grad_e_hat)
        self.opt_gen.step()
        self.opt_gen.zero_grad()
        # The generator pass leaked gradients into the discriminator; drop them.
        self.d_train.zero_grads()

        e, _ = sample_batch(self.tgt_dist, self.tgt, n, self.rngs["sample_tgt"])
        disc_bce, monitor_bce, monitor_acc = self._disc_update(e_hat, e)
        return {
            "loss_recon": 0.0,
            "loss_adv": loss_adv,
            "loss_cos": 0.0,
            "loss_total": loss_adv,
            "disc_bce": disc_bce,
            "monitor_bce": monitor_bce,
            "monitor_acc": monitor_acc,
            "collapse_cos": collapse_cos,
            "collapse_std": collapse_std,
        }

    def _aae_step(self) -> dict:
        cfg = self.cfg
        n = cfg.batch_size
        f, _ = sample_batch(self.src_dist, self.src, n, self.rngs["sample_src"])
        e, _ = sample_batch(self.tgt_dist, self.tgt, n, self.rngs["sample_tgt"])

        e_hat = self.encoder.encode(f)
        recon = self.encoder.decode(e_hat)
        p = self.d_train.forward(e_hat, self.rngs["dropout_train"])
        loss_recon = cosine_dissim_loss(f, recon)
        loss_adv = adversarial_loss(p)
        loss_cos = cosine_dissim_loss(e, e_hat)
        loss_total = (
            cfg.lambda_r * loss_recon
            + cfg.lambda_a * loss_adv
            + cfg.lambda_c * loss_cos
        )
        collapse_cos, collapse_std = _collapse_stats(e_hat)

        _, grad_recon = cosine_dissim_grads(f, recon)
        grad_from_recon = self.encoder.decode_backward(cfg.lambda_r * grad_recon)
        grad_from_disc = self.d_train.backward(
            cfg.lambda_a * adversarial_loss_grad(p)
        )
        _, grad_from_cos = cosine_dissim_grads(e, e_hat)
        self.encoder.encode_backward(
            grad_from_recon + grad_from_disc + cfg.lambda_c * grad_from_cos
        )
        self.opt_gen.step()
        self.opt_gen.zero_grad()
        self.d_train.zero_grads()

        disc_bce, monitor_bce, monitor_acc = self._disc_update(e_hat, e)
        return {
            "loss_recon": loss_recon,
            "loss_adv": loss_adv,
            "loss_cos": loss_cos,
            "loss_total": loss_total,
            "disc_bce": disc_bce,
            "monitor_bce": monitor_bce,
            "monitor_acc": monitor_acc,
            "collapse_cos": collapse_cos,
            "collapse_std": collapse_std,
        }

    def _disc_update(self, e_hat: np.ndarray, e: np.ndarray):
        """Update both discriminators on target (positive) vs mapped source
        (negative) rows. The negatives are the same mapped batch the
        generator was just scored on, reused as plain values, so no gradient
        reaches the generator.

        Positives and negatives go through one joint forward so batch norm
        normalizes them together. Normalizing the two classes separately
        hands the discriminator a degenerate shortcut (batch-level statistics
        differ between the classes even when individual rows overlap), which
        produces runaway discriminator wins and garbage generator gradients.
        """
        n = e.shape[0]
        joint = np.vstack([e, e_hat])
        results = []
        for disc, opt, rng in (
            (self.d_train, self.opt_disc, self.rngs["dropout_train"]),
            (self.d_monitor, self.opt_monitor, self.rngs["dropout_monitor"]),
        ):
            p = disc.forward(joint, rng)
            p_pos, p_neg = p[:n], p[n:]
            loss = bce_loss(p_pos, p_neg)
            grad_pos, grad_neg = bce_loss_grads(p_pos, p_neg)
            disc.backward(np.vstack([grad_pos, grad_neg]))
            opt.step()
            opt.zero_grad()
            results.append((loss, p_pos, p_neg))
        (disc_bce, _, _), (monitor_bce, mp, mn) = results
        # p = 0.5 classifies as negative, so the tie case is deterministic.
        monitor_acc = (int(np.sum(mp > 0.5)) + int(np.sum(mn <= 0.5))) / (
            mp.size + mn.size
        )
        return disc_bce, monitor_bce, float(monitor_acc)

    # -- evaluation --------------------------------------------------------

    def evaluate(self, sample_size: int | None = None) -> dict:
        """Frozen-model evaluation on fresh draws from the eval substream."""
        m = sample_size if sample_size is not None else self.cfg.eval_size
        rng = self.rngs["eval"]
        f, _ = sample_batch(self.src_dist, self.src, m, rng)
        e, _ = sample_batch(self.tgt_dist, self.tgt, m, rng)
        self.set_training(False)
        try:
            mapped = self.encoder.map_rows(f)
            collapse_cos, collapse_std = _collapse_stats(mapped)
            report = distribution_match_report(mapped, e, self.d_monitor)
        finally:
            self.set_training(True)
        return {
            "type": "eval",
            "step": self.step_count,
            "collapse_cos": collapse_cos,
            "collapse_std": collapse_std,
            "mean_diff": report["mean_diff"],
            "cov_frobenius_error": report["cov_frobenius_error"],
            "monitor_accuracy": report["monitor_accuracy"],
        }

    def set_training(self, flag: bool) -> None:
        self.d_train.set_training(flag)
        self.d_monitor.set_training(flag)

    # -- the outer loop ------------------------------------------------------

    def run(self, out_dir=None, on_record=None) -> Path | None:
        """Run to ``max_steps``, emitting step records, periodic evaluation
        records and checkpoints. Returns the final checkpoint path."""
        out = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(out / "metrics.jsonl", "a", encoding="utf-8")

        def emit(record: dict) -> None:
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if on_record is not None:
                on_record(record)

        try:
            while self.step_count < self.cfg.max_steps:
                try:
                    metrics = self.step()
                except (NonFiniteMetric, NonFiniteGradient) as err:
                    emit({"type": "error", "step": self.step_count, "message": str(err)})
                    if metrics_fh is not None:
                        metrics_fh.flush()
                    if out is not None:
                        self.save_checkpoint(out / "checkpoint_diagnostic.xlaae")
                    raise
                emit(metrics.to_dict())
                s = self.step_count
                if s % self.cfg.eval_every == 0:
                    emit(self.evaluate())
                    if metrics_fh is not None:
                        metrics_fh.flush()
                if out is not None and s % self.cfg.checkpoint_every == 0:
                    self.save_checkpoint(out / f"checkpoint_{s:08d}.xlaae")
            final = None
            if out is not None:
                final = out / "checkpoint_final.xlaae"
                self.save_checkpoint(final)
            return final
        finally:
            if metrics_fh is not None:
                metrics_fh.close()

    # -- checkpointing -----------------------------------------------------

    def _all_params(self):
        return (
            self.encoder.params()
            + self.d_train.params()
            + self.d_monitor.params()
        )

    def _checkpoint_arrays(self) -> dict:
        arrays: dict = {}
        for p in self._all_params():
            arrays[p.name] = p.value
        arrays.update(self.d_train.norm_state())
        arrays.update(self.d_monitor.norm_state())
        for label, opt in (
            ("gen", self.opt_gen),
            ("disc", self.opt_disc),
            ("monitor", self.opt_monitor),
        ):
            for pname, buf in opt.m.items():
                arrays[f"adam.{label}.m.{pname}"] = buf
            for pname, buf in opt.v.items():
                arrays[f"adam.{label}.v.{pname}"] = buf
        return arrays

    def save_checkpoint(self, path) -> None:
        header = {
            "config": self.cfg.to_dict(),
            "step": self.step_count,
            "rng": {
                "algorithm": RNG_ALGORITHM,
                "seed": self.cfg.seed,
                "streams": {n: self.rngs[n].get_state() for n in self.STREAMS},
            },
            "adam_steps": {
                "gen": self.opt_gen.t,
                "disc": self.opt_disc.t,
                "monitor": self.opt_monitor.t,
            },
        }
        write_checkpoint(path, header, self._checkpoint_arrays())

    @classmethod
    def resume(cls, path, src: EmbeddingTable, tgt: EmbeddingTable,
               src_freq: FrequencyTable | None = None,
               tgt_freq: FrequencyTable | None = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; continues bit-identically
        given the same embedding and frequency inputs."""
        header, arrays = read_checkpoint(path)
        cfg = TrainConfig.from_dict(header["config"])
        trainer = cls(cfg, src, tgt, src_freq, tgt_freq)
        trainer._restore(header, arrays)
        return trainer

    def _restore(self, header: dict, arrays: dict) -> None:
        for p in self._all_params():
            if p.name not in arrays:
                raise CheckpointError(f"checkpoint missing array {p.name!r}")
            if arrays[p.name].shape != p.value.shape:
                raise CheckpointError(
                    f"shape mismatch for {p.name!r}: checkpoint "
                    f"{arrays[p.name].shape} vs model {p.value.shape}"
                )
            p.value[...] = arrays[p.name]
            p.zero_grad()
        self.d_train.load_norm_state(arrays)
        self.d_monitor.load_norm_state(arrays)
        for label, opt in (
            ("gen", self.opt_gen),
            ("disc", self.opt_disc),
            ("monitor", self.opt_monitor),
        ):
            opt.load_state_dict(
                {
                    "t": header["adam_steps"][label],
                    "m": {p.name: arrays[f"adam.{label}.m.{p.name}"] for p in opt.params},
                    "v": {p.name: arrays[f"adam.{label}.v.{p.name}"] for p in opt.params},
                }
            )
        for name in self.STREAMS:
            self.rngs[name].set_state(header["rng"]["streams"][name])
        self.step_count = int(header["step"])


def train(cfg: TrainConfig, src: EmbeddingTable, tgt: EmbeddingTable,
          src_freq: FrequencyTable | None = None,
          tgt_freq: FrequencyTable | None = None,
          out_dir=None, on_record=None) -> Trainer:
    """Build a trainer and run it to completion."""
    trainer = Trainer(cfg, src, tgt, src_freq, tgt_freq)
    trainer.run(out_dir=out_dir, on_record=on_record)
    return trainer


# -- checkpoint container format -------------------------------------------
#
# magic "XLAAE001"
# u64le header_length, then UTF-8 JSON header (configs, step counter, rng
#   algorithm id and substream states, adam step counters, array directory)
# for each name in the directory, in order:
#   u64le name_length, name bytes, u32le ndim, ndim x u64le dims,
#   row-major IEEE-754 float64 little-endian payload
# sha256 digest (32 bytes) of everything before it


def write_checkpoint(path, header: dict, arrays: dict) -> None:
    names = list(arrays.keys())
    header = dict(header)
    header["format_version"] = CHECKPOINT_VERSION
    header["arrays"] = names
    chunks = [CHECKPOINT_MAGIC]
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<Q", len(hjson)))
    chunks.append(hjson)
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            chunks.append(struct.pack("<Q", d))
        chunks.append(arr.tobytes(order="C"))
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest)


def read_checkpoint(path):
    """Parse and verify a checkpoint; returns (header, arrays)."""
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload, digest = data[:-32], data[-32:]
    if not payload.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: digest mismatch (corrupt checkpoint)")

    offset = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(payload):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = payload[offset:offset + n]
        offset += n
        return out

    (hlen,) = struct.unpack("<Q", take(8))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable header: {err}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')!r} "
            f"unsupported (expected {CHECKPOINT_VERSION})"
        )
    arrays = {}
    for _ in header.get("arrays", []):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        count = int(np.prod(dims)) if dims else 1
        raw = take(count * 8)
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if offset != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    return header, arrays


def encoder_from_checkpoint(path):
    """Rebuild just the mapping (encoder/decoder) from a checkpoint.

    Returns (encoder, header) so callers can validate dimensions against
    their input tables.
    """
    header, arrays = read_checkpoint(path)
    if "encoder.weight" not in arrays:
        raise CheckpointError(f"{path}: checkpoint has no encoder weight")
    enc = EncoderDecoder(
        arrays["encoder.weight"],
        enc_bias=arrays.get("encoder.enc_bias"),
        dec_bias=arrays.get("encoder.dec_bias"),
    )
    return enc, header


def monitor_from_checkpoint(path) -> Discriminator:
    """Rebuild the monitoring discriminator in inference mode."""
    header, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    rng = Rng(0, "rebuild")
    disc = Discriminator("disc_monitor", cfg.model, rng)
    for p in disc.params():
        if p.name not in arrays:
            raise CheckpointError(f"{path}: checkpoint missing array {p.name!r}")
        p.value[...] = arrays[p.name]
    disc.load_norm_state(arrays)
    disc.set_training(False)
    return disc
