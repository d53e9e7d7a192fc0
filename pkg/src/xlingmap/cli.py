"""Command-line entry point.

Subcommands: ``train`` and ``resume`` drive the training loop, ``map``
transforms a whole embedding table through a trained mapping, ``nn`` prints
k-best target neighbors for query words, ``eval`` computes dictionary
precision@k, and ``synth`` generates a synthetic benchmark with known ground
truth.

Exit codes: 0 success, 1 usage or validation error, 2 numeric failure during
training. ``XLINGMAP_THREADS`` caps BLAS threads (default 1, keeping runs
bit-reproducible).
"""
from __future__ import annotations

import os

_threads = os.environ.get("XLINGMAP_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .embed_io import (
    EmbedFormatError,
    EmbeddingTable,
    load_embeddings,
    load_frequencies,
    load_matrix,
    normalize_rows,
    save_embeddings,
    save_frequencies,
    save_matrix,
)
from .evaluation import (
    BilingualDictionary,
    SyntheticSpec,
    knn,
    precision_at_k,
    synth_generate,
)
from .models import ModelConfig, PRESETS
from .numerics import NumericsError
from .optim import NonFiniteGradient
from .sampling import SamplerConfig
from .training import (
    CheckpointError,
    NonFiniteMetric,
    TrainConfig,
    Trainer,
    encoder_from_checkpoint,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="xlingmap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_flags(p, resume: bool):
        p.add_argument("--src", required=True, help="source embedding file")
        p.add_argument("--tgt", required=True, help="target embedding file")
        p.add_argument("--src-freq", help="source frequency TSV")
        p.add_argument("--tgt-freq", help="target frequency TSV")
        p.add_argument("--out", required=True, help="output directory")
        if resume:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--max-steps", type=int,
                           help="override the step budget stored in the checkpoint")
        else:
            p.add_argument("--mode", choices=("gan", "aae"), default="aae")
            p.add_argument("--preset", choices=sorted(PRESETS))
            p.add_argument("--k", type=int, default=40, dest="block_dim",
                           help="discriminator block width")
            p.add_argument("--T", type=int, default=10, dest="depth",
                           help="discriminator block count")
            p.add_argument("--n", type=int, default=256, dest="batch_size")
            p.add_argument("--lr-gen", type=float, default=0.001)
            p.add_argument("--lr-disc", type=float, default=0.01)
            p.add_argument("--lambda-r", type=float, default=1.0)
            p.add_argument("--lambda-a", type=float, default=1.0)
            p.add_argument("--lambda-c", type=float, default=1.0)
            p.add_argument("--max-steps", type=int, default=50000)
            p.add_argument("--eval-every", type=int, default=1000)
            p.add_argument("--checkpoint-every", type=int, default=10000)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--subsample-threshold", type=float, default=1e-5)
            p.add_argument("--subsample-formula", choices=("code", "paper"),
                           default="code")
            p.add_argument("--dropout", type=float, default=0.1)
            p.add_argument("--leaky-slope", type=float, default=0.01)
            p.add_argument("--normalize", action="store_true",
                           help="unit-normalize embedding rows before training")

    add_train_flags(sub.add_parser("train", help="train a mapping"), resume=False)
    add_train_flags(sub.add_parser("resume", help="resume from a checkpoint"),
                    resume=True)

    p_map = sub.add_parser("map", help="map a source table through a checkpoint")
    p_map.add_argument("--checkpoint", required=True)
    p_map.add_argument("--src", required=True)
    p_map.add_argument("--out", required=True, help="output embedding file")

    p_nn = sub.add_parser("nn", help="k-best target neighbors for query words")
    p_nn.add_argument("--checkpoint", required=True)
    p_nn.add_argument("--src", required=True)
    p_nn.add_argument("--tgt", required=True)
    p_nn.add_argument("--words", required=True,
                      help="comma-separated source query words")
    p_nn.add_argument("--k", type=int, default=10)

    p_eval = sub.add_parser("eval", help="dictionary precision@k")
    group = p_eval.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--encoder-matrix",
                       help="text matrix file to use as the mapping weight")
    p_eval.add_argument("--src", required=True)
    p_eval.add_argument("--tgt", required=True)
    p_eval.add_argument("--dict", required=True, dest="dictionary")
    p_eval.add_argument("--k", type=int, default=10)
    p_eval.add_argument("--out", help="write the JSON report here as well")

    p_synth = sub.add_parser("synth", help="generate a synthetic benchmark")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--dim", type=int, default=16)
    p_synth.add_argument("--source-size", type=int, default=2000)
    p_synth.add_argument("--target-size", type=int, default=2000)
    p_synth.add_argument("--components", type=int, default=5)
    p_synth.add_argument("--means-scale", type=float, default=1.0)
    p_synth.add_argument("--cov-scale", type=float, default=1.0)
    p_synth.add_argument("--noise", type=float, default=0.0)
    p_synth.add_argument("--zipf", type=float, default=1.0)
    p_synth.add_argument("--seed", type=int, default=0)
    return parser


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_pair(args):
    src = load_embeddings(args.src)
    tgt = load_embeddings(args.tgt)
    if src.dim != tgt.dim:
        raise UsageError(
            f"dimension mismatch: src has d={src.dim}, tgt has d={tgt.dim}"
        )
    src_freq = load_frequencies(args.src_freq, src.vocab) if args.src_freq else None
    tgt_freq = load_frequencies(args.tgt_freq, tgt.vocab) if args.tgt_freq else None
    return src, tgt, src_freq, tgt_freq


def _write_manifest(out: Path, cfg: TrainConfig, args, command: str) -> None:
    inputs = {"src": args.src, "tgt": args.tgt}
    if args.src_freq:
        inputs["src_freq"] = args.src_freq
    if args.tgt_freq:
        inputs["tgt_freq"] = args.tgt_freq
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {k: {"path": str(v), "sha256": _sha256_file(v)}
                   for k, v in inputs.items()},
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _progress_printer():
    def on_record(record: dict) -> None:
        if record.get("type") == "eval":
            print(
                f"step {record['step']}: collapse={record['collapse_cos']:.3f} "
                f"cov_err={record['cov_frobenius_error']:.3f} "
                f"monitor_acc={record['monitor_accuracy']:.3f}"
            )
    return on_record


def _cmd_train(args) -> int:
    src, tgt, src_freq, tgt_freq = _load_pair(args)
    if args.normalize:
        src = normalize_rows(src)
        tgt = normalize_rows(tgt)
    block_dim, depth = args.block_dim, args.depth
    if args.preset:
        preset = PRESETS[args.preset]
        block_dim, depth = preset["block_dim"], preset["depth"]
    model = ModelConfig(
        dim=src.dim,
        block_dim=block_dim,
        depth=depth,
        leaky_slope=args.leaky_slope,
        dropout_rate=args.dropout,
    )
    cfg = TrainConfig(
        model=model,
        mode=args.mode,
        lambda_r=args.lambda_r,
        lambda_a=args.lambda_a,
        lambda_c=args.lambda_c,
        batch_size=args.batch_size,
        lr_gen=args.lr_gen,
        lr_disc=args.lr_disc,
        max_steps=args.max_steps,
        eval_every=args.eval_every,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
        sampler=SamplerConfig(
            subsample_threshold=args.subsample_threshold,
            formula=args.subsample_formula,
        ),
    )
    out = Path(args.out)
    _write_manifest(out, cfg, args, "train")
    trainer = Trainer(cfg, src, tgt, src_freq, tgt_freq)
    final = trainer.run(out_dir=out, on_record=_progress_printer())
    print(f"finished {trainer.step_count} steps; final checkpoint: {final}")
    return 0


def _cmd_resume(args) -> int:
    src, tgt, src_freq, tgt_freq = _load_pair(args)
    trainer = Trainer.resume(args.checkpoint, src, tgt, src_freq, tgt_freq)
    if args.max_steps is not None:
        if args.max_steps <= trainer.step_count:
            raise UsageError(
                f"--max-steps {args.max_steps} not beyond checkpoint step "
                f"{trainer.step_count}"
            )
        trainer.cfg = TrainConfig.from_dict(
            {**trainer.cfg.to_dict(), "max_steps": args.max_steps}
        )
    out = Path(args.out)
    _write_manifest(out, trainer.cfg, args, "resume")
    final = trainer.run(out_dir=out, on_record=_progress_printer())
    print(f"finished {trainer.step_count} steps; final checkpoint: {final}")
    return 0


def _cmd_map(args) -> int:
    encoder, _header = encoder_from_checkpoint(args.checkpoint)
    src = load_embeddings(args.src)
    if src.dim != encoder.dim:
        raise UsageError(
            f"dimension mismatch: table d={src.dim}, checkpoint d={encoder.dim}"
        )
    mapped = EmbeddingTable(src.vocab, encoder.map_rows(src.matrix))
    save_embeddings(mapped, args.out)
    print(f"mapped {len(src.vocab)} embeddings -> {args.out}")
    return 0


def _cmd_nn(args) -> int:
    encoder, _header = encoder_from_checkpoint(args.checkpoint)
    src = load_embeddings(args.src)
    tgt = load_embeddings(args.tgt)
    if src.dim != encoder.dim or tgt.dim != encoder.dim:
        raise UsageError("embedding dimension does not match checkpoint")
    words = [w for w in args.words.split(",") if w]
    if not words:
        raise UsageError("no query words given")
    answered = 0
    for word in words:
        if word not in src.vocab:
            print(f"warning: {word!r} not in source vocabulary", file=sys.stderr)
            continue
        mapped = encoder.map_rows(src.row(word)[None, :])[0]
        result = knn(mapped, tgt, min(args.k, len(tgt.vocab)), query=word)
        for rank, (token, sim) in enumerate(result.neighbors, start=1):
            print(f"{word}\t{rank}\t{token}\t{sim:.6f}")
        answered += 1
    return 0 if answered else 1


def _cmd_eval(args) -> int:
    src = load_embeddings(args.src)
    tgt = load_embeddings(args.tgt)
    if args.checkpoint:
        encoder, _ = encoder_from_checkpoint(args.checkpoint)
        if src.dim != encoder.dim:
            raise UsageError("embedding dimension does not match checkpoint")
        weight = None
    else:
        weight = load_matrix(args.encoder_matrix)
        if weight.shape != (src.dim, src.dim):
            raise UsageError(
                f"encoder matrix shape {weight.shape} does not match d={src.dim}"
            )
    mapped_matrix = src.matrix @ weight if weight is not None else None
    if mapped_matrix is None:
        mapped_matrix = encoder.map_rows(src.matrix)
    mapped = EmbeddingTable(src.vocab, mapped_matrix)
    dictionary = BilingualDictionary.load(args.dictionary)
    report = {}
    per_entry = None
    for k in range(1, args.k + 1):
        res = precision_at_k(mapped, tgt, dictionary, k)
        report[f"p@{k}"] = res.precision
        per_entry = res
    payload = {
        "precision": report,
        "resolvable": per_entry.resolvable,
        "unresolvable": per_entry.unresolvable,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        dim=args.dim,
        source_size=args.source_size,
        target_size=args.target_size,
        components=args.components,
        means_scale=args.means_scale,
        cov_scale=args.cov_scale,
        noise_sigma=args.noise,
        zipf_exponent=args.zipf,
        seed=args.seed,
    )
    data = synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(data.src, out / "src.vec")
    save_embeddings(data.tgt, out / "tgt.vec")
    save_frequencies(data.src_freq, out / "src.freq")
    save_frequencies(data.tgt_freq, out / "tgt.freq")
    data.truth.save(out / "truth.dict")
    save_matrix(data.map_matrix, out / "map.txt")
    print(f"wrote synthetic benchmark to {out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "resume": _cmd_resume,
    "map": _cmd_map,
    "nn": _cmd_nn,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (EmbedFormatError, CheckpointError, NumericsError, OSError,
            ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (NonFiniteMetric, NonFiniteGradient) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
