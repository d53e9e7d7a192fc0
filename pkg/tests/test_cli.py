import json

import numpy as np
import pytest

from xlingmap.cli import main
from xlingmap.embed_io import load_embeddings, load_matrix, save_embeddings
from xlingmap.training import read_checkpoint

from conftest import random_table


def write_tables(tmp_path, n=30, d=6):
    src = random_table(n, d, seed=1, prefix="s")
    tgt = random_table(n, d, seed=2, prefix="t")
    sp = tmp_path / "src.vec"
    tp = tmp_path / "tgt.vec"
    save_embeddings(src, sp)
    save_embeddings(tgt, tp)
    return sp, tp, src, tgt


def train_args(sp, tp, out, **extra):
    args = [
        "train", "--src", str(sp), "--tgt", str(tp), "--out", str(out),
        "--mode", "aae", "--k", "4", "--T", "2", "--n", "8",
        "--max-steps", "5", "--eval-every", "5", "--checkpoint-every", "5",
        "--seed", "7",
    ]
    for k, v in extra.items():
        args += [f"--{k.replace('_', '-')}", str(v)]
    return args


def test_missing_required_flag_exits_1(capsys):
    assert main(["train", "--tgt", "x.vec", "--out", "o"]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_command_exits_1():
    assert main(["frobnicate"]) == 1


def test_train_writes_artifacts(tmp_path, capsys):
    sp, tp, _, _ = write_tables(tmp_path)
    out = tmp_path / "run"
    assert main(train_args(sp, tp, out)) == 0
    assert (out / "manifest.json").exists()
    assert (out / "checkpoint_final.xlaae").exists()
    records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert len([r for r in records if r["type"] == "step"]) == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert "sha256" in manifest["inputs"]["src"]


def test_train_twice_same_seed_identical_checkpoints(tmp_path):
    sp, tp, _, _ = write_tables(tmp_path)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(train_args(sp, tp, out1)) == 0
    assert main(train_args(sp, tp, out2)) == 0
    a = (out1 / "checkpoint_final.xlaae").read_bytes()
    b = (out2 / "checkpoint_final.xlaae").read_bytes()
    assert a == b


def test_train_dim_mismatch_exits_1(tmp_path, capsys):
    sp, _, _, _ = write_tables(tmp_path)
    other = random_table(10, 4, seed=3, prefix="t")
    tp = tmp_path / "bad.vec"
    save_embeddings(other, tp)
    assert main(train_args(sp, tp, tmp_path / "out")) == 1
    assert "dimension mismatch" in capsys.readouterr().err


def test_resume_continues(tmp_path):
    sp, tp, _, _ = write_tables(tmp_path)
    out1 = tmp_path / "r1"
    assert main(train_args(sp, tp, out1)) == 0
    out2 = tmp_path / "r2"
    rc = main([
        "resume", "--checkpoint", str(out1 / "checkpoint_final.xlaae"),
        "--src", str(sp), "--tgt", str(tp), "--out", str(out2),
        "--max-steps", "10",
    ])
    assert rc == 0
    header, _ = read_checkpoint(out2 / "checkpoint_final.xlaae")
    assert header["step"] == 10

    # the resumed half matches an uninterrupted 10-step run
    out3 = tmp_path / "r3"
    assert main(train_args(sp, tp, out3, max_steps=10)) == 0
    resumed = (out2 / "checkpoint_final.xlaae").read_bytes()
    straight = (out3 / "checkpoint_final.xlaae").read_bytes()
    assert resumed == straight


def test_map_identity_checkpoint_round_trips(tmp_path):
    sp, tp, src, _ = write_tables(tmp_path)
    out = tmp_path / "run"
    assert main(train_args(sp, tp, out, max_steps=1)) == 0

    # force the encoder weight to the identity, then map
    from xlingmap.training import Trainer, encoder_from_checkpoint

    ckpt = out / "checkpoint_final.xlaae"
    tgt_table = load_embeddings(tp)
    tr = Trainer.resume(ckpt, src, tgt_table)
    tr.encoder.weight.value[...] = np.eye(6)
    ident = tmp_path / "ident.xlaae"
    tr.save_checkpoint(ident)

    mapped_path = tmp_path / "mapped.vec"
    assert main(["map", "--checkpoint", str(ident), "--src", str(sp),
                 "--out", str(mapped_path)]) == 0
    mapped = load_embeddings(mapped_path)
    assert mapped.vocab == src.vocab
    assert np.max(np.abs(mapped.matrix - src.matrix)) < 1e-15


def test_nn_output_format_and_unknown_word(tmp_path, capsys):
    sp, tp, src, tgt = write_tables(tmp_path)
    out = tmp_path / "run"
    assert main(train_args(sp, tp, out, max_steps=1)) == 0
    ckpt = out / "checkpoint_final.xlaae"
    rc = main(["nn", "--checkpoint", str(ckpt), "--src", str(sp),
               "--tgt", str(tp), "--words", "s0,notaword,s1", "--k", "3"])
    captured = capsys.readouterr()
    assert rc == 0
    assert "notaword" in captured.err
    lines = [l for l in captured.out.splitlines() if "\t" in l]
    assert len(lines) == 6  # two answered words x k=3
    word, rank, token, sim = lines[0].split("\t")
    assert word == "s0" and rank == "1"
    assert token in tgt.vocab
    float(sim)


def test_nn_all_unknown_exits_1(tmp_path, capsys):
    sp, tp, _, _ = write_tables(tmp_path)
    out = tmp_path / "run"
    assert main(train_args(sp, tp, out, max_steps=1)) == 0
    rc = main(["nn", "--checkpoint", str(out / "checkpoint_final.xlaae"),
               "--src", str(sp), "--tgt", str(tp), "--words", "zzz"])
    assert rc == 1


def test_synth_eval_oracle_pipeline(tmp_path, capsys):
    synth_dir = tmp_path / "synth"
    rc = main(["synth", "--out", str(synth_dir), "--dim", "6",
               "--source-size", "40", "--target-size", "40",
               "--noise", "0", "--seed", "9"])
    assert rc == 0
    for name in ("src.vec", "tgt.vec", "src.freq", "tgt.freq", "truth.dict", "map.txt"):
        assert (synth_dir / name).exists()
    capsys.readouterr()

    rc = main(["eval", "--encoder-matrix", str(synth_dir / "map.txt"),
               "--src", str(synth_dir / "src.vec"),
               "--tgt", str(synth_dir / "tgt.vec"),
               "--dict", str(synth_dir / "truth.dict"), "--k", "3"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["precision"]["p@1"] == 1.0
    assert report["resolvable"] == 40


def test_synth_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        assert main(["synth", "--out", str(d), "--dim", "4",
                     "--source-size", "10", "--target-size", "10",
                     "--seed", "3"]) == 0
    for name in ("src.vec", "tgt.vec", "src.freq", "tgt.freq", "truth.dict", "map.txt"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_eval_unresolvable_dictionary_exits_1(tmp_path, capsys):
    sp, tp, _, _ = write_tables(tmp_path)
    out = tmp_path / "run"
    assert main(train_args(sp, tp, out, max_steps=1)) == 0
    dict_path = tmp_path / "bad.dict"
    dict_path.write_text("nosuch\tword\n", encoding="utf-8")
    rc = main(["eval", "--checkpoint", str(out / "checkpoint_final.xlaae"),
               "--src", str(sp), "--tgt", str(tp),
               "--dict", str(dict_path), "--k", "2"])
    assert rc == 1


def test_map_then_nn_consistency(tmp_path, capsys):
    sp, tp, src, _ = write_tables(tmp_path)
    out = tmp_path / "run"
    assert main(train_args(sp, tp, out, max_steps=3)) == 0
    ckpt = out / "checkpoint_final.xlaae"

    mapped_path = tmp_path / "mapped.vec"
    assert main(["map", "--checkpoint", str(ckpt), "--src", str(sp),
                 "--out", str(mapped_path)]) == 0
    capsys.readouterr()
    assert main(["nn", "--checkpoint", str(ckpt), "--src", str(sp),
                 "--tgt", str(tp), "--words", "s3", "--k", "1"]) == 0
    line = [l for l in capsys.readouterr().out.splitlines() if "\t" in l][0]
    _, _, nn_token, nn_sim = line.split("\t")

    # querying the mapped table directly against tgt agrees with cmd_nn
    from xlingmap.evaluation import knn

    mapped = load_embeddings(mapped_path)
    tgt_table = load_embeddings(tp)
    res = knn(mapped.row("s3"), tgt_table, 1, query="s3")
    assert res.neighbors[0][0] == nn_token
    assert abs(res.neighbors[0][1] - float(nn_sim)) < 1e-6


def test_preset_flag(tmp_path):
    src = random_table(20, 40, seed=4, prefix="s")
    tgt = random_table(20, 40, seed=5, prefix="t")
    sp, tp = tmp_path / "s.vec", tmp_path / "t.vec"
    save_embeddings(src, sp)
    save_embeddings(tgt, tp)
    out = tmp_path / "run"
    rc = main(["train", "--src", str(sp), "--tgt", str(tp), "--out", str(out),
               "--preset", "de-en", "--n", "8", "--max-steps", "1",
               "--eval-every", "5", "--checkpoint-every", "5"])
    assert rc == 0
    header, _ = read_checkpoint(out / "checkpoint_final.xlaae")
    assert header["config"]["model"]["depth"] == 4
    assert header["config"]["model"]["block_dim"] == 40
