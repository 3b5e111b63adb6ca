import csv
import functools

import numpy as np
import torch

import eend_m2f.cli as cli
from eend_m2f.checkpoint import save_checkpoint
from eend_m2f.diar_core import read_rttm, write_features
from eend_m2f.gradcheck import run_gradcheck
from eend_m2f.model import EENDM2F, ModelConfig
from eend_m2f.simulate import read_manifest

TINY = ModelConfig(d_model=16, n_heads=2, conformer_layers=1, conformer_ff=32, decoder_layers=1, decoder_ff=32,
                   n_queries=4)

REF = """SPEAKER rec1 1 0.00 1.00 <NA> <NA> A <NA> <NA>
SPEAKER rec1 1 1.00 1.00 <NA> <NA> B <NA> <NA>
SPEAKER rec2 1 0.00 0.50 <NA> <NA> A <NA> <NA>
"""
# rec1: B's second half attributed to A's label (0.5 s speaker error); rec2 perfect
SYS = """SPEAKER rec1 1 0.00 1.50 <NA> <NA> x <NA> <NA>
SPEAKER rec1 1 1.50 0.50 <NA> <NA> y <NA> <NA>
SPEAKER rec2 1 0.00 0.50 <NA> <NA> z <NA> <NA>
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_score_table_and_csv(tmp_path, capsys):
    ref = _write(tmp_path, "ref.rttm", REF)
    sys_ = _write(tmp_path, "sys.rttm", SYS)
    out_csv = tmp_path / "der.csv"
    assert cli.main(["score", "--ref", str(ref), "--sys", str(sys_), "--collar", "0", "--csv", str(out_csv)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["recording", "MS", "FA", "SE", "DER"]
    # optimal map x->A, y->B: frames 100..149 are B scored as A
    assert lines[1].split() == ["rec1", "0.00", "0.00", "25.00", "25.00"]
    assert lines[2].split() == ["rec2", "0.00", "0.00", "0.00", "0.00"]
    assert lines[3].split() == ["CORPUS", "0.00", "0.00", "20.00", "20.00"]
    # columns line up
    assert len({len(line) for line in lines}) == 1
    rows = list(csv.reader(out_csv.open()))
    assert rows[0] == ["recording", "ms", "fa", "se", "der"]
    assert rows[-1] == ["CORPUS", "0.00", "0.00", "20.00", "20.00"]


def test_score_collar_removes_boundary_error(tmp_path, capsys):
    ref = _write(tmp_path, "ref.rttm", "SPEAKER r 1 1.00 2.00 <NA> <NA> A <NA> <NA>\n")
    # system onset 0.1 s late: the error sits inside the 0.25 s collar
    sys_ = _write(tmp_path, "sys.rttm", "SPEAKER r 1 1.10 1.90 <NA> <NA> x <NA> <NA>\n")
    cli.main(["score", "--ref", str(ref), "--sys", str(sys_)])
    assert capsys.readouterr().out.splitlines()[1].split()[-1] == "0.00"
    cli.main(["score", "--ref", str(ref), "--sys", str(sys_), "--collar", "0"])
    assert capsys.readouterr().out.splitlines()[1].split()[-1] == "5.00"


def test_score_system_only_recording(tmp_path, capsys):
    ref = _write(tmp_path, "ref.rttm", "")
    sys_ = _write(tmp_path, "sys.rttm", "SPEAKER r 1 0.00 1.00 <NA> <NA> x <NA> <NA>\n")
    assert cli.main(["score", "--ref", str(ref), "--sys", str(sys_), "--collar", "0"]) == 0
    row = capsys.readouterr().out.splitlines()[1]
    assert "no reference speech" in row and row.split()[2] == "100.00"


def test_score_bad_rttm_reports_error(tmp_path, capsys):
    ref = _write(tmp_path, "ref.rttm", "SPEAKER r 1 x 1 <NA> <NA> A <NA> <NA>\n")
    assert cli.main(["score", "--ref", str(ref), "--sys", str(ref)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_simulate_command(tmp_path):
    cfg = _write(tmp_path, "sim.cfg", "recording_len = 2.0\nmax_speakers = 2\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "data"), "--count", "3", "--seed",
                     "5"]) == 0
    entries = read_manifest(tmp_path / "data" / "manifest.txt")
    assert len(entries) == 3 and all(e.n_frames == 200 for e in entries)


def test_unknown_config_key_fails(tmp_path, capsys):
    cfg = _write(tmp_path, "sim.cfg", "recording_length = 2.0\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "d"), "--count", "1"]) == 2
    assert "recording_length" in capsys.readouterr().err


def _checkpoint(tmp_path, bias=None):
    torch.manual_seed(0)
    model = EENDM2F(TINY)
    if bias is not None:
        with torch.no_grad():
            model.class_head.bias.fill_(bias)
    path = tmp_path / "model.em2f"
    save_checkpoint(path, model.state_dict(), TINY)
    return path


def test_infer_feature_file(tmp_path):
    ckpt = _checkpoint(tmp_path, bias=10.0)
    feats = tmp_path / "rec7.feat"
    write_features(feats, np.random.default_rng(0).normal(size=(150, 23)).astype(np.float32))
    out = tmp_path / "out.rttm"
    assert cli.main(["infer", "--checkpoint", str(ckpt), "--features", str(feats), "--out", str(out)]) == 0
    segs = read_rttm(out)
    assert set(segs.recording_ids()) <= {"rec7"}
    assert len({s.speaker_id for s in segs}) <= TINY.n_queries


def test_infer_manifest_then_score(tmp_path, capsys):
    data = tmp_path / "data"
    cli.main(["simulate", "--out", str(data), "--count", "2", "--seed", "1"])
    ckpt = _checkpoint(tmp_path, bias=-10.0)
    out = tmp_path / "hyp.rttm"
    assert cli.main(["infer", "--checkpoint", str(ckpt), "--features", str(data / "manifest.txt"), "--out",
                     str(out), "--theta", "0.5"]) == 0
    # every query rejected: empty hypothesis
    assert out.read_text() == ""
    ref = tmp_path / "ref.rttm"
    ref.write_text("".join(p.read_text() for p in sorted(data.glob("*.rttm"))))
    cli.main(["score", "--ref", str(ref), "--sys", str(out), "--collar", "0"])
    corpus = capsys.readouterr().out.splitlines()[-1].split()
    assert corpus == ["CORPUS", "100.00", "0.00", "0.00", "100.00"]


def test_train_command(tmp_path, capsys):
    data = tmp_path / "data"
    cli.main(["simulate", "--out", str(data), "--count", "3", "--seed", "2"])
    cfg = _write(
        tmp_path,
        "train.cfg",
        "batch_size = 2\nutterance_len = 2.0\nsteps = 2\neval_every = 1\nkeep_best_k = 2\n"
        "d_model = 16\nn_heads = 2\nconformer_layers = 1\nconformer_ff = 32\ndecoder_layers = 1\n"
        "decoder_ff = 32\nn_queries = 4\n",
    )
    manifest = str(data / "manifest.txt")
    assert cli.main(["train", "--config", str(cfg), "--train", manifest, "--val", manifest, "--out",
                     str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "averaged.em2f").exists()
    assert "validation DER" in capsys.readouterr().out


def test_gradcheck_command_passes(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_gradcheck", functools.partial(run_gradcheck, n_frames=12))
    assert cli.main(["gradcheck", "--seed", "0"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_detects_corrupted_gradient(monkeypatch, capsys):
    def corrupt(name, grad):
        return grad * 1.1 if name.startswith("decoder.") else grad

    monkeypatch.setattr(cli, "run_gradcheck", functools.partial(run_gradcheck, n_frames=12, corrupt=corrupt))
    assert cli.main(["gradcheck"]) != 0
    out = capsys.readouterr().out
    assert "FAIL" in out and "decoder" in out
