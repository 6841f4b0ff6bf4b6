import io
import subprocess
import sys

import numpy as np
import pytest

from scama.checkpoint import load_checkpoint
from scama.cli import EXIT_BAD_RECORD, EXIT_CONFIG, EXIT_MISMATCH, EXIT_NONFINITE, main, parse_chunk_records
from scama.model import EOS

TINY = """[model]
d_in = 14
vocab_size = 8
d_model = 8
heads = 2
d_ff = 16
n_encoder = 1
n_decoder_att = 1
chunk_size = 3
mem_look_back = 3
dec_mem_order = 3
c_max = 0

[train]
lr = 0.005
warmup_steps = 2
batch_size = 4
max_steps = 6
eval_every = 3
seed = 5

[data]
seed = 9
n_train = 12
n_dev = 4
n_test = 3
min_tokens = 2
max_tokens = 4
d_raw = 2

[decode]
beam = 2
"""


def run(argv, stdin=""):
    out = io.StringIO()
    code = main(argv, out=out, stdin=io.StringIO(stdin))
    return code, out.getvalue()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.ini"
    cfg.write_text(TINY)
    ckpt = d / "tiny.ckpt"
    code, out = run(["train", "--config", str(cfg), "--checkpoint", str(ckpt)])
    assert code == 0, out
    return d, cfg, ckpt


def test_train_writes_metrics_and_checkpoint(trained):
    d, cfg, ckpt = trained
    lines = (d / "tiny.metrics.tsv").read_text().splitlines()
    assert len(lines) == 6
    for i, line in enumerate(lines, 1):
        fields = line.split("\t")
        assert len(fields) == 5 and int(fields[0]) == i
        assert all(np.isfinite(float(f)) for f in fields[1:])
    model, stored = load_checkpoint(ckpt)
    assert stored.model.c_max >= 1 and model.cfg.c_max == stored.model.c_max


def test_same_seed_same_loss_curve(trained, tmp_path):
    d, cfg, _ = trained
    assert run(["train", "--config", str(cfg), "--checkpoint", str(tmp_path / "b.ckpt")])[0] == 0
    assert (tmp_path / "b.metrics.tsv").read_text() == (d / "tiny.metrics.tsv").read_text()


def test_seed_env_changes_curve(trained, tmp_path, monkeypatch):
    d, cfg, _ = trained
    monkeypatch.setenv("SCAMA_SEED", "77")
    assert run(["train", "--config", str(cfg), "--checkpoint", str(tmp_path / "c.ckpt")])[0] == 0
    assert (tmp_path / "c.metrics.tsv").read_text() != (d / "tiny.metrics.tsv").read_text()


def test_eval_modes(trained):
    _, cfg, ckpt = trained
    code, out = run(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--beam", "1"])
    assert code == 0 and "cer=" in out and "pred_acc=" in out and "encoder_latency_ms=90" in out
    code, out = run(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--mode", "offline"])
    assert code == 0 and "pred_acc=n/a" in out


def test_eval_is_reproducible(trained):
    _, cfg, ckpt = trained
    a = run(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)])
    b = run(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)])
    assert a == b


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nd_model = 8\nwat = 1\n")
    assert run(["train", "--config", str(bad)])[0] == EXIT_CONFIG
    assert "wat" in capsys.readouterr().err
    assert run(["train"])[0] == EXIT_CONFIG
    assert run(["train", "--config", str(tmp_path / "missing.ini")])[0] == EXIT_CONFIG
    assert run(["frobnicate"])[0] == EXIT_CONFIG


def test_checkpoint_mismatch_exit_3(trained, tmp_path):
    _, cfg, ckpt = trained
    for old, new in [("d_model = 8", "d_model = 16"), ("vocab_size = 8", "vocab_size = 9"), ("c_max = 0", "c_max = 9")]:
        other = tmp_path / "other.ini"
        other.write_text(TINY.replace(old, new))
        assert run(["eval", "--config", str(other), "--checkpoint", str(ckpt)])[0] == EXIT_MISMATCH
    assert run(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--chunk", "4"])[0] == EXIT_MISMATCH
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert run(["eval", "--config", str(cfg), "--checkpoint", str(junk)])[0] == EXIT_MISMATCH


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_exit_5(tmp_path, capsys):
    cfg = tmp_path / "nan.ini"
    cfg.write_text(TINY.replace("lr = 0.005", "lr = 1e300"))
    code, _ = run(["train", "--config", str(cfg), "--checkpoint", str(tmp_path / "n.ckpt")])
    assert code == EXIT_NONFINITE
    assert "non-finite loss at step" in capsys.readouterr().err


def export(cfg, utt=0, flag_last=True):
    argv = ["export-chunks", "--config", str(cfg), "--utt", str(utt)] + (["--flag-last"] if flag_last else [])
    code, out = run(argv)
    assert code == 0
    return out


def test_stream_output_format_and_prefix(trained):
    _, cfg, ckpt = trained
    for utt in range(3):
        records = export(cfg, utt)
        code, out = run(["stream", "--checkpoint", str(ckpt)], stdin=records)
        assert code == 0
        lines = out.splitlines()
        n_chunks = len(records.splitlines())
        assert [l.split("\t")[0] for l in lines[:-1]] == [str(k) for k in range(n_chunks)]
        emitted = [t for l in lines[:-1] for t in l.split("\t")[1].split()]
        final = lines[-1].split("\t")
        assert final[0] == "final" and emitted == final[1].split()
        assert "encoder_latency_ms=90" in final[2]


def test_stream_file_equals_pipe(trained, tmp_path):
    _, cfg, ckpt = trained
    records = export(cfg, 1)
    path = tmp_path / "chunks.tsv"
    path.write_text(records)
    direct = run(["stream", "--checkpoint", str(ckpt), "--input", str(path)])
    piped = run(["stream", "--checkpoint", str(ckpt), "--input", "-"], stdin=records)
    assert direct == piped
    proc = subprocess.run(
        [sys.executable, "-m", "scama.cli", "stream", "--checkpoint", str(ckpt)],
        input=records, capture_output=True, text=True, check=True,
    )
    assert proc.stdout == direct[1]


def test_stream_matches_eval_decoding(trained):
    from scama.config import load_config
    from scama.data import to_example
    from scama.decode import stream_decode
    from scama.train import load_splits

    _, cfg_path, ckpt = trained
    model, _ = load_checkpoint(ckpt)
    cfg = load_config(cfg_path)
    utt = load_splits(cfg)[2][0]
    frames = to_example(utt, cfg.data.frontend(), 3).frames
    expected = stream_decode(model, frames, beam=2).result.tokens
    _, out = run(["stream", "--checkpoint", str(ckpt)], stdin=export(cfg_path, 0))
    assert out.splitlines()[-1].split("\t")[1].split() == [str(t) for t in expected]


@pytest.mark.parametrize("mutate,line", [
    (lambda recs: recs[:1] + ["x\t3\t1 2"] + recs[1:], 2),
    (lambda recs: [recs[0].replace("0\t3", "1\t3", 1)] + recs[1:], 1),
    (lambda recs: recs[:1] + [recs[1].rsplit(" ", 1)[0]] + recs[2:], 2),
    (lambda recs: recs[:1] + [recs[1] + "\tfinal"] + recs[2:], 2),
    (lambda recs: [recs[0].replace("\t", "\t9\t", 1)] + recs[1:], 1),
])
def test_stream_malformed_record_exit_4(trained, capsys, mutate, line):
    _, cfg, ckpt = trained
    recs = export(cfg, 0, flag_last=False).splitlines()
    code, out = run(["stream", "--checkpoint", str(ckpt)], stdin="\n".join(mutate(recs)) + "\n")
    assert code == EXIT_BAD_RECORD
    assert f"line {line}" in capsys.readouterr().err
    assert len(out.splitlines()) == line - 1


def test_parse_chunk_records_rules():
    good = ["0\t2\t1 2 3 4", "", "1\t1\t5 6\tlast"]
    parsed = list(parse_chunk_records(good, 2, 2))
    assert [p[0] for p in parsed] == [0, 1] and parsed[1][2] is True
    with pytest.raises(Exception):
        list(parse_chunk_records(["0\t1\t1 2", "1\t1\t1 2"], 2, 2))
    with pytest.raises(Exception):
        list(parse_chunk_records(["0\t1\tnan 2"], 2, 2))


def test_dump_attention_csv(trained, tmp_path):
    _, cfg, ckpt = trained
    path = tmp_path / "att.csv"
    code, _ = run(["dump-attention", "--config", str(cfg), "--checkpoint", str(ckpt), "--output", str(path)])
    assert code == 0
    rows = path.read_text().splitlines()
    header = rows[0].split(",")
    assert header[:5] == ["step", "layer", "head", "token", "visible"]
    steps = set()
    for row in rows[1:]:
        f = row.split(",")
        w = np.array([float(v) for v in f[5:]])
        assert abs(w.sum() - 1) < 1e-6
        assert np.all(w[int(f[4]):] == 0)
        steps.add(int(f[0]))
    assert int(rows[-1].split(",")[3]) == EOS
    assert run(["dump-attention", "--config", str(cfg), "--checkpoint", str(ckpt), "--utt", "99"])[0] == EXIT_CONFIG


def test_generate_and_read_back(trained, tmp_path):
    _, cfg, _ = trained
    code, out = run(["generate", "--config", str(cfg), "--output", str(tmp_path / "ds")])
    assert code == 0 and (tmp_path / "ds" / "train.tsv").exists()
    text = cfg.read_text().replace("[data]\n", f"[data]\npath = {tmp_path / 'ds'}\n")
    alt = tmp_path / "from_files.ini"
    alt.write_text(text)
    code, a = run(["export-chunks", "--config", str(alt)])
    _, b = run(["export-chunks", "--config", str(cfg)])
    assert code == 0 and len(a.splitlines()) == len(b.splitlines())


def test_show_config_round_trips(trained, tmp_path):
    _, cfg, _ = trained
    code, out = run(["show-config", "--config", str(cfg)])
    again = tmp_path / "again.ini"
    again.write_text(out)
    assert run(["show-config", "--config", str(again)])[1] == out


def test_checkpoint_round_trip_reproduces_eval_exactly(tmp_path):
    from scama.checkpoint import save_checkpoint
    from scama.config import parse_config
    from scama.train import evaluate, load_splits, train

    cfg = parse_config(TINY)
    result = train(cfg)
    path = tmp_path / "rt.ckpt"
    save_checkpoint(path, result.model, cfg, result.best_step)
    loaded, stored = load_checkpoint(path)
    dev = load_splits(stored)[1]
    before = evaluate(result.model.astype(np.float64), dev, cfg, beam=2)
    after = evaluate(loaded, dev, stored, beam=2)
    assert before.hyps == after.hyps and before.cer == after.cer and before.predicted == after.predicted
