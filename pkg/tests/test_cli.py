import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linear_moe import cli
from linear_moe.bench import BenchConfig, read_table, run_bench, write_table
from linear_moe.config import BYTE_VOCAB, OUT_ENV, RunConfig, load_config, resolve_out
from linear_moe.errors import ConfigError, NonFiniteError
from linear_moe.metrics import MetricsRecord, MetricsWriter, read_curve, read_metrics, write_curve
from linear_moe.model import load_checkpoint
from linear_moe.mqar import MqarDataset
from linear_moe.train import TrainingDiverged, memory_elements, train
from linear_moe.verify import SUITES, run_verify

TINY = dict(hidden=8, ffn_dim=8, num_heads=2, num_experts=4, num_active=2, chunk_size=4,
            mqar_pairs=2, mqar_queries=2, mqar_vocab=16, batch_size=4, train_samples=64, eval_samples=16,
            log_interval=5)


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "out"))
    return tmp_path / "out"


def write_ini(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------- config
def test_config_parses_and_coerces(tmp_path):
    path = write_ini(tmp_path / "c.ini", "[train]\nlsm = gla\npattern = LN\nsteps = 7\nlr = 0.5\ntoken_shift = no\n"
                                         "[bench]\nlengths = 8, 16\ntoken_budget = 32\n")
    cfg = load_config(path, "train")
    assert (cfg.lsm, cfg.pattern, cfg.steps, cfg.lr, cfg.token_shift) == ("gla", "LN", 7, 0.5, False)
    assert load_config(path, "bench").lengths == (8, 16)


def test_config_unknown_key_is_an_error(tmp_path):
    with pytest.raises(ConfigError, match="stepz"):
        load_config(write_ini(tmp_path / "c.ini", "[train]\nstepz = 3\n"), "train")
    with pytest.raises(ConfigError, match="section"):
        load_config(write_ini(tmp_path / "d.ini", "[trian]\nsteps = 3\n"), "train")
    with pytest.raises(ConfigError):
        load_config(write_ini(tmp_path / "e.ini", "[train]\nsteps = many\n"), "train")


def test_config_model_mapping():
    cfg = RunConfig(pattern="LLN", lsm="mamba2", **TINY)
    m = cfg.model_config()
    assert (m.num_layers, m.pattern, m.lsm, m.vocab_size) == (3, "LLN", "mamba2", 16)
    p = RunConfig(preset="A0.3B-toy", pattern="LLLN").model_config()
    assert (p.hidden, p.num_layers, p.pattern) == (128, 4, "LLLN")
    assert RunConfig(task="text", text_path="x").vocab_size == BYTE_VOCAB == 258


def test_output_root_from_environment(out_root):
    assert resolve_out("run1") == out_root / "run1"
    assert resolve_out("/abs/dir").as_posix() == "/abs/dir"


# ---------------------------------------------------------------- metrics
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(step=st.integers(0, 10**9), loss=finite, aux=finite, tps=finite, mem=st.integers(0, 10**12),
       comm=st.integers(0, 10**15))
def test_metrics_round_trip(step, loss, aux, tps, mem, comm):
    rec = MetricsRecord(step, loss, aux, tps, mem, comm)
    assert MetricsRecord.from_json(rec.to_json()) == rec


def test_metrics_reject_non_finite_and_non_monotone(tmp_path):
    with pytest.raises(NonFiniteError):
        MetricsRecord(1, math.nan, 0.0, 1.0, 1, 0)
    w = MetricsWriter(tmp_path / "m.jsonl")
    w.write(MetricsRecord(1, 1.0, 0.0, 1.0, 1, 0))
    with pytest.raises(ValueError):
        w.write(MetricsRecord(1, 1.0, 0.0, 1.0, 1, 0))
    assert read_metrics(w.path) == w.records


def test_curve_round_trip(tmp_path):
    xs, ys = [1, 2, 3], [0.1, 1 / 3, np.float64(2.5)]
    assert read_curve(write_curve(tmp_path / "c.txt", xs, ys, ("step", "loss"))) == ([1.0, 2.0, 3.0], [0.1, 1 / 3, 2.5])
    assert (tmp_path / "c.txt").read_text().startswith("# step loss\n")


# ---------------------------------------------------------------- verify
def test_verify_all_suites_pass():
    report = run_verify()
    assert report.passed, [c for c in report.failures()][:5]
    assert [s.name for s in report.suites] == list(SUITES)
    data = json.loads(report.to_json())
    assert data["passed"] and all(s["checks"] for s in data["suites"])


def test_verify_catches_injected_fault():
    report = run_verify(["chunked"], fault="chunk_decay")
    assert not report.passed and report.failures()
    assert run_verify(["chunked"]).passed  # fault switched off again


def test_verify_only_filter_and_unknown_suite():
    assert [s.name for s in run_verify(["moe"]).suites] == ["moe"]
    with pytest.raises(ValueError):
        run_verify(["nope"])


def test_cli_verify_exit_codes(out_root, capsys):
    assert cli.main(["verify", "--only", "sp"]) == 0
    out = capsys.readouterr().out
    assert "PASS sp" in out and "chunked" not in out
    report = json.loads((out_root / "verify_report.json").read_text())
    assert [s["name"] for s in report["suites"]] == ["sp"]
    assert cli.main(["verify", "--only", "chunked", "--inject-fault", "chunk_decay"]) != 0
    assert "FAIL chunked" in capsys.readouterr().out


# ---------------------------------------------------------------- train
def test_train_is_deterministic_and_writes_files(tmp_path):
    cfg = RunConfig(pattern="LN", steps=12, **TINY)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert a.losses == b.losses
    assert [r.step for r in a.records] == [5, 10, 12]
    assert read_metrics(a.files["metrics"]) == a.records
    steps, losses = read_curve(a.files["curve"])
    assert losses == a.losses and steps == list(map(float, range(1, 13)))
    model, step = load_checkpoint(a.files["checkpoint"])
    assert step == 12 and model.config == cfg.model_config()
    summary = json.loads(a.files["summary"].read_text())
    assert 0.0 <= summary["accuracy"] <= 1.0


def test_train_loss_decreases():
    r = train(RunConfig(pattern="LL", steps=60, lr=1e-2, **TINY), write_files=False)
    assert np.mean(r.losses[-10:]) < np.mean(r.losses[:10])


def test_train_with_sequence_parallel_matches_single_rank():
    # the MoE balance loss is per rank under SP, so exact agreement needs it switched off
    single = train(RunConfig(pattern="LN", steps=4, aux_loss_weight=0.0, **TINY), write_files=False)
    split = train(RunConfig(pattern="LN", steps=4, sp=2, aux_loss_weight=0.0, **TINY), write_files=False)
    np.testing.assert_allclose(split.losses, single.losses, rtol=1e-9)
    with_aux = train(RunConfig(pattern="LN", steps=1, sp=2, **TINY), write_files=False)
    assert abs(with_aux.losses[0] - single.losses[0]) < 1e-12
    assert all(r.comm_bytes > 0 for r in split.records)
    assert all(r.comm_bytes == 0 for r in single.records)


def test_train_on_text(tmp_path):
    text = tmp_path / "corpus.txt"
    text.write_text("the quick brown fox jumps over the lazy dog. " * 20)
    r = train(RunConfig(task="text", text_path=str(text), pattern="LL", steps=3, seq_len=16,
                        **{k: v for k, v in TINY.items() if not k.startswith("mqar")}), write_files=False)
    assert r.model.config.vocab_size == 258
    assert "eval_loss" in r.evaluation


def test_non_finite_loss_aborts_with_diagnostics():
    cfg = RunConfig(pattern="LL", steps=5, lr=1e6, grad_clip=1e12, warmup=0, **TINY)
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, write_files=False)
    err = info.value
    assert err.step >= 1
    assert "step" in str(err) and err.layer is not None and err.instance == "bla"


def test_cli_train_reports_divergence(tmp_path, capsys):
    path = write_ini(tmp_path / "t.ini", "[train]\npattern = LL\nsteps = 5\nlr = 1e6\ngrad_clip = 1e12\nwarmup = 0\n"
                                         "hidden = 8\nffn_dim = 8\nmqar_pairs = 2\nmqar_queries = 2\nmqar_vocab = 16\n"
                                         "batch_size = 4\ntrain_samples = 32\neval_samples = 8\n")
    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_DIVERGED
    assert "step" in capsys.readouterr().err


def test_memory_elements():
    cfg = RunConfig(pattern="LN", **TINY).model_config()
    d = cfg.head_dim
    state = cfg.num_heads * d * (d + 1)  # bla keeps a normalizer column
    assert memory_elements(cfg, 10) == state + 2 * 10 * cfg.hidden
    assert memory_elements(cfg, 20) - memory_elements(cfg, 10) == 2 * 10 * cfg.hidden


def test_cli_train(tmp_path, out_root, capsys):
    path = write_ini(tmp_path / "t.ini", "[train]\npattern = LN\nsteps = 3\nhidden = 8\nffn_dim = 8\nmqar_pairs = 2\n"
                                         "mqar_queries = 2\nmqar_vocab = 16\nbatch_size = 4\ntrain_samples = 32\n"
                                         "eval_samples = 8\nout_dir = run\n")
    assert cli.main(["train", "--config", str(path)]) == 0
    assert (out_root / "run" / "metrics.jsonl").is_file()
    assert (out_root / "run" / "checkpoint.npz").is_file()
    assert cli.main(["train", "--config", str(write_ini(tmp_path / "bad.ini", "[train]\nbogus = 1\n"))]) == cli.EXIT_USAGE


# ---------------------------------------------------------------- bench
def test_bench_memory_and_table(tmp_path):
    cfg = BenchConfig(lengths=(16, 32, 64), token_budget=128, hidden=8, num_heads=2, chunk_size=8, repeats=1)
    rows = run_bench(cfg)
    lsm = [r for r in rows if r.mixer == "bla"]
    attn = [r for r in rows if r.mixer == "attention"]
    assert len({r.memory_elements for r in lsm}) == 1
    assert [r.memory_elements for r in attn] == [2 * n * 8 for n in (16, 32, 64)]
    assert all(r.batch * r.length == 128 for r in rows)
    assert read_table(write_table(tmp_path / "t.tsv", rows)) == rows


def test_bench_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig(lengths=(256, 4096), token_budget=1024)


def test_cli_bench(tmp_path, out_root, capsys):
    path = write_ini(tmp_path / "b.ini", "[bench]\nlengths = 8 16\ntoken_budget = 32\nhidden = 8\nchunk_size = 4\n"
                                         "repeats = 1\nout_dir = b\n")
    assert cli.main(["bench", "--config", str(path)]) == 0
    assert "growth" in capsys.readouterr().out
    assert len(read_table(out_root / "b" / "scaling.tsv")) == 4
    assert read_curve(out_root / "b" / "memory_attention.txt")[1] == [2 * 8 * 8.0, 2 * 16 * 8.0]


# ---------------------------------------------------------------- gen-mqar
def test_cli_gen_mqar(out_root, capsys):
    assert cli.main(["gen-mqar", "--seed", "3", "--pairs", "4", "--queries", "2", "--out", "mq.jsonl",
                     "--vocab", "16", "--samples", "5"]) == 0
    info = json.loads(capsys.readouterr().out)
    data = MqarDataset.load(out_root / "mq.jsonl")
    assert info["samples"] == data.num_samples == 5 and data.seq_len == 12
    assert cli.main(["gen-mqar", "--seed", "3", "--pairs", "9", "--queries", "2", "--out", "x", "--vocab", "16"]) == cli.EXIT_USAGE
