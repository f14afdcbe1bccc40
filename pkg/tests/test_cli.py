import json

import pytest

from helpers import SCALING_GRID, SCALING_TRUTH, scaling_Ds

from dlcm.cli import COMMANDS, main
from dlcm.scaling import generate_points

TINY_INI = """
[model]
d_token = 16
d_concept = 32
n_enc = 1
n_backbone = 1
n_dec = 1
heads_token = 2
heads_concept = 2
d_base = 16

[train]
seq_len = 32
micro_batch = 2
total_tokens = 384
warmup_steps = 1

[data]
corpus = "template"
tokens = 6000
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


def test_every_command_has_help(capsys):
    for name in COMMANDS:
        assert main([name, "--help"]) == 0
    assert main([]) == 2
    assert main(["nonsense"]) == 2


def test_unknown_flag_exits_2(tmp_path, capsys):
    assert main(["flops", "--bogus", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidth_of_everything = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_plan_mup_schema_and_manifest(tmp_path, capsys):
    out = tmp_path / "plan"
    assert main(["plan-mup", "--d-base", "256", "--widths", "1536,3072", "--out", str(out)]) == 0
    plan = json.loads((out / "mup_plan.json").read_text())
    assert plan["s_token"] == 6 and plan["s_concept"] == 12
    assert {g["group"] for g in plan["groups"]} >= {"token_hidden", "concept_hidden", "others"}
    man = json.loads((out / "manifest.json").read_text())
    assert set(man) >= {"command", "config", "seed", "input_hash", "out"}
    assert man["command"] == "plan-mup"
    assert main(["plan-mup", "--widths", "abc", "--out", str(out)]) == 2


def test_flops_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["flops", "--target-r", "4", "--out", str(a)]) == 0
    assert main(["flops", "--target-r", "4", "--out", str(b)]) == 0
    assert (a / "flops.json").read_bytes() == (b / "flops.json").read_bytes()
    rep = json.loads((a / "flops.json").read_text())
    assert 0.9 < rep["ratio_dlcm_over_baseline"] < 1.1


def test_fit_scaling_writes_r2_and_optimal_config(tmp_path):
    pts = generate_points(SCALING_TRUTH, Ds=scaling_Ds(), **SCALING_GRID)
    runs = tmp_path / "runs.jsonl"
    runs.write_text("\n".join(json.dumps({"N": p.N, "D": p.D, "R": p.R, "P": p.P, "loss": p.loss}) for p in pts))
    out = tmp_path / "fit"
    assert main(["fit-scaling", "--in", str(runs), "--out", str(out)]) == 0
    fit = json.loads((out / "fit.json").read_text())
    assert fit["r2"] > 0.999 and "delta1" in fit
    assert "\t" in (out / "predictions.tsv").read_text()
    oc = tmp_path / "oc"
    assert main(["optimal-config", "--in", str(out / "fit.json"), "--out", str(oc)]) == 0
    assert "reference operating point" in (oc / "optimal_config.tsv").read_text()


def test_fit_scaling_rank_deficient_exits_3(tmp_path):
    pts = generate_points(SCALING_TRUTH, (1e8,), (2, 4), (0.3, 0.5), scaling_Ds())
    runs = tmp_path / "runs.jsonl"
    runs.write_text("\n".join(json.dumps({"N": p.N, "D": p.D, "R": p.R, "P": p.P, "loss": p.loss}) for p in pts))
    assert main(["fit-scaling", "--in", str(runs), "--out", str(tmp_path / "o")]) == 3


def test_missing_inputs_exit_2(tmp_path):
    for cmd in ("fit-scaling", "fit-decay", "optimal-config", "segment", "report-loss-positions"):
        assert main([cmd, "--out", str(tmp_path / cmd)]) == 2


def test_fit_decay_csv(tmp_path):
    rows = ["L_stable,R,N,delta"]
    for i in range(8):
        L, R, N = 2 + 0.2 * i, (2, 4, 8)[i % 3], 10 ** (7 + i / 3)
        rows.append(f"{L},{R},{N},{0.05 * L**0.5 * R**-0.1 * N**0.08}")
    (tmp_path / "d.csv").write_text("\n".join(rows))
    out = tmp_path / "o"
    assert main(["fit-decay", "--in", str(tmp_path / "d.csv"), "--out", str(out)]) == 0
    assert json.loads((out / "decay_fit.json").read_text())["r2"] == pytest.approx(1.0)


def test_train_then_segment(tmp_path, ini, capsys):
    out = tmp_path / "train"
    assert main(["train", "--config", str(ini), "--seed", "1", "--out", str(out)]) == 0
    log = [json.loads(x) for x in (out / "log.jsonl").read_text().splitlines()]
    assert len(log) == 6
    again = tmp_path / "train2"
    assert main(["train", "--config", str(ini), "--seed", "1", "--out", str(again)]) == 0
    assert (out / "summary.json").read_bytes() == (again / "summary.json").read_bytes()
    assert (out / "final" / "tensors.bin").read_bytes() == (again / "final" / "tensors.bin").read_bytes()

    doc = tmp_path / "doc.txt"
    doc.write_text("So I've been thinking about the weather lately.")
    seg = tmp_path / "seg"
    capsys.readouterr()
    assert main(["segment", "--model", str(out / "final"), "--in", str(doc), "--target-r", "4",
                 "--out", str(seg)]) == 0
    printed = capsys.readouterr().out
    assert " | " in printed and "tokens/concept" in printed
    assert (seg / "segment_report.tsv").exists()


def test_bad_checkpoint_exits_2(tmp_path):
    doc = tmp_path / "d.txt"
    doc.write_text("x")
    assert main(["segment", "--model", str(tmp_path / "nope"), "--in", str(doc), "--out", str(tmp_path / "o")]) == 2
