import json
from dataclasses import replace

import numpy as np
import pytest

from itkd import harness
from itkd.autodiff import load_parameters, parameter_hash
from itkd.cli import main
from itkd.config import (
    DataConfig,
    OptimConfig,
    RunConfig,
    dump_config,
    load_config,
    paper_scale_profile,
    smoke_profile,
)
from itkd.detector import Detector
from itkd.distill import DistillConfig
from itkd.harness import (
    ManifestMismatch,
    ReportRow,
    ablation_matrix,
    cmd_ablate,
    cmd_distill,
    cmd_evaluate,
    cmd_gen_data,
    cmd_self_distill,
    cmd_train_teacher,
    load_detector,
    read_report,
    seed_mean,
)
from itkd.train import init_rngs

SMOKE = smoke_profile()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cmd_gen_data(SMOKE, root / "data")
    cmd_train_teacher(SMOKE, root / "data", root / "teacher")
    return root


# ---------------------------------------------------------------- config

def test_default_config_values():
    cfg = RunConfig()
    assert (cfg.data.train_scenes, cfg.data.eval_scenes) == (500, 100)
    assert cfg.net.channels == 32 and cfg.student_divisor == 4 and cfg.student_net.channels == 8
    assert cfg.optim.epochs == 20 and cfg.optim.batch_size == 8 and cfg.optim.lr_max == 0.003
    assert cfg.seeds == (0, 1, 2)
    assert cfg.distill.alpha == cfg.distill.beta == 1.0
    big = paper_scale_profile()
    assert big.net.channels == 384 and big.optim.epochs == 36 and big.optim.batch_size == 32


def test_config_file_round_trip(tmp_path):
    cfg = replace(SMOKE, distill=DistillConfig(losses=frozenset({"it", "attn"}), buffer="mid"), seeds=(3, 4))
    path = tmp_path / "run.ini"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg
    path.write_text("[run]\nprofile = smoke\n[optim]\nepochs = 7\n[distill]\nlosses =\n")
    cfg2 = load_config(path)
    assert cfg2.optim.epochs == 7 and cfg2.distill.losses == frozenset() and cfg2.grid.size == 32
    path.write_text("[optim]\nbogus = 1\n")
    with pytest.raises(ValueError):
        load_config(path)


# ---------------------------------------------------------------- data

def test_gen_data_is_bit_identical(tmp_path, workspace):
    cmd_gen_data(SMOKE, tmp_path / "again")
    for name in ("train.itkd", "eval.itkd", "dataset.json"):
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "data" / name).read_bytes()
    info = json.loads((workspace / "data" / "dataset.json").read_text())
    assert info["train"]["count"] == 8 and info["eval"]["count"] == 4


def test_overlapping_seed_ranges_are_refused(tmp_path):
    cfg = replace(SMOKE, data=DataConfig(train_scenes=10, eval_scenes=5, train_seed_start=0, eval_seed_start=8))
    with pytest.raises(ValueError):
        cmd_gen_data(cfg, tmp_path / "d")


def test_unwritable_output_is_an_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(harness.HarnessError):
        cmd_gen_data(SMOKE, blocker / "sub")


# ---------------------------------------------------------------- teacher, eval

def test_zero_epoch_teacher_equals_initialization(tmp_path, workspace):
    cfg = replace(SMOKE, optim=replace(SMOKE.optim, epochs=0))
    cmd_train_teacher(cfg, workspace / "data", tmp_path, seed=5)
    values = load_parameters(tmp_path / "teacher.ckpt")
    fresh = Detector(SMOKE.net, init_rngs(5)[0], prefix="teacher")
    for p in fresh.parameters():
        np.testing.assert_array_equal(values[p.id], p.data)


def test_teacher_report_and_manifest(workspace):
    _, rows = read_report(workspace / "teacher" / "teacher_report.json")
    assert rows[0].label == "teacher"
    manifest = json.loads((workspace / "teacher" / "teacher.ckpt.manifest.json").read_text())
    assert manifest["role"] == "teacher" and manifest["net"]["width_divisor"] == 1
    lines = (workspace / "teacher" / "teacher_metrics.jsonl").read_text().splitlines()
    events = [json.loads(l)["event"] for l in lines]
    assert events.count("eval") == SMOKE.optim.epochs
    assert events.count("step") == SMOKE.optim.epochs * 2


def test_eval_oracle_and_repeatability(workspace):
    oracle = cmd_evaluate(SMOKE, None, workspace / "data", oracle=True)
    assert all(v == 1.0 for v in oracle.ap.values() if v is not None)
    assert all(v == 1.0 for v in oracle.aph.values() if v is not None)
    a = cmd_evaluate(SMOKE, workspace / "teacher" / "teacher.ckpt", workspace / "data")
    b = cmd_evaluate(SMOKE, workspace / "teacher" / "teacher.ckpt", workspace / "data")
    assert a == b


def test_random_weights_score_near_zero(tmp_path):
    cfg = replace(RunConfig(), data=DataConfig(train_scenes=1, eval_scenes=20))
    cmd_gen_data(cfg, tmp_path / "data")
    cfg0 = replace(cfg, optim=replace(cfg.optim, epochs=0))
    row = cmd_train_teacher(cfg0, tmp_path / "data", tmp_path / "t")
    assert row.macro_ap < 0.05


def test_manifest_mismatch_is_refused(workspace, tmp_path):
    other = replace(SMOKE, net=replace(SMOKE.net, head_hidden=16))
    with pytest.raises(ManifestMismatch):
        cmd_distill(other, workspace / "teacher" / "teacher.ckpt", workspace / "data", tmp_path)
    with pytest.raises(ManifestMismatch):
        load_detector(tmp_path / "missing.ckpt")


# ---------------------------------------------------------------- distillation

def test_all_losses_disabled_equals_supervised_student(workspace, tmp_path):
    cfg = replace(SMOKE, distill=DistillConfig(losses=frozenset()))
    cmd_distill(cfg, workspace / "teacher" / "teacher.ckpt", workspace / "data", tmp_path / "a")
    # a separately built sup-only loop: same student init, same batches, plain L_sup
    from itkd.autodiff import OptimizerState, adam_step, backward, finalize_grads, zero_grads
    from itkd.autodiff.tensor import Tensor
    from itkd.detector import stack_targets, supervised_loss
    from itkd.train import batches, prepare
    from itkd.scene import read_scenes
    train = prepare(read_scenes(workspace / "data" / "train.itkd"), cfg.grid, 3)
    init, shuffle = init_rngs(cfg.seeds[0])
    student = Detector(cfg.student_net, init, prefix="student")
    params = student.parameters()
    state = OptimizerState(total_steps=cfg.optim.epochs * 2)
    for _ in range(cfg.optim.epochs):
        for idx in batches(len(train), cfg.optim.batch_size, shuffle):
            zero_grads(params)
            backward(supervised_loss(student(Tensor(train.inputs[idx]))[1],
                                     stack_targets([train.targets[i] for i in idx])))
            finalize_grads(params)
            adam_step(state, params)
    saved = load_parameters(tmp_path / "a" / "distill_seed0.ckpt")
    for p in params:
        np.testing.assert_array_equal(saved[p.id], p.data)


def test_distill_and_self_distill(workspace, tmp_path):
    teacher = workspace / "teacher" / "teacher.ckpt"
    row = cmd_distill(SMOKE, teacher, workspace / "data", tmp_path / "d")
    assert row.status == "ok"
    lines = [json.loads(l) for l in (tmp_path / "d" / "distill_seed0_metrics.jsonl").read_text().splitlines()]
    steps = [r for r in lines if r["event"] == "step"]
    assert {"sup", "total", "it", "cr", "attn", "t2s", "s2t"} <= set(steps[0]["losses"])
    hashes = [r for r in lines if r["event"] == "teacher_hash"]
    assert hashes and hashes[0]["before"] == hashes[0]["after"]
    cmd_self_distill(SMOKE, teacher, workspace / "data", tmp_path / "s")
    s_manifest = json.loads((tmp_path / "s" / "self-distill_seed0.ckpt.manifest.json").read_text())
    t_manifest = json.loads((workspace / "teacher" / "teacher.ckpt.manifest.json").read_text())
    assert s_manifest["parameter_count"] == t_manifest["parameter_count"]
    assert s_manifest["distill"]["losses"] == sorted(SMOKE.distill.losses)


def test_metrics_stream_is_bitwise_reproducible(workspace, tmp_path):
    teacher = workspace / "teacher" / "teacher.ckpt"
    for name in ("a", "b"):
        cmd_distill(SMOKE, teacher, workspace / "data", tmp_path / name, seed=3)
    a = (tmp_path / "a" / "distill_seed3_metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "distill_seed3_metrics.jsonl").read_bytes()


# ---------------------------------------------------------------- reports and ablation

def test_ablation_matrix_shape():
    cells = ablation_matrix(DistillConfig())
    by_table = {}
    for c in cells:
        by_table.setdefault(c.table, []).append(c)
    assert {t: len(v) for t, v in by_table.items()} == {
        "loss components": 4, "autoencoder sharing": 2, "reconstruction": 2,
        "buffer direction": 3, "head KD": 3}
    losses = [c.distill.losses for c in by_table["loss components"]]
    assert losses == [frozenset(), {"it"}, {"it", "cr"}, {"it", "cr", "attn"}]
    assert [c.distill.buffer for c in by_table["buffer direction"]] == ["s2t", "t2s", "mid"]


def test_seed_mean_rows():
    rows = [ReportRow("x", s, {"0": a, "1": b}, {"0": a / 2, "1": b / 2}, (a + b) / 2, (a + b) / 4,
                      {"sup": [a, b]}) for s, (a, b) in enumerate([(0.2, 0.4), (0.6, 0.1), (0.3, 0.3)])]
    m = seed_mean(rows)
    assert m.seed == "mean"
    assert m.ap["0"] == pytest.approx(np.mean([0.2, 0.6, 0.3]), abs=1e-15)
    assert m.macro_ap == pytest.approx(np.mean([r.macro_ap for r in rows]), abs=1e-15)
    assert abs(m.macro_ap - np.mean(list(m.ap.values()))) < 1e-12
    failed = replace(rows[0], status="failed")
    assert seed_mean([failed, rows[1]]).status == "partial"


def test_ablate_emits_full_matrix_with_partial_failure(workspace, tmp_path, monkeypatch):
    real = harness.distill_student

    def flaky(cfg, teacher, train, eval_set, seed, dcfg, *args, **kw):
        if dcfg.buffer == "mid":
            raise RuntimeError("injected failure")
        return real(cfg, teacher, train, eval_set, seed, dcfg, *args, **kw)

    monkeypatch.setattr(harness, "distill_student", flaky)
    cfg = replace(SMOKE, seeds=(0, 1), optim=replace(SMOKE.optim, epochs=1))
    rows = cmd_ablate(cfg, workspace / "teacher" / "teacher.ckpt", workspace / "data", tmp_path)
    assert len(rows) == 14 * 3
    means = [r for r in rows if r.seed == "mean"]
    assert len(means) == 14
    mid = [r for r in rows if r.label == "(S+T)/2"]
    assert all(r.status == "failed" for r in mid)
    ok = [r for r in rows if r.status == "ok"]
    for r in ok:
        vals = [v for v in r.ap.values() if v is not None]
        assert abs(r.macro_ap - np.mean(vals)) < 1e-12
    # identical configurations in different tables share one run
    full = {r.seed: r.macro_ap for r in rows if r.label == "sup+it+cr+attn"}
    shared = {r.seed: r.macro_ap for r in rows if r.label == "shared"}
    assert full == shared
    text = (tmp_path / "ablation_report.txt").read_text()
    for title in ("buffer direction", "autoencoder sharing", "reconstruction", "head KD", "loss components"):
        assert title in text
    # a second invocation reuses finished runs
    monkeypatch.setattr(harness, "distill_student", lambda *a, **k: (_ for _ in ()).throw(AssertionError))
    monkeypatch.setattr(harness, "_run_student", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("rerun")))
    again = cmd_ablate(cfg, workspace / "teacher" / "teacher.ckpt", workspace / "data", tmp_path)
    assert [r.macro_ap for r in again if r.status == "ok"] == [r.macro_ap for r in rows if r.status == "ok"]


# ---------------------------------------------------------------- command line

def test_cli_end_to_end(tmp_path, capsys):
    assert main(["gen-data", "--profile", "smoke", "--out", str(tmp_path / "d")]) == 0
    assert main(["train-teacher", "--profile", "smoke", "--dataset", str(tmp_path / "d"),
                 "--out", str(tmp_path / "t"), "--seed", "1"]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["command"] == "train-teacher"
    assert main(["eval", "--profile", "smoke", "--dataset", str(tmp_path / "d"), "--out", str(tmp_path / "e"),
                 "--oracle"]) == 0
    assert json.loads(capsys.readouterr().out)["macro_ap"] == 1.0


def test_cli_errors_are_structured(tmp_path, capsys):
    code = main(["distill", "--profile", "smoke", "--dataset", str(tmp_path / "nope"),
                 "--teacher", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "o")])
    assert code != 0
    diag = json.loads(capsys.readouterr().err.strip())
    assert diag["command"] == "distill" and diag["error"] == "manifest"
    code = main(["gen-data", "--profile", "smoke", "--config", "x.ini", "--out", str(tmp_path)])
    assert code != 0
    with pytest.raises(SystemExit) as exit_info:
        main(["train-teacher"])
    assert exit_info.value.code != 0
