"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict (printed in the terminal
summary and immediately) before asserting, so a failing criterion is still
reported with its measured numbers.
"""
import json
import random
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fourdeco import cli, oracles, search, storage, training
from fourdeco.training import SINGLE_TASK, StudyConfig


def verdict(n: int, title: str, passed: bool, detail: str, capsys=None) -> bool:
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'} {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    return passed


def test_criterion_1_loss_oracles(capsys):
    r = oracles.loss_suite(200)
    ok = r.passed and r.metric <= 1e-10 and r.seconds < 60
    assert verdict(1, "loss oracle equivalence", ok,
                   f"200 instances, worst |p - p_enum| {r.metric:.2e} (tol 1e-10), {r.seconds:.1f}s (< 60s)", capsys)


def test_criterion_2_gradient_fidelity(capsys):
    r = oracles.grad_suite(50)
    ok = r.passed and r.metric <= 1e-4 and r.seconds < 300
    assert verdict(2, "gradient fidelity", ok,
                   f"50 loss instances + 50 toy-model batches, worst rel err {r.metric:.2e} "
                   f"(tol 1e-4, eps 1e-5), {r.seconds:.1f}s (< 300s)", capsys)


def test_criterion_3_search_oracle_agreement(capsys):
    r = oracles.search_suite(100)
    ok = r.passed and not r.failures
    assert verdict(3, "search-oracle agreement", ok,
                   f"{r.n_cases} (model, mu, search) cases, {len(r.failures)} disagreements, {r.seconds:.1f}s",
                   capsys)


def test_criterion_4_weight_degeneration(capsys):
    r = oracles.degeneration_suite(100)
    assert verdict(4, "weight degeneration", r.passed,
                   f"{r.n_cases} (instance, pair) cases, {len(r.failures)} mismatches", capsys)


def test_criterion_5_two_stage_rule(capsys):
    exact = training.two_stage_weights((10, 10, 10, 70)).as_tuple() == (0.1, 0.1, 0.1, 0.7)
    rnd = random.Random(0)
    bad = 0
    for _ in range(1000):
        e = [rnd.randint(1, 100) for _ in range(4)]
        c = rnd.randint(2, 100)
        a = training.two_stage_weights(e).as_tuple()
        b = training.two_stage_weights([c * x for x in e]).as_tuple()
        bad += max(abs(x - y) for x, y in zip(a, b)) > 1e-15
    assert verdict(5, "two-stage rule", exact and bad == 0,
                   f"(10,10,10,70) -> (0.1,0.1,0.1,0.7) exact: {exact}; scale-invariance violations: {bad}/1000",
                   capsys)


# ---------------------------------------------------------------- desk-scale study


@pytest.fixture(scope="module")
def study():
    t0 = time.perf_counter()
    res = training.joint_training_study(StudyConfig())
    res["seconds"] = time.perf_counter() - t0
    return res


def test_criterion_6_joint_training_effect(study, capsys):
    single, joint = study["mean"]["single"], study["mean"]["joint"]
    per = {k: joint[k] <= single[k] + 0.005 for k in SINGLE_TASK}
    m_single = float(np.mean(list(single.values())))
    m_joint = float(np.mean(list(joint.values())))
    ok = all(per.values()) and m_joint < m_single and study["seconds"] < 1800
    detail = ", ".join(f"{k} {100 * joint[k]:.2f} vs {100 * single[k]:.2f}{'' if per[k] else ' (over +0.5)'}"
                       for k in SINGLE_TASK)
    assert verdict(6, "joint-training effect", ok,
                   f"4D vs single-task WER% over 3 seeds: {detail}; mean {100 * m_joint:.2f} vs "
                   f"{100 * m_single:.2f}; study {study['seconds']:.0f}s (< 1800s)", capsys)


def test_criterion_7_joint_decoding_effect(study, capsys):
    j = study["mean"]["joint_decoding"]["joint-rnnt-driven"]
    singles = study["mean"]["joint"]
    ok = all(j <= v for v in singles.values())
    detail = ", ".join(f"{k} {100 * v:.2f}" for k, v in singles.items())
    assert verdict(7, "joint-decoding effect", ok,
                   f"RNN-T-driven joint WER {100 * j:.2f}% vs same-checkpoint {detail}", capsys)


def test_criterion_8_benchmark_harness(study, tmp_path, capsys):
    ckpt = tmp_path / "model4d.ckpt"
    storage.save_checkpoint(ckpt, study["models"][0])
    data_dir = tmp_path / "data"
    spec = StudyConfig().task
    storage.save_dataset(data_dir, spec, training.gen_dataset(spec))
    report_path = tmp_path / "bench.json"
    code = cli.main(["bench", "--checkpoint", str(ckpt), "--data", str(data_dir), "--out", str(report_path)])
    rows = json.loads(report_path.read_text())["rows"]
    names = [r["decoder"] for r in rows]
    att = {r["decoder"]: r["calls_per_utt"].get("att_calls", 0.0) for r in rows}
    expected = [d for d in search.DECODERS if d != "oracle"]
    ok = (code == 0 and names == expected and all(r["rtf"] > 0 for r in rows)
          and att["joint-ctc-driven"] >= att["joint-rnnt-driven"])
    table = "; ".join(f"{r['decoder']} WER {100 * r['wer']:.2f}% RTF {r['rtf']:.4f}" for r in rows)
    assert verdict(8, "benchmark harness", ok,
                   f"{len(rows)} decoder rows; att calls/utt ctc-driven {att['joint-ctc-driven']:.1f} >= "
                   f"rnnt-driven {att['joint-rnnt-driven']:.1f}; {table}", capsys)


# ---------------------------------------------------------------- determinism


def test_criterion_9_determinism(tmp_path, capsys):
    doc = {
        "task": {"n_train": 120, "n_valid": 20, "n_test": 20},
        "training": {"weights": "two-stage", "epochs": 1, "stage2_epochs": 1},
        "paths": {"data": str(tmp_path / "data"), "out": str(tmp_path / "run")},
        "seed": 11,
    }
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(doc))
    assert cli.main(["gen", "--config", str(cfg)]) == 0
    files = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        for dec in ("joint-rnnt-driven", "joint-ctc-driven", "maskctc"):
            hyp = out / f"hyp.{dec}.txt"
            assert cli.main(["decode", "--config", str(cfg), "--checkpoint", str(out / "model.ckpt"),
                             "--decoder", dec, "--out", str(hyp)]) == 0
        files.append({p.name: p.read_bytes() for p in sorted(out.glob("hyp.*.txt"))})
        files[-1]["model.ckpt"] = (out / "model.ckpt").read_bytes()
    same = files[0] == files[1] and len(files[0]) == 4
    assert verdict(9, "determinism", same,
                   f"two train+decode runs, {len(files[0]) - 1} hypothesis files + checkpoint byte-identical: {same}",
                   capsys)
