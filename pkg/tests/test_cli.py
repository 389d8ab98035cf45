import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from doremi3d.cli import main
from doremi3d.data import load_cloud, load_manifest
from doremi3d.metrics import read_utilization_csv


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    res = runner.invoke(main, ["gen-data", "--train-scenes", "1", "--eval-scenes", "1", "--out", str(root / "data")])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["pretrain", "--corpus", str(root / "data" / "manifest.yaml"), "--epochs", "1",
                               "--out", str(root / "pre.ckpt")])
    assert res.exit_code == 0, res.output
    cfg = {"corpus": str(root / "data" / "manifest.yaml"), "pretrained": str(root / "pre.ckpt"),
           "epochs": 1, "experts": 3}
    (root / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    res = runner.invoke(main, ["--config", str(root / "cfg.yaml"), "train", "--seed", "7", "--out", str(root / "run")])
    assert res.exit_code == 0, res.output
    return root


def invoke(*args):
    res = CliRunner().invoke(main, [str(a) for a in args])
    assert res.exit_code == 0, (res.output, res.exception)
    return res.output


def test_gen_data_writes_clouds(tmp_path):
    out = invoke("gen-data", "--train-scenes", "1", "--eval-scenes", "1", "--write-clouds", "--out", tmp_path)
    assert "4 domains, 8 cloud files" in out
    corpus = load_manifest(tmp_path / "manifest.yaml")
    cloud = load_cloud(tmp_path / "train_d2_0.cloud")
    assert cloud.domain_id == 2 and len(cloud) > 0
    assert corpus.splits["eval"] == (10_000, 10_001)


def test_train_outputs(work):
    run = work / "run"
    assert {p.name for p in run.iterdir()} >= {"model.ckpt", "metrics.yaml", "utilization.csv"}
    report = yaml.safe_load((run / "metrics.yaml").read_text())
    assert report["seed"] == 7 and report["config"]["experts"] == 3
    for h in read_utilization_csv(run / "utilization.csv").values():
        assert abs(h.sum() - 1) < 1e-9


def test_eval_and_bench(work):
    out = invoke("eval", "--model", work / "run" / "model.ckpt", "--out", work / "eval")
    assert out.startswith("mIoU=")
    assert "mIoU" in yaml.safe_load((work / "eval" / "eval.yaml").read_text())
    out = invoke("bench", "--model", work / "run" / "model.ckpt", "--passes", "1")
    assert "scenes/s" in out


def test_finetune_unseen_domain(work):
    out = invoke("finetune", "--model", work / "run" / "model.ckpt", "--epochs", "1", "--out", work / "ft")
    assert out.startswith("domain 3:")
    report = yaml.safe_load((work / "ft" / "metrics.yaml").read_text())
    assert report["unseen"] is True and np.isfinite(report["finetuned"]["mean_loss"])


def test_analyze_experts_model_and_traces(work):
    out = invoke("analyze-experts", "--model", work / "run" / "model.ckpt", "--out", work / "ax")
    assert out.count("domain") == 3 and "alpha mean=" in out
    hist = read_utilization_csv(work / "ax" / "utilization.csv")
    out2 = invoke("analyze-experts", "--traces", work / "ax" / "traces.csv", "--out", work / "ax2")
    for d, h in read_utilization_csv(work / "ax2" / "utilization.csv").items():
        np.testing.assert_allclose(h, hist[d], atol=1e-12)
    invoke("analyze-experts", "--traces", work / "ax" / "traces.csv", "--layer", "s0b1", "--out", work / "ax3")
    assert out2.splitlines()[-1].startswith("alpha mean=")


def test_plant_route(work):
    out = invoke("plant-route", "--model", work / "run" / "model.ckpt", "--domain", "1", "--expert", "2",
                 "--steps", "3", "--out", work / "planted")
    assert "planted domain 1 -> expert 2" in out


def test_ablate_single_row(work, tmp_path):
    out = invoke("--config", work / "cfg.yaml", "ablate", "--seeds", "0", "--variants", "baseline",
                 "--out", tmp_path)
    assert "baseline" in out
    assert yaml.safe_load((tmp_path / "ablation.yaml").read_text())["seeds"] == [0]


def test_bad_config_rejected(tmp_path):
    (tmp_path / "bad.yaml").write_text("epochs: 1\nbogus: 2\n")
    res = CliRunner().invoke(main, ["--config", str(tmp_path / "bad.yaml"), "train", "--out", str(tmp_path)])
    assert res.exit_code != 0
    assert "unknown config keys" in str(res.exception)
