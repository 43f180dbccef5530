import json
from fractions import Fraction

import numpy as np
import pytest

from semattack.cli import main
from semattack.errors import ConfigurationError, InvalidInputError
from semattack.harness.campaign import (
    CampaignConfig, ablation_configs, attack_styles, invert, make_run_dir, rank_attributes, read_jsonl,
    run_campaign, write_campaign,
)
from semattack.harness.defenses import (
    calibrate_threshold, feature_squeeze, reduce_bit_depth, squeeze_detect, squeeze_distance,
)
from semattack.harness.metrics import compute_metrics
from semattack.harness.report import build_report
from semattack.harness.stack import StackConfig
from semattack.inversion import InversionConfig
from semattack.latent import StyleCode
from semattack.whitebox import AttackResult, WhiteboxConfig

from helpers import ConstantDetector


def fake_result(success):
    s = StyleCode(np.zeros(4), (4,))
    return AttackResult(success, np.zeros((32, 32, 3), np.float32), s, s, 1, 1, [0.9])


@pytest.mark.parametrize("k,expected", [(0, 0.0), (10, 1.0), (3, 0.3)])
def test_asr_counts(k, expected):
    report = compute_metrics([fake_result(i < k) for i in range(10)], np.ones(10))
    assert report.asr == Fraction(k, 10) and report.aggregates()["asr"] == expected
    assert report.accuracy == 1 - report.asr


def test_metrics_input_checks():
    with pytest.raises(InvalidInputError):
        compute_metrics([], [])
    with pytest.raises(InvalidInputError):
        compute_metrics([fake_result(True)], [0.9, 0.8])


def test_campaign_config_round_trip():
    cfg = CampaignConfig(mode="blackbox", selection=("earring",), num_images=3)
    back = CampaignConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.digest() == cfg.digest()
    with pytest.raises(ConfigurationError):
        CampaignConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ConfigurationError):
        CampaignConfig(mode="greybox")


def test_stack_config_round_trip():
    cfg = StackConfig()
    assert StackConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).digest() == cfg.digest()


def test_ablation_wiring():
    cfgs = ablation_configs(InversionConfig(lambda_prior=1e-3), WhiteboxConfig(seed=4))
    inv0, wb0 = cfgs["v0"]
    assert inv0.lambda_prior == 0.0 and wb0.max_restarts == 0 and wb0.alpha == 0.0
    assert cfgs["v1"][0].lambda_prior == 1e-3 and cfgs["v1"][1].max_restarts == 0
    assert cfgs["v2"][1].max_restarts == WhiteboxConfig().max_restarts
    assert {c[1].seed for c in cfgs.values()} == {4}


def test_rank_attributes_empty_set_last_and_averaged(stack):
    images = stack.fakes(3, 1000)
    styles = invert(stack, images, InversionConfig(iterations=0))
    names = ["earring", "pale_skin"]
    assert not stack.catalog.channels["pale_skin"]
    wb = WhiteboxConfig(max_iters=20, rollback=0)
    one = rank_attributes(stack, [stack.detector], images, styles, wb, attributes=names)
    two = rank_attributes(stack, [stack.detector, ConstantDetector(5.0)], images, styles, wb, attributes=names)
    assert one[-1]["attribute"] == "pale_skin" and one[-1]["asr"] == 0.0
    top = two[0]
    assert top["asr"] == pytest.approx(np.mean(top["per_detector"]))
    assert top["per_detector"][1] == 0.0


def test_blackbox_rejects_empty_selection(stack):
    styles = stack.generator.sample_styles(1, 0).numpy()
    with pytest.raises(ConfigurationError):
        attack_styles(stack, styles, ["pale_skin"], "blackbox", stack.detector)


# -- feature squeezing -------------------------------------------------------

def test_bit_depth_endpoints():
    assert reduce_bit_depth(np.array([0.0, 1.0])).tolist() == [0.0, 1.0]


def test_constant_image_unchanged():
    x = np.full((32, 32, 3), 7 / 31, np.float32)
    assert np.array_equal(feature_squeeze(x), x)


def test_squeeze_rejects_bad_shape():
    with pytest.raises(InvalidInputError):
        feature_squeeze(np.zeros((32, 32)))


def test_batch_and_single_squeeze_agree(rng):
    x = rng.random((3, 32, 32, 3)).astype(np.float32)
    assert np.array_equal(feature_squeeze(x)[1], feature_squeeze(x[1]))


def test_calibration_rule():
    d = np.arange(100, dtype=float)
    t = calibrate_threshold(d, 0.05)
    assert np.mean(d > t) == 0.05
    assert np.mean(d > calibrate_threshold(d, 0.0)) == 0.0
    with pytest.raises(ConfigurationError):
        calibrate_threshold(d, 1.0)


def test_squeeze_distance_and_detect(stack):
    x = stack.fakes(4, 3)
    d = squeeze_distance(stack.detector, x)
    assert d.shape == (4,) and np.all((d >= 0) & (d <= 2))
    assert squeeze_detect(stack.detector, x[0], -1.0) is True
    assert squeeze_detect(stack.detector, x, 2.0).tolist() == [False] * 4


# -- campaign, run directories, report and CLI --------------------------------

def test_run_dir_and_report(stack, tmp_path):
    cfg = CampaignConfig(num_images=2, whitebox=WhiteboxConfig(max_iters=20, rollback=0),
                         inversion=InversionConfig(iterations=5), stack_dir=str(stack.directory))
    report, results, images = run_campaign(cfg, stack)
    run = make_run_dir(tmp_path, cfg.to_dict(), "wb")
    write_campaign(run, report, results, images)
    rows = read_jsonl(run / "results.jsonl")
    assert len(rows) == 2 and {"success", "queries", "style_digest", "quality"} <= set(rows[0])
    assert CampaignConfig.from_dict(json.loads((run / "config.json").read_text())) == cfg
    assert (run / "png" / "results_0000_adv.png").exists()
    rep = build_report(run)
    assert "asr.png" in rep["plots"] and "results_trajectories.png" in rep["plots"]
    assert (run / "report.json").exists()


def test_cli_attack_and_report(stack, tmp_path, capsys):
    code = main(["attack-whitebox", "--stack", str(stack.directory), "--num-images", "2",
                 "--selection", "earring,eyeglasses", "--out-root", str(tmp_path)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["attempted"] == 2
    assert main(["report", "--run", out["run"]]) == 0


def test_cli_reports_errors(stack, tmp_path, capsys):
    code = main(["attack-whitebox", "--stack", str(stack.directory), "--num-images", "1",
                 "--selection", "no_such_attribute", "--out-root", str(tmp_path)])
    assert code == 2
    assert "unknown attributes" in capsys.readouterr().err


def test_cli_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--num", "5", "--seed", "1"]) == 0
    data = np.load(tmp_path / "d" / "data.npz")["images"]
    assert data.shape == (5, 32, 32, 3)
    assert len((tmp_path / "d" / "specs.jsonl").read_text().splitlines()) == 5
