"""Structure checks for the desk-scale experiment driver, run at toy size.

The real quality thresholds live in the acceptance suite; here we only make
sure the protocol wires up: three model variants, comparable templates,
scores for every held-out face, and consistency numbers for both
back-projection settings.
"""

import numpy as np
import pytest

from facesr.experiment import (DeskResult, FaceScore, desk_config,
                               make_dataset, run_desk_experiment, score_face,
                               trace_residual)
from facesr.gatednet import TrainSchedule
from facesr.prior import PriorConfig
from facesr.regressor import FeatureConfig, RegressorConfig

TINY = dict(
    n_bases=6, prior=PriorConfig(channels=3),
    branch_depth_first=2, branch_depth_later=2, branch_width=6,
    gate_depth=2, gate_width=6,
    regressor=RegressorConfig(n_perturb=2,
                              feature=FeatureConfig(cells=2, bins=4)),
    schedule=TrainSchedule(epochs_common=1, epochs_hf=1, epochs_joint=1,
                           batch_size=4, base_lr=50.0))


@pytest.fixture(scope="module")
def result():
    return run_desk_experiment(n_train=10, n_eval=2, seed=4, **TINY)


def test_desk_config_shape():
    cfg = desk_config(seed=3)
    assert cfg.n_stages == 2
    assert cfg.branch_depth_first == 8
    assert cfg.seed == 3
    assert cfg.back_projection
    over = desk_config(n_stages=1, stage_upscale=4)
    assert over.total_upscale == 4


def test_make_dataset_deterministic():
    a = make_dataset(np.random.default_rng(7), 3)
    b = make_dataset(np.random.default_rng(7), 3)
    for (ia, la), (ib, lb) in zip(a, b):
        assert np.array_equal(ia, ib)
        assert np.array_equal(la, lb)


def test_variants_and_scores(result):
    assert result.model.config.n_stages == 2
    assert result.common_model.config.common_only
    assert result.common_model.config.schedule.epochs_hf == 0
    assert result.single_model.config.n_stages == 1
    assert result.single_model.config.stage_upscale == 4
    # all three score on the same final raster
    shapes = {m.templates[-1].shape for m in
              (result.model, result.common_model, result.single_model)}
    assert len(shapes) == 1

    assert len(result.scores) == 2
    for s in result.scores:
        for attr in ("psnr_bicubic", "psnr_full", "psnr_common",
                     "psnr_single", "ssim_bicubic", "ssim_full"):
            assert np.isfinite(getattr(s, attr))
    assert np.isfinite(result.mean_gain)
    assert result.consistency_on >= 0.0
    assert result.consistency_off >= 0.0
    assert result.wall_seconds >= result.train_seconds > 0.0


def test_report_text(result):
    tsv = result.to_tsv()
    lines = tsv.strip().splitlines()
    assert lines[0].startswith("name\t")
    assert len(lines) == 1 + len(result.scores)
    summary = result.summary()
    assert "gain" in summary and "consistency" in summary


def test_score_face_reuses_runs(result):
    hi, lms = make_dataset(np.random.default_rng(99), 1)[0]
    score, outs = score_face({"full": result.model}, hi, lms, "probe")
    assert isinstance(score, FaceScore)
    assert np.isnan(score.psnr_common)
    assert trace_residual(outs["full"]) >= 0.0
