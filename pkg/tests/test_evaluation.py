import json

import numpy as np
import pytest

from crrn.exceptions import ConfigurationError, DimensionError
from crrn.evaluation import EvalConfig, ablation_forward, baseline_row, evaluate, infer, initial_checkpoint
from crrn.image_model import load_image, save_image
from crrn.metrics import MetricReport
from crrn.synthesis import iter_triplets, read_manifest
from crrn.training import save_checkpoint


@pytest.fixture(scope="module")
def stub_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "stub.pt"
    save_checkpoint(initial_checkpoint(base_channels=4), path)
    return path


@pytest.fixture(scope="module")
def eval_manifest(tmp_path_factory, pools):
    from crrn.synthesis import SynthesisConfig, generate_dataset

    out = tmp_path_factory.mktemp("evaldata")
    generate_dataset(SynthesisConfig(seed=9, count=5, resolutions=["32x64"]), pools[0], pools[1], out)
    return out / "manifest.json"


def test_oracle_scores_one(eval_manifest, tmp_path):
    report = evaluate(EvalConfig(str(eval_manifest), oracle=True, output=str(tmp_path)))
    assert len(report.rows) == 5
    for row in report.rows:
        assert row.values() == pytest.approx([1.0] * 4, abs=1e-9)
    lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 5 + 1
    assert lines[-1].startswith("baseline,")
    agg = json.loads((tmp_path / "report.json").read_text())
    assert agg["count"] == 5 and agg["aggregate"]["ssim"] == pytest.approx(1.0)
    assert agg["baseline"]["ssim"] < 1.0
    assert report.baseline.ssim < 1.0


def test_stub_checkpoint_matches_baseline(eval_manifest, stub_ckpt):
    report = evaluate(EvalConfig(str(eval_manifest), checkpoint=str(stub_ckpt)))
    base = baseline_row(read_manifest(eval_manifest))
    agg = report.aggregate
    assert agg["ssim"] == pytest.approx(base.ssim, abs=1e-6)
    assert agg["si_r"] == pytest.approx(base.si_r, abs=1e-6)
    assert report.baseline.values() == pytest.approx(base.values())
    assert MetricReport.from_csv(report.to_csv()).baseline.values() == pytest.approx(base.values())


def test_emit_predictions(eval_manifest, stub_ckpt, tmp_path):
    evaluate(EvalConfig(str(eval_manifest), checkpoint=str(stub_ckpt), output=str(tmp_path), emit_predictions=True))
    assert len(list((tmp_path / "predictions").glob("*_background.png"))) == 5
    assert len(list((tmp_path / "predictions").glob("*.png"))) == 15


def test_config_errors(eval_manifest, tmp_path):
    with pytest.raises(ConfigurationError):
        EvalConfig(str(eval_manifest))
    with pytest.raises(ConfigurationError):
        EvalConfig(str(tmp_path / "none.json"), oracle=True)
    with pytest.raises(ConfigurationError):
        EvalConfig(str(eval_manifest), oracle=True, ablation="bogus")



def test_indivisible_manifest_is_rejected(tmp_path, pools):
    from crrn.synthesis import SynthesisConfig, generate_dataset

    generate_dataset(SynthesisConfig(seed=1, count=2, resolutions=["40x64"]), pools[0], pools[1], tmp_path)
    with pytest.raises(DimensionError, match="32"):
        evaluate(EvalConfig(str(tmp_path / "manifest.json"), oracle=True))


class TestAblationForward:
    def test_shapes(self, eval_manifest, stub_ckpt):
        t = next(iter_triplets(read_manifest(eval_manifest)))
        for tag in ("full", "iin_only"):
            out = ablation_forward(stub_ckpt, t, tag)
            assert tuple(out.background.shape) == t.mixture.shape
            assert tuple(out.reflection.shape) == t.mixture.shape

    def test_unknown_tag(self, eval_manifest, stub_ckpt):
        t = next(iter_triplets(read_manifest(eval_manifest)))
        with pytest.raises(ValueError, match="unknown ablation"):
            ablation_forward(stub_ckpt, t, "gin_only")

    def test_l1_needs_l1_checkpoint(self, eval_manifest, stub_ckpt):
        t = next(iter_triplets(read_manifest(eval_manifest)))
        with pytest.raises(ConfigurationError):
            ablation_forward(stub_ckpt, t, "l1_only")


class TestInfer:
    def test_writes_three_layers(self, stub_ckpt, tmp_path, rng):
        img = rng.random((96, 160, 3)).astype(np.float32)
        save_image(img, tmp_path / "in.png")
        paths = infer(stub_ckpt, tmp_path / "in.png", tmp_path / "out")
        assert sorted(p.name for p in paths.values()) == ["background.png", "gradient.png", "reflection.png"]
        bg = load_image(paths["background"])
        assert bg.shape == (96, 160, 3)
        # untrained residual head: background is the input itself
        assert np.array_equal(bg, load_image(tmp_path / "in.png"))
        assert load_image(paths["gradient"]).shape[:2] == (96, 160)

    def test_odd_size_needs_auto_resize(self, stub_ckpt, tmp_path, rng):
        save_image(rng.random((100, 100, 3)), tmp_path / "in.png")
        with pytest.raises(DimensionError, match="auto-resize"):
            infer(stub_ckpt, tmp_path / "in.png", tmp_path / "out")
        paths = infer(stub_ckpt, tmp_path / "in.png", tmp_path / "out", auto_resize=True)
        assert load_image(paths["background"]).shape[:2] == (100, 100)

    def test_stage1_checkpoint_rejected(self, tmp_path, rng):
        ckpt = initial_checkpoint(4)
        ckpt.iin, ckpt.stage = None, "stage1"
        save_image(rng.random((32, 32, 3)), tmp_path / "in.png")
        with pytest.raises(ConfigurationError, match="stage-1"):
            infer(ckpt, tmp_path / "in.png", tmp_path / "out")
