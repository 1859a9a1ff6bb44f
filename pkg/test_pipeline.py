import math

import pytest
import torch

import numerics
import oci
from config import replace
from conftest import random_image
from errors import ConfigError, ShapeMismatch, WindowTooLarge
from pipeline import assemble, plan_windows, segment_image


def test_plan_single_window():
    assert plan_windows(224, 224).placements == [(0, 0)]


def test_plan_aligned_and_clamped_offsets():
    assert plan_windows(336, 336).rows == [0, 112]
    assert len(plan_windows(336, 336).placements) == 4
    plan = plan_windows(300, 300)
    assert plan.rows == [0, 76] and plan.cols == [0, 76]
    assert plan_windows(448, 300).rows == [0, 112, 224]


def test_plan_errors():
    with pytest.raises(WindowTooLarge):
        plan_windows(200, 300)
    with pytest.raises(ConfigError):
        plan_windows(300, 300, 224, 0)


@pytest.mark.parametrize('H, W, window, stride', [(32, 32, 32, 16), (48, 40, 32, 16), (50, 71, 32, 7), (64, 64, 16, 16)])
def test_coverage_matches_brute_force(H, W, window, stride):
    plan = plan_windows(H, W, window, stride)
    assert len(set(plan.placements)) == len(plan.placements)
    ones = {p: torch.ones((window, window, 1), dtype=numerics.DTYPE) for p in plan.placements}
    coverage = assemble(H, W, window, ones).coverage
    for i in range(H):
        for j in range(W):
            expected = sum(1 for r, c in plan.placements if r <= i < r + window and c <= j < c + window)
            assert int(coverage[i, j]) == expected >= 1


def test_assembly_ignores_processing_order():
    plan = plan_windows(50, 50, 32, 9)
    rng = numerics.seeded_rng(4)
    scores = {p: rng.child(p[0]).child(p[1]).uniform((32, 32, 3)) for p in plan.placements}
    forward = assemble(50, 50, 32, scores)
    backward = assemble(50, 50, 32, dict(reversed(list(scores.items()))))
    assert torch.equal(forward.scores.scores, backward.scores.scores)


def test_identical_windows_overlap_to_the_same_scores():
    full = numerics.seeded_rng(8).uniform((32, 48, 2))
    assembled = assemble(32, 48, 32, {(0, 0): full[:, 0:32], (0, 16): full[:, 16:48]})
    assert torch.equal(assembled.scores.scores, full)
    assert assembled.coverage[:, 16:32].eq(2).all()
    with pytest.raises(ShapeMismatch):
        assemble(32, 32, 32, {(0, 0): torch.zeros((16, 16, 2), dtype=numerics.DTYPE)})


def test_segment_is_deterministic(tiny_model, library, categories, tiny_settings):
    img = random_image(3, size=48)
    first, report = segment_image(tiny_model, img, categories, library, replace(tiny_settings, lr=1e-2))
    second, _ = segment_image(tiny_model, img, categories, library, replace(tiny_settings, lr=1e-2))
    assert tuple(first.shape) == (48, 48)
    assert torch.equal(first, second)
    assert len(report.windows) == 4
    assert len(report.losses) == 4
    assert all(0 <= int(v) < 3 for v in first.unique())


def test_null_adaptation_equals_the_unadapted_consensus(tiny_model, library, categories, tiny_settings):
    img = random_image(5, size=48)
    adapted, _ = segment_image(tiny_model, img, categories, library, replace(tiny_settings, lr=0.0))
    consensus, report = segment_image(tiny_model, img, categories, library, replace(tiny_settings, mode='consensus'))
    assert torch.equal(adapted, consensus)
    assert report.trainables == 0


def test_single_view_geometric_fusion_without_update_equals_static(tiny_model, library, categories, tiny_settings):
    img = random_image(6, size=48)
    settings = replace(tiny_settings, lr=0.0, views=1, delta=1.0)
    adapted, _ = segment_image(tiny_model, img, categories, library, settings)
    static, _ = segment_image(tiny_model, img, categories, None, settings, static=True)
    assert torch.equal(adapted, static)


def test_static_mode_creates_no_trainables(tiny_model, categories, tiny_settings):
    with numerics.track_trainables() as created:
        labels, report = segment_image(tiny_model, random_image(1, size=40), categories, None, tiny_settings, static=True)
    assert created == []
    assert report.mode == 'static'
    assert tuple(labels.shape) == (40, 40)


@pytest.mark.parametrize('mode', ['gcl', 'scl', 'seeco'])
def test_ablation_modes_run(tiny_model, library, categories, tiny_settings, mode):
    labels, report = segment_image(tiny_model, random_image(2, size=32), categories, library,
                                   replace(tiny_settings, mode=mode, lr=1e-3))
    assert report.mode == mode
    assert report.trainables > 0
    pre, post = report.losses[0]
    assert math.isfinite(pre) and math.isfinite(post)


def test_per_image_session_mode(tiny_model, library, categories, tiny_settings):
    img = random_image(7, size=48)
    labels, report = segment_image(tiny_model, img, categories, library,
                                   replace(tiny_settings, session_mode='per_image', lr=1e-3))
    assert tuple(labels.shape) == (48, 48)
    assert len(report.losses) == 4
    per_window, _ = segment_image(tiny_model, img, categories, library, replace(tiny_settings, lr=1e-3))
    assert tuple(per_window.shape) == tuple(labels.shape)


def test_divergence_falls_back_to_consensus(tiny_model, library, categories, tiny_settings, monkeypatch):
    img = random_image(9, size=48)
    expected, _ = segment_image(tiny_model, img, categories, library, replace(tiny_settings, mode='consensus'))
    monkeypatch.setattr(oci, 'seeco_loss', lambda *args, **kwargs: torch.tensor(math.inf, dtype=torch.float64))
    labels, report = segment_image(tiny_model, img, categories, library, tiny_settings)
    assert torch.equal(labels, expected)
    assert all(w.diverged for w in report.windows)
    assert report.losses == []


def test_segment_input_errors(tiny_model, library, categories, tiny_settings):
    with pytest.raises(WindowTooLarge):
        segment_image(tiny_model, random_image(0, size=24), categories, library, tiny_settings)
    with pytest.raises(ConfigError):
        segment_image(tiny_model, random_image(0, size=64), categories, library, replace(tiny_settings, window=64))
    with pytest.raises(ShapeMismatch):
        segment_image(tiny_model, torch.zeros((32, 32), dtype=numerics.DTYPE), categories, library, tiny_settings)
    with pytest.raises(ConfigError):
        segment_image(tiny_model, random_image(0), categories, None, tiny_settings)
