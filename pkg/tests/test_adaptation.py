import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from zodi.adaptation import (
    DEFAULT_LAMBDA,
    DegenerateInputError,
    LossBreakdown,
    TrainConfig,
    color_jitter,
    poly_lr,
    sim_loss,
    task_loss,
    train_source_only,
    train_zodi,
    zodi_loss,
)
from zodi.segmentation import SegConfig, init_segmodel
from zodi.world import render_seed

TINY = SegConfig(widths=(2,), kernel_size=1, decoder_width=0, skip=False, bias=False, num_classes=2)
NO_AUG = dict(hflip=False, crop=None, jitter=(0.0, 0.0, 0.0))

vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=16)


def cos_oracle(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return 1.0 - float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))


# ------------------------------------------------------------------ L_sim


@pytest.mark.parametrize("f1,f2,want", [
    ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.0),
    ([1.0, 0.0], [0.0, 1.0], 1.0),
    ([0.3, -2.0, 5.0], [-0.3, 2.0, -5.0], 2.0),
])
def test_sim_loss_fixtures(f1, f2, want):
    got = sim_loss(torch.tensor(f1, dtype=torch.float64), torch.tensor(f2, dtype=torch.float64))
    assert got.item() == pytest.approx(want, abs=1e-12)


def test_sim_loss_scale_invariance_and_symmetry_1000_pairs():
    g = np.random.default_rng(0)
    worst_scale = worst_sym = 0.0
    for _ in range(1000):
        d = int(g.integers(2, 65))
        f1 = torch.tensor(g.standard_normal(d))
        f2 = torch.tensor(g.standard_normal(d))
        a, b = g.uniform(1e-3, 1e3, 2)
        base = sim_loss(f1, f2).item()
        worst_scale = max(worst_scale, abs(sim_loss(a * f1, b * f2).item() - base))
        worst_sym = max(worst_sym, abs(sim_loss(f2, f1).item() - base))
    assert worst_scale < 1e-10 and worst_sym < 1e-10


@given(a=vec, b=vec)
def test_sim_loss_matches_scalar_oracle(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    got = sim_loss(torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)).item()
    assert got == pytest.approx(cos_oracle(a, b), abs=1e-9)
    assert -1e-12 <= got <= 2 + 1e-12


def test_sim_loss_zero_vector_is_degenerate():
    with pytest.raises(DegenerateInputError):
        sim_loss(torch.zeros(4), torch.ones(4))


def test_sim_loss_batched_is_row_mean():
    f1 = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    f2 = torch.tensor([[0.0, 1.0], [-1.0, -1.0]], dtype=torch.float64)
    assert sim_loss(f1, f2).item() == pytest.approx((1.0 + 2.0) / 2)


# ----------------------------------------------------------------- L_task


def test_task_loss_uniform_logits_is_two_ln5():
    m = init_segmodel()
    with torch.no_grad():
        m.classifier.weight.zero_()
        m.classifier.bias.zero_()
    s = render_seed(0, "day")
    assert task_loss(m, s.image, s.image, s.layout).item() == pytest.approx(2 * math.log(5), abs=1e-6)


def test_task_loss_confident_correct_logits_is_near_zero():
    m = init_segmodel(TINY).double()
    with torch.no_grad():
        m.encoder[0].weight.zero_()
        m.encoder[0].weight[0, 0] = 1.0  # feature 0 = silu(red channel)
        m.classifier.weight.copy_(torch.tensor([[-60.0, 0.0], [60.0, 0.0]]).view(2, 2, 1, 1))
    img = np.full((3, 4, 4), 1.0)
    y = np.ones((4, 4), int)  # red > 0 everywhere so class 1 dominates
    assert task_loss(m, img, img, y).item() < 1e-6


def test_task_loss_rejects_out_of_range_labels():
    m = init_segmodel()
    s = render_seed(0, "day")
    with pytest.raises(ValueError):
        task_loss(m, s.image, s.image, np.full_like(s.layout, 5))


def _fd_check(loss_fn, m, h=1e-6):
    m.zero_grad()
    loss_fn().backward()
    params = list(m.parameters())
    analytic = torch.cat([p.grad.flatten() for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    return ((analytic - numeric).norm() / numeric.norm()).item()


@pytest.fixture
def tiny_problem():
    g = np.random.default_rng(1)
    m = init_segmodel(TINY, seed=3).double()
    assert sum(p.numel() for p in m.parameters()) == 10
    img = g.uniform(-1, 1, (2, 3, 6, 6))
    gen = g.uniform(-1, 1, (2, 3, 6, 6))
    y = g.integers(0, 2, (2, 6, 6))
    return m, img, gen, y


def test_task_loss_gradient_matches_finite_differences(tiny_problem):
    m, img, gen, y = tiny_problem
    assert _fd_check(lambda: task_loss(m, img, gen, y), m) < 1e-4


@pytest.mark.parametrize("lam", [0.0, DEFAULT_LAMBDA, 1.0])
def test_zodi_loss_gradient_matches_finite_differences(tiny_problem, lam):
    m, img, gen, y = tiny_problem
    assert _fd_check(lambda: zodi_loss(m, img, gen, y, lam).total, m) < 1e-4


# ---------------------------------------------------------------- combined


def test_breakdown_arithmetic():
    assert DEFAULT_LAMBDA == 0.1
    b = LossBreakdown(task=1.0, sim=0.4, total=DEFAULT_LAMBDA * 0.4 + 1.0, lam=DEFAULT_LAMBDA)
    assert b.total == pytest.approx(1.04, abs=1e-15)


def test_zodi_loss_total_is_lambda_sim_plus_task(tiny_problem):
    m, img, gen, y = tiny_problem
    b = zodi_loss(m, img, gen, y).as_floats()
    assert b.lam == 0.1
    assert b.total == pytest.approx(0.1 * b.sim + b.task, abs=1e-12)
    assert b.task == pytest.approx(task_loss(m, img, gen, y).item(), abs=1e-12)


@given(lam=st.floats(0, 10))
def test_total_is_linear_in_lambda(lam):
    g = np.random.default_rng(2)
    m = init_segmodel(TINY, seed=3).double()
    img, gen, y = g.uniform(-1, 1, (3, 4, 4)), g.uniform(-1, 1, (3, 4, 4)), g.integers(0, 2, (4, 4))
    b0 = zodi_loss(m, img, gen, y, 0.0).as_floats()
    b = zodi_loss(m, img, gen, y, lam).as_floats()
    assert b.total == pytest.approx(b0.total + lam * b0.sim, abs=1e-10)


def test_identical_images_have_zero_sim(tiny_problem):
    m, img, _, y = tiny_problem
    b = zodi_loss(m, img, img, y).as_floats()
    assert b.sim == pytest.approx(0.0, abs=1e-12)
    assert b.total == pytest.approx(b.task, abs=1e-12)


def test_lambda_zero_total_equals_task_exactly(tiny_problem):
    m, img, gen, y = tiny_problem
    b = zodi_loss(m, img, gen, y, 0.0)
    assert b.total.item() == b.task.item()


def test_negative_lambda_rejected(tiny_problem):
    m, img, gen, y = tiny_problem
    with pytest.raises(ValueError):
        zodi_loss(m, img, gen, y, -0.1)


# ---------------------------------------------------------------- training


def _pairs(n, target="night"):
    return [(render_seed(s, "day").image, render_seed(s, target).image, render_seed(s, "day").layout)
            for s in range(n)]


def test_poly_lr_schedule():
    assert poly_lr(0.01, 0, 100, 0.9) == 0.01
    assert poly_lr(0.01, 50, 100, 0.9) == pytest.approx(0.01 * 0.5**0.9)


def test_color_jitter_identity_factors_keep_image():
    x = torch.tensor(render_seed(0, "day").image)
    assert torch.allclose(color_jitter(x, np.ones(3)), x, atol=1e-6)


def test_empty_pairs_rejected():
    with pytest.raises(ValueError):
        train_zodi(init_segmodel(), [], TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_source_only(init_segmodel(), [], TrainConfig(epochs=1))


def test_overfits_four_pairs():
    # augmentation off: the smoke test checks capacity and gradient flow
    cfg = TrainConfig(epochs=300, batch_size=1, lr=0.05, **NO_AUG)
    _, hist = train_zodi(init_segmodel(seed=0), _pairs(4), cfg)
    assert hist.column("task")[-1] < 0.1  # measured 0.041


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=3)
    m1, h1 = train_zodi(init_segmodel(seed=1), _pairs(8), cfg)
    m2, h2 = train_zodi(init_segmodel(seed=1), _pairs(8), cfg)
    assert h1.epochs == h2.epochs
    assert all(torch.equal(p, q) for p, q in zip(m1.parameters(), m2.parameters()))


def test_lambda_changes_the_trajectory():
    _, h0 = train_zodi(init_segmodel(seed=1), _pairs(8), TrainConfig(epochs=2, lam=0.0))
    _, h1 = train_zodi(init_segmodel(seed=1), _pairs(8), TrainConfig(epochs=2, lam=0.1))
    assert h0.epochs[1]["task"] != h1.epochs[1]["task"]
    assert all(e["lam"] == 0.0 for e in h0.epochs)


def test_source_only_equals_zodi_on_self_pairs_with_lambda_zero():
    samples = [render_seed(s, "day") for s in range(8)]
    cfg = TrainConfig(epochs=2)
    m1, h1 = train_source_only(init_segmodel(seed=2), samples, cfg)
    self_pairs = [(s.image, s.image, s.layout) for s in samples]
    m2, h2 = train_zodi(init_segmodel(seed=2), self_pairs, replace(cfg, lam=0.0))
    assert all(torch.equal(p, q) for p, q in zip(m1.parameters(), m2.parameters()))
    assert h1.epochs == h2.epochs


def test_source_only_loss_decreases_when_smoothed():
    samples = [render_seed(s, "day") for s in range(128)]
    _, hist = train_source_only(init_segmodel(seed=0), samples, TrainConfig(epochs=20))
    smooth = np.convolve(hist.column("task"), np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 0)


def test_spatial_augmentation_is_shared_within_a_pair():
    seen = []

    def hook(step, records):
        for r in records:
            assert r["image"] == r["generated"] == r["layout"]
            assert 0 <= r["image"].top <= 32 - 24 and 0 <= r["image"].left <= 64 - 48
            seen.append(r)

    train_zodi(init_segmodel(), _pairs(6), TrainConfig(epochs=4), hook)
    assert len(seen) == 24
    assert {r["image"].flip for r in seen} == {True, False}
    # photometric jitter is drawn per image
    assert any(not np.array_equal(r["jitter_image"], r["jitter_generated"]) for r in seen)


def test_applied_crop_keeps_pixels_and_labels_aligned():
    x = torch.arange(2 * 32 * 64, dtype=torch.float32).view(2, 32, 64)
    y = torch.arange(32 * 64).view(32, 64)
    from zodi.adaptation import SpatialAug

    aug = SpatialAug(flip=True, top=3, left=7, height=24, width=48)
    cx, cy = aug.apply(x), aug.apply(y)
    assert cx.shape == (2, 24, 48) and cy.shape == (24, 48)
    assert cy[0, 0] == y[3, 7 + 47] and cx[1, 5, 9] == x[1, 8, 7 + 47 - 9]
