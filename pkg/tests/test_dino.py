import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from eedvit.data import gen_object_dataset
from eedvit.dino import (
    DinoConfig,
    DinoHead,
    center_update,
    dino_loss,
    format_train_config,
    init_state,
    learning_rate,
    load_state,
    loss_pairs,
    multi_crop,
    parse_train_config,
    random_resized_crop,
    save_state,
    teacher_ema_update,
    teacher_entropy,
    teacher_probs,
    train,
)
from eedvit.errors import NonFiniteLoss, ShapeMismatch
from eedvit.vit import ViTConfig

TINY_VIT = ViTConfig(image_size=16, patch_size=4, embed_dim=16, num_layers=3, num_heads=2)
TINY_DINO = DinoConfig(out_dim=32, head_hidden=32, head_bottleneck=16, batch_size=8, local_crop_size=8)


def test_config_invariants():
    with pytest.raises(ValueError):
        DinoConfig(teacher_temp=0.2, student_temp=0.1)
    with pytest.raises(ValueError):
        DinoConfig(teacher_momentum=1.0)
    with pytest.raises(ValueError):
        DinoConfig(center_momentum=0.0)


def test_config_file_round_trip():
    vit, dino = ViTConfig(embed_dim=32, num_heads=4), DinoConfig(out_dim=128, use_centering=False)
    text = format_train_config(vit, dino, {"steps": "10"})
    v2, d2, opts = parse_train_config(text)
    assert v2 == vit and d2 == dino and opts == {"steps": "10"}


def test_config_file_errors():
    with pytest.raises(ValueError, match="unknown key"):
        parse_train_config("vit.depth = 3")
    with pytest.raises(ValueError, match="section"):
        parse_train_config("foo.bar = 1")
    with pytest.raises(ValueError, match=":2:"):
        parse_train_config("# comment\nvit.embed_dim = many")


# ---------------------------------------------------------------- multi-crop


def test_no_local_crops_gives_two_views(rng):
    views, rects = multi_crop(np.zeros((32, 32, 3), np.float32), rng, DinoConfig(num_local_crops=0))
    assert len(views) == 2 and len(rects) == 2
    assert all(v.shape == (32, 32, 3) for v in views)


def test_view_sizes(rng):
    cfg = DinoConfig(num_local_crops=3, local_crop_size=16)
    views, _ = multi_crop(np.random.default_rng(0).random((32, 32, 3)).astype(np.float32), rng, cfg)
    assert [v.shape[0] for v in views] == [32, 32, 16, 16, 16]
    assert all(v.min() >= 0 and v.max() <= 1 for v in views)


def test_crops_are_seeded():
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    a = multi_crop(img, np.random.default_rng(5), DinoConfig())
    b = multi_crop(img, np.random.default_rng(5), DinoConfig())
    assert a[1] == b[1]
    assert all(np.array_equal(x, y) for x, y in zip(a[0], b[0]))


def test_crop_rectangles_stay_inside():
    rng = np.random.default_rng(99)
    for scale in ((0.4, 1.0), (0.1, 0.4), (0.9, 1.0)):
        for _ in range(100_000 // 3):
            top, left, h, w = random_resized_crop(rng, 32, 32, scale)
            assert 0 <= top and 0 <= left and h >= 1 and w >= 1 and top + h <= 32 and left + w <= 32


# --------------------------------------------------------------------- loss


def test_pair_count():
    assert loss_pairs(2, 4) == [(0, 1), (0, 2), (0, 3), (1, 0), (1, 2), (1, 3)]
    brute = [(t, s) for t in range(2) for s in range(4) if t != s]
    assert len(loss_pairs(2, 4)) == len(brute) == 6


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_uniform_teacher_lower_bound(seed):
    g = torch.Generator().manual_seed(seed)
    k = 16
    cfg = DinoConfig()
    teacher = [torch.zeros(3, k), torch.zeros(3, k)]
    student = [torch.randn(3, k, generator=g) for _ in range(4)]
    assert float(dino_loss(student, teacher, cfg, None)) >= math.log(k) - 1e-9
    flat = [torch.zeros(3, k) for _ in range(4)]
    assert float(dino_loss(flat, teacher, cfg, None)) == pytest.approx(math.log(k), abs=1e-6)


def test_sharp_match_goes_to_zero():
    k = 8
    logits = torch.full((1, k), -1.0, dtype=torch.float64)
    logits[0, 3] = 1.0
    values = []
    for scale in (1.0, 10.0, 100.0):
        s = [logits * scale] * 3
        t = [logits * scale] * 2
        values.append(float(dino_loss(s, t, DinoConfig(), None)))
    assert values[0] > values[1] > values[2] and values[2] < 1e-12


def test_loss_matches_pairwise_oracle(rng):
    cfg = DinoConfig()
    s = [torch.from_numpy(rng.standard_normal((4, 10))) for _ in range(4)]
    t = [torch.from_numpy(rng.standard_normal((4, 10))) for _ in range(2)]
    c = torch.from_numpy(rng.standard_normal(10))
    total = 0.0
    for ti, si in loss_pairs(2, 4):
        pt = np.exp((t[ti] - c).numpy() / cfg.teacher_temp)
        pt /= pt.sum(axis=1, keepdims=True)
        z = s[si].numpy() / cfg.student_temp
        logps = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total += float(np.mean(-(pt * logps).sum(axis=1)))
    assert float(dino_loss(s, t, cfg, c)) == pytest.approx(total / 6, rel=1e-12)


def test_loss_shift_invariance(rng):
    s = [torch.from_numpy(rng.standard_normal((4, 10))) for _ in range(3)]
    t = [torch.from_numpy(rng.standard_normal((4, 10))) for _ in range(2)]
    a = dino_loss(s, t, DinoConfig(), None)
    b = dino_loss([x + 7.5 for x in s], t, DinoConfig(), None)
    assert abs(float(a - b)) < 1e-6


def test_probabilities_are_distributions(rng):
    p = teacher_probs(torch.from_numpy(rng.standard_normal((6, 20))), torch.zeros(20), 0.04)
    assert torch.allclose(p.sum(-1), torch.ones(6, dtype=p.dtype), atol=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dino_loss([torch.zeros(2, 4), torch.zeros(2, 5)], [torch.zeros(2, 4)] * 2, DinoConfig(), None)
    with pytest.raises(ShapeMismatch):
        dino_loss([torch.zeros(2, 4)] * 3, [torch.zeros(2, 4)] * 2, DinoConfig(), torch.zeros(5))


def test_teacher_gets_no_gradient():
    torch.manual_seed(0)
    state = init_state(TINY_VIT, TINY_DINO, seed=0)
    x = torch.rand(2, 3, 16, 16)
    t_out = state.teacher(x)
    assert t_out.grad_fn is None
    s_out = state.student(x)
    loss = dino_loss(list(s_out.chunk(2)), list(t_out.chunk(2)), TINY_DINO, state.center)
    loss.backward()
    assert all(p.grad is None for p in state.teacher.parameters())
    assert not state.center.requires_grad
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in state.student.parameters())


# ------------------------------------------------------------------ EMA etc.


def _pair(seed=0):
    state = init_state(TINY_VIT, TINY_DINO, seed=seed)
    with torch.no_grad():
        for p in state.student.parameters():
            p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(1)))
    return state.teacher, state.student


def _flat(net):
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


def test_ema_extremes():
    teacher, student = _pair()
    before = _flat(teacher).clone()
    teacher_ema_update(teacher, student, 1.0)
    assert torch.equal(_flat(teacher), before)
    teacher_ema_update(teacher, student, 0.0)
    assert torch.equal(_flat(teacher), _flat(student))


def test_ema_geometric_convergence():
    teacher, student = _pair()
    m = 0.9
    gap = float((_flat(teacher) - _flat(student)).norm())
    for _ in range(5):
        teacher_ema_update(teacher, student, m)
        new_gap = float((_flat(teacher) - _flat(student)).norm())
        assert new_gap == pytest.approx(m * gap, rel=1e-5)
        gap = new_gap


def test_ema_linearity():
    t1, student = _pair()
    t2 = copy.deepcopy(t1)
    m = 0.7
    teacher_ema_update(t1, student, m)
    teacher_ema_update(t1, student, m)
    teacher_ema_update(t2, student, m * m)
    assert torch.allclose(_flat(t1), _flat(t2), atol=1e-6)


def test_ema_shape_mismatch():
    a = init_state(TINY_VIT, TINY_DINO).teacher
    b = init_state(TINY_VIT, DinoConfig(out_dim=64, head_hidden=32, head_bottleneck=16)).student
    with pytest.raises(ShapeMismatch):
        teacher_ema_update(a, b, 0.5)


def test_center_update_cases(rng):
    c = torch.from_numpy(rng.standard_normal(5))
    logits = torch.from_numpy(rng.standard_normal((4, 5)))
    assert torch.equal(center_update(c, logits, 1.0), c)
    b = torch.from_numpy(rng.standard_normal(5))
    x = torch.from_numpy(rng.standard_normal(5))
    for _ in range(400):
        x = center_update(x, b.expand(3, 5), 0.9)
    assert torch.allclose(x, b, atol=1e-12)
    with pytest.raises(ValueError):
        center_update(c, torch.zeros(0, 5), 0.9)


def test_center_matches_running_mean_oracle(rng):
    m = 0.9
    c = torch.zeros(6, dtype=torch.float64)
    oracle = [0.0] * 6
    for _ in range(50):
        batch = rng.standard_normal((8, 6))
        c = center_update(c, torch.from_numpy(batch), m)
        for j in range(6):
            oracle[j] = m * oracle[j] + (1 - m) * sum(batch[i, j] for i in range(8)) / 8
    assert np.max(np.abs(c.numpy() - np.array(oracle))) < 1e-12


def test_teacher_entropy_limits():
    k = 16
    assert teacher_entropy(torch.zeros(4, k), None, 0.04) == pytest.approx(math.log(k))
    onehot = torch.full((4, k), -10.0)
    onehot[:, 2] = 10.0
    assert teacher_entropy(onehot, None, 0.04) < 1e-6


def test_head_output_is_bounded():
    head = DinoHead(16, TINY_DINO)
    head.reset_parameters(torch.Generator().manual_seed(0))
    out = head(torch.randn(5, 16))
    assert out.shape == (5, 32) and float(out.detach().abs().max()) <= 1.0 + 1e-6


def test_learning_rate_schedule():
    cfg = DinoConfig(warmup_steps=10)
    assert learning_rate(0, 100, cfg) == pytest.approx(cfg.lr / 10)
    assert learning_rate(9, 100, cfg) == pytest.approx(cfg.lr)
    assert learning_rate(10, 100, cfg) == pytest.approx(cfg.lr)
    assert learning_rate(100, 100, cfg) == pytest.approx(cfg.min_lr)


# --------------------------------------------------------------------- train


@pytest.fixture(scope="module")
def tiny_data():
    ds = gen_object_dataset(0, 16, size=16)
    return ds


def test_zero_epochs_returns_initial_state(tiny_data):
    state, log = train(tiny_data, TINY_VIT, TINY_DINO, epochs=0, seed=3)
    fresh, _ = train(tiny_data, TINY_VIT, TINY_DINO, epochs=0, seed=3)
    assert log == [] and state.step == 0
    assert torch.equal(_flat(state.student), _flat(fresh.student))
    assert torch.equal(_flat(state.teacher), _flat(state.student))


def test_training_is_deterministic(tiny_data):
    a, la = train(tiny_data, TINY_VIT, TINY_DINO, steps=3, seed=1)
    b, lb = train(tiny_data, TINY_VIT, TINY_DINO, steps=3, seed=1)
    assert la == lb and torch.equal(_flat(a.teacher), _flat(b.teacher))
    assert [r["step"] for r in la] == [1, 2, 3]


def test_resume_matches_uninterrupted(tiny_data, tmp_path):
    full, log_full = train(tiny_data, TINY_VIT, TINY_DINO, steps=4, seed=2, total_steps=4)
    half, log_a = train(tiny_data, TINY_VIT, TINY_DINO, steps=2, seed=2, total_steps=4)
    save_state(tmp_path / "ck", half, TINY_VIT, TINY_DINO)
    resumed, _, _, _ = load_state(tmp_path / "ck")
    resumed, log_b = train(tiny_data, TINY_VIT, TINY_DINO, steps=2, seed=2, state=resumed, total_steps=4)
    assert [r["step"] for r in log_a + log_b] == [1, 2, 3, 4]
    assert [r["loss"] for r in log_a + log_b] == pytest.approx([r["loss"] for r in log_full], rel=1e-5)
    assert torch.allclose(_flat(resumed.teacher), _flat(full.teacher), atol=1e-6)


def test_nonfinite_loss_writes_diagnostic(tiny_data, tmp_path):
    state = init_state(TINY_VIT, TINY_DINO, seed=0)
    with torch.no_grad():
        state.student.head.fc1_weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss):
        train(tiny_data, TINY_VIT, TINY_DINO, steps=1, state=state, diagnostic_dir=tmp_path)
    assert (tmp_path / "nonfinite_diagnostic.json").exists()


def test_training_rejects_empty_and_wrong_size(tiny_data):
    with pytest.raises(ValueError):
        train(tiny_data.subset(np.arange(0)), TINY_VIT, TINY_DINO, steps=1)
    with pytest.raises(ShapeMismatch):
        train(tiny_data, ViTConfig(), TINY_DINO, steps=1)


def test_smoke_run_loss_decreases():
    from eedvit.experiments import smoke_run

    losses = smoke_run(seed=0)
    assert len(losses) == 11 and all(math.isfinite(x) for x in losses)
    assert sum(b < a for a, b in zip(losses, losses[1:])) >= 7
