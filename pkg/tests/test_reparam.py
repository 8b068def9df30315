import numpy as np
import pytest

from capdistill import metrics as M
from capdistill import network as N
from capdistill import reparam as R
from capdistill import tensor as T
from capdistill.tensor import ShapeError, Tensor

from conftest import randomize, small_config


def _norm(gamma, beta, mean, var):
    n = N.AffineNorm(len(gamma))
    n.gamma.data = np.asarray(gamma, float)
    n.beta.data = np.asarray(beta, float)
    n.running_mean = np.asarray(mean, float)
    n.running_var = np.asarray(var, float)
    return n


# --- fold ---------------------------------------------------------------------------
def test_fold_identity_norm(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    norm = _norm([1, 1], [0, 0], [0, 0], [1 - 1e-5] * 2)
    wf, bf = R.fold_norm(w, None, norm)
    np.testing.assert_allclose(wf, w, rtol=1e-15)
    assert np.all(bf == 0)


def test_fold_pure_scale(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    wf, _ = R.fold_norm(w, None, _norm([2, 2], [0, 0], [0, 0], [1 - 1e-5] * 2))
    np.testing.assert_allclose(wf, 2 * w, rtol=1e-15)


def test_fold_forward_equivalence(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    norm = _norm(rng.uniform(0.5, 2, 4), rng.standard_normal(4), rng.standard_normal(4), rng.uniform(0.2, 2, 4))
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    ref = norm(T.conv2d(x, Tensor(w), padding=1), train=False).data
    wf, bf = R.fold_norm(w, None, norm)
    got = T.conv2d(x, Tensor(wf), Tensor(bf), padding=1).data
    assert np.abs(got - ref).max() < 1e-10


def test_fold_rejects_nonpositive_variance(rng):
    with pytest.raises(ValueError):
        R.fold_norm(np.ones((1, 1, 3, 3)), None, _norm([1], [0], [0], [-1.0]))


# --- prune ---------------------------------------------------------------------------------
def test_prune_identity_keeps_all():
    slim, kept, forced = R.prune_compactor(np.eye(5), 1e-5)
    assert kept.tolist() == list(range(5)) and not forced and np.array_equal(slim, np.eye(5))


def test_prune_threshold():
    w = np.array([[1e-6, 0.0], [0.3, 0.4]])
    slim, kept, forced = R.prune_compactor(w, 1e-5)
    assert kept.tolist() == [1] and slim.shape == (1, 2) and not forced


def test_prune_norm_scan_oracle(rng):
    w = rng.standard_normal((12, 12)) * (rng.uniform(size=(12, 1)) < 0.5) * 1e-3
    w[rng.integers(0, 12, 3)] *= 1e-4
    _, kept, _ = R.prune_compactor(w, 1e-5)
    want = [i for i in range(12) if np.sqrt(sum(v * v for v in w[i])) >= 1e-5]
    assert kept.tolist() == want


def test_prune_forced_keeps_largest():
    w = np.diag([1e-7, 3e-7, 2e-7])
    _, kept, forced = R.prune_compactor(w, 1e-5)
    assert forced and kept.tolist() == [1]


def test_prune_monotone_in_lambda(rng):
    w = rng.standard_normal((16, 16)) * np.logspace(-8, 0, 16)[:, None]
    sizes = [len(R.prune_compactor(w, lam)[1]) for lam in np.logspace(-9, 1, 30)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


# --- merge ---------------------------------------------------------------------------------------
def test_merge_identity(rng):
    w, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    wm, bm = R.merge(w, b, np.eye(3))
    assert np.array_equal(wm, w) and np.array_equal(bm, b)


def test_merge_linear_combination(rng):
    w, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)
    a, c = 0.7, -1.3
    wm, bm = R.merge(w, b, np.array([[a, c]]))
    np.testing.assert_allclose(wm[0], a * w[0] + c * w[1], rtol=1e-15)
    np.testing.assert_allclose(bm[0], a * b[0] + c * b[1], rtol=1e-15)


def test_merge_forward_equivalence(rng):
    w, b = rng.standard_normal((8, 3, 3, 3)), rng.standard_normal(8)
    comp = rng.standard_normal((3, 8))
    wm, bm = R.merge(w, b, comp)
    worst = 0.0
    for _ in range(50):
        x = Tensor(rng.standard_normal((1, 3, 5, 5)))
        ref = T.channel_mix(T.conv2d(x, Tensor(w), Tensor(b), padding=1), Tensor(comp)).data
        got = T.conv2d(x, Tensor(wm), Tensor(bm), padding=1).data
        worst = max(worst, np.abs(got - ref).max())
    assert worst < 1e-10


def test_merge_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        R.merge(np.zeros((4, 2, 3, 3)), np.zeros(4), np.zeros((2, 3)))


# --- thin -------------------------------------------------------------------------------------------
def test_thin_all_kept(rng):
    w = rng.standard_normal((5, 3, 1, 1))
    assert np.array_equal(R.thin_downstream(w, [0, 1, 2]), w)


def test_thin_single(rng):
    w = rng.standard_normal((4, 2, 1, 1))
    assert np.array_equal(R.thin_downstream(w, [1]), w[:, 1:2])
    with pytest.raises(ValueError):
        R.thin_downstream(w, [])


def test_thin_zero_forcing_oracle(rng):
    w = rng.standard_normal((6, 8, 1, 1))
    kept = np.sort(rng.choice(8, 3, replace=False))
    h = rng.standard_normal((2, 8, 4, 4))
    hz = h.copy()
    hz[:, np.setdiff1d(np.arange(8), kept)] = 0.0
    ref = T.conv2d(Tensor(hz), Tensor(w)).data
    got = T.conv2d(Tensor(h[:, kept]), Tensor(R.thin_downstream(w, kept))).data
    assert np.abs(got - ref).max() < 1e-10


# --- whole model -----------------------------------------------------------------------------------
def test_convert_untrained_identity():
    student = N.build_model(N.ModelConfig(), 0)
    slim, plan, rep = R.convert_model(student)
    assert all(b.E == b.D for b in plan.blocks)
    assert rep.max_dev_heavy < 1e-10 and rep.max_dev_zero_forced < 1e-10
    assert plan.params_slim == M.count_params(slim)


def test_convert_zeroed_rows(rng):
    student = randomize(N.build_model(small_config(), 1), rng)
    for b in student.blocks:
        b.compactor.weight.data[rng.choice(b.mid_channels, 2, replace=False)] = 0.0
    slim, plan, rep = R.convert_model(student)
    assert [b.E for b in plan.blocks] == [b.mid_channels - 2 for b in student.blocks]
    assert rep.max_dev_zero_forced < 1e-10 and rep.max_dev_heavy < 1e-10
    heavy = N.build_model(N.ModelConfig.from_dict({**student.config.to_dict(), "with_compactors": False}), 0)
    assert M.count_params(slim) < M.count_params(heavy)


def test_convert_shortcuts_untouched(rng):
    student = randomize(N.build_model(N.ModelConfig(), 0), rng)
    for b in student.blocks:
        b.compactor.weight.data[: b.mid_channels // 2] *= 1e-7
    slim, plan, _ = R.convert_model(student)
    for sb, hb in zip(slim.blocks, student.blocks):
        assert sb.out_channels == hb.out_channels
        assert (sb.proj is None) == (hb.proj is None)
        if sb.proj is not None:
            assert np.array_equal(sb.proj.weight.data, hb.proj.weight.data)


def test_plan_matches_counts(rng):
    student = randomize(N.build_model(N.ModelConfig(), 0), rng)
    for b in student.blocks:
        b.compactor.weight.data[rng.choice(b.mid_channels, b.mid_channels // 3, replace=False)] = 0.0
    slim, plan, _ = R.convert_model(student)
    assert plan.params_slim == M.count_params(slim)
    assert plan.flops_slim == M.count_flops(slim, (3, 32, 32))
    assert plan.params_student == M.count_params(student)
    assert plan.flops_student == M.count_flops(student, (3, 32, 32))
    assert plan.flops_slim < plan.flops_heavy_backbone


def test_convert_rejects_teacher():
    with pytest.raises(R.ConversionError, match="no compactors"):
        R.convert_model(N.build_model(small_config(with_compactors=False), 0))


def test_slim_state_roundtrip(rng):
    student = randomize(N.build_model(small_config(), 0), rng)
    student.blocks[1].compactor.weight.data[:3] = 0.0
    slim, _, _ = R.convert_model(student)
    again = R.slim_from_state(student.config, slim.state_dict())
    x = rng.standard_normal((2, 3, 8, 8))
    assert np.array_equal(slim(x).embedding.data, again(x).embedding.data)


def test_report_text(rng):
    student = N.build_model(small_config(), 0)
    _, _, rep = R.convert_model(student, 0.0)
    text = rep.to_text()
    assert "lambda=0.000e+00" in text and "MP_heavy_backbone=" in text and "flops_convention" in text
