import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from voxlift import gradcheck
from voxlift.errors import InvalidArgument
from voxlift.mlp import MlpWeights
from voxlift.objective import (Box3D, box_head_loss, cosine_scores, diou3d, diou_loss, info_nce,
                               iou3d, match, match_arrays, train_box_head)


def cube(x=0.0, y=0.0, z=0.0, s=1.0):
    return Box3D(np.array([x, y, z]), np.array([s, s, s]))


def test_iou_examples():
    assert iou3d(cube(), cube()) == 1.0
    assert iou3d(cube(), cube(5)) == 0.0
    assert iou3d(cube(), cube(0.5)) == pytest.approx(1 / 3)


def test_touching_cubes_diou():
    # IoU 0; centers 1 apart; enclosing box 2x1x1 has squared diagonal 6
    loss, _ = diou_loss(cube(), cube(1.0))
    assert iou3d(cube(), cube(1.0)) == 0.0
    assert loss == pytest.approx(1 + 1 / 6, abs=1e-12)


def test_diou_zero_at_identity():
    b = Box3D(np.array([0.3, -1.0, 2.0]), np.array([0.5, 1.5, 0.7]))
    loss, g = diou_loss(b, b)
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_iou_properties(seed):
    r = np.random.default_rng(seed)
    a = Box3D(r.uniform(-1, 1, 3), r.uniform(0.1, 2, 3))
    b = Box3D(r.uniform(-1, 1, 3), r.uniform(0.1, 2, 3))
    i = iou3d(a, b)
    assert i == pytest.approx(iou3d(b, a), abs=1e-15)
    assert 0.0 <= i <= 1.0
    assert -1.0 <= diou3d(a, b) <= i + 1e-15


def test_box_validation():
    with pytest.raises(InvalidArgument):
        Box3D(np.zeros(3), np.array([1.0, 0.0, 1.0]))


def test_diou_gradient_finite_differences():
    res = gradcheck.run("diou", 100, 1e-4, seed=1)
    assert res.passed, res.max_rel_error


def test_infonce_uniform_is_log_n():
    q = np.tile(np.array([[0.3, -1.0, 2.0]]), (7, 1))
    loss, _, _ = info_nce(q, np.array([1.0, 0.5, -0.2]), 3, 0.07)
    assert loss == math.log(7)


def test_infonce_single_query():
    loss, gq, gl = info_nce(np.array([[1.0, 2.0]]), np.array([0.5, 0.1]), 0)
    assert loss == 0.0
    assert not gq.any() and not gl.any()


def test_infonce_gradient_finite_differences():
    res = gradcheck.run("infonce", 100, 1e-4, seed=2)
    assert res.passed, res.max_rel_error


def test_infonce_rejects_zero_norm():
    with pytest.raises(InvalidArgument):
        info_nce(np.zeros((2, 3)), np.ones(3), 0)
    with pytest.raises(InvalidArgument):
        info_nce(np.ones((2, 3)), np.ones(3), 0, temperature=0.0)


def test_cosine_scores_zero_rows():
    s = cosine_scores(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([1.0, 0.0]))
    assert s.tolist() == [0.0, 1.0]


def test_match_trivial_and_permuted(rng):
    assert match([cube()], [cube(3)]).pairs == [(0, 0)]
    gts = [cube(x, rng.uniform(), 0, s) for x, s in [(0, 1), (3, 0.5), (-2, 2), (6, 1)]]
    perm = [2, 0, 3, 1]
    res = match([gts[p] for p in perm], gts)
    assert res.pairs == [(i, p) for i, p in enumerate(perm)]
    assert res.cost == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_match_exhaustive(seed):
    r = np.random.default_rng(seed)
    n_p, n_g = r.integers(1, 8, size=2)
    pc, ps = r.uniform(-2, 2, (n_p, 3)), r.uniform(0.2, 2, (n_p, 3))
    gc, gs = r.uniform(-2, 2, (n_g, 3)), r.uniform(0.2, 2, (n_g, 3))
    res = match_arrays(pc, ps, gc, gs)
    cost = [[diou_loss(Box3D(pc[i], ps[i]), Box3D(gc[j], gs[j]))[0] for j in range(n_g)]
            for i in range(n_p)]
    assert res.cost == pytest.approx(oracles.best_permutation_cost(cost), abs=1e-9)
    assert len(res.pairs) == min(n_p, n_g)


def test_box_head_chain_gradient():
    res = gradcheck.run("boxhead", 3, 1e-3, seed=0)
    assert res.passed, res.max_rel_error


def test_zero_lr_is_flat():
    r = np.random.default_rng(0)
    scenes = [gradcheck.random_training_scene(r, 10, 6, 3) for _ in range(2)]
    head = MlpWeights.init(r, 6, 6, 6)
    traj = train_box_head(scenes, head, 5, 0.0).trajectory
    assert len(traj) == 6
    assert len({row[1] for row in traj}) == 1


def test_training_reduces_loss():
    r = np.random.default_rng(0)
    scenes = [gradcheck.random_training_scene(r, 16, 8, 3) for _ in range(3)]
    head = MlpWeights.init(r, 8, 8, 6)
    traj = train_box_head(scenes, head, 100, 0.03).trajectory
    assert traj[-1][1] < traj[0][1]


def test_aux_loss_reports_infonce():
    r = np.random.default_rng(3)
    scenes = [gradcheck.random_training_scene(r, 8, 4, 2, layers=2)]
    head = MlpWeights.init(r, 4, 4, 6)
    a = box_head_loss(scenes, head, aux_loss=True)
    b = box_head_loss(scenes, head, aux_loss=False)
    assert a.infonce_loss == b.infonce_loss
    assert gradcheck.check_box_head(scenes, head.astype(np.float64), aux_loss=True) < 1e-3
