import numpy as np
import pytest

import oracles
from voxlift.errors import InvalidArgument
from voxlift.geometry import CameraView, Extrinsics, Intrinsics
from voxlift.lift import (encode_coordinate_token, lift_views, make_3d_patches, pos_encode,
                          token_budget)
from voxlift.mlp import MlpWeights

# seed-0 MlpWeights.init(rng, 3, 8, 4), evaluated with the loop oracle
SEED0_AT_123 = [-0.622950024, 0.882472371, -0.226418688, -0.456344039]
SEED0_AT_COORD = [-0.491366397, 0.388416365, -0.525040514, 0.067414472]


def seed0_mlp():
    return MlpWeights.init(np.random.default_rng(0), 3, 8, 4)


def test_zero_weights_give_zero_embeddings(rng):
    m = MlpWeights.zeros(3, 5, 7)
    out = pos_encode(m, rng.normal(size=(10, 3)) * 100)
    assert out.shape == (10, 7)
    assert not out.any()


def test_identity_weights_pass_coordinates():
    eye = np.eye(3, dtype=np.float32)
    z = np.zeros(3, dtype=np.float32)
    m = MlpWeights(eye, z, eye.copy(), z.copy())
    pts = np.array([[0.5, 1.0, 2.0], [3.0, 0.25, 7.0]], dtype=np.float32)
    np.testing.assert_array_equal(pos_encode(m, pts), pts)


def test_seed0_values_match_frozen_oracle():
    m = seed0_mlp()
    np.testing.assert_allclose(pos_encode(m, np.array([[1.0, 2.0, 3.0]]))[0], SEED0_AT_123, atol=1e-6)
    tok = encode_coordinate_token(m, (0.5, -0.5, 2.0))
    np.testing.assert_allclose(tok.embedding, SEED0_AT_COORD, atol=1e-6)


def test_loop_oracle_agrees_on_random_inputs(rng):
    m = MlpWeights.init(rng, 3, 16, 8)
    pts = rng.normal(size=(5, 3)).astype(np.float32)
    got = pos_encode(m, pts)
    w = [m.w1.tolist(), m.b1.tolist(), m.w2.tolist(), m.b2.tolist()]
    for i in range(5):
        np.testing.assert_allclose(got[i], oracles.mlp(pts[i].tolist(), *w), atol=1e-5)


def test_coordinate_token_equals_patch_row():
    m = seed0_mlp()
    p = np.array([[0.3, -1.2, 4.5], [1.0, 1.0, 1.0]], dtype=np.float32)
    assert np.array_equal(encode_coordinate_token(m, p[1]).embedding, pos_encode(m, p)[1])


def test_make_3d_patches():
    r = np.random.default_rng(0)
    f = r.normal(size=(4, 8)).astype(np.float32)
    e = r.normal(size=(4, 8)).astype(np.float32)
    assert np.array_equal(make_3d_patches(f, np.zeros_like(f)), f)
    assert not make_3d_patches(f, -f).any()
    out = make_3d_patches(f, e)
    for i in range(4):
        for j in range(8):
            assert out[i, j] == np.float32(f[i, j] + e[i, j])
    with pytest.raises(InvalidArgument):
        make_3d_patches(f, e[:, :4])


def test_pos_encode_rejects_bad_shapes():
    with pytest.raises(InvalidArgument):
        pos_encode(seed0_mlp(), np.zeros((4, 2)))
    with pytest.raises(InvalidArgument):
        pos_encode(MlpWeights.zeros(4, 4, 4), np.zeros((4, 3)))


def test_lift_drops_invalid_and_orders_tokens(rng):
    intr = Intrinsics(10.0, 10.0, 14.0, 14.0, 28, 28)
    d0 = np.full((28, 28), 2.0)
    d0[7, 7] = 0.0  # patch (0, 0)
    feats = rng.normal(size=(2, 2, 2, 4)).astype(np.float32)
    views = [CameraView(intr, Extrinsics.identity(), d0, feats[0], 14),
             CameraView(intr, Extrinsics.identity(), np.full((28, 28), 3.0), feats[1], 14)]
    out = lift_views(views, MlpWeights.zeros(3, 4, 4))
    assert len(out) == 7
    assert out.source.tolist()[:3] == [[0, 0, 1], [0, 1, 0], [0, 1, 1]]
    assert np.array_equal(out.features[0], feats[0, 0, 1])
    assert np.array_equal(out.features[3:], feats[1].reshape(4, 4))


def test_token_budget_table():
    assert [token_budget(v) for v in (16, 20, 24, 40)] == [9216, 11520, 13824, 23040]
