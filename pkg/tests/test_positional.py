import numpy as np
import pytest

from nucleimim import autodiff as ad
from nucleimim.positional import (PatchGeometry, add_positions, box_geometries, encode_geometry, encode_position,
                                  gamma, grid_geometries)


def test_gamma_at_zero_and_one():
    np.testing.assert_allclose(gamma(0.0, 64), np.tile([0.0, 1.0], 8), atol=1e-15)
    expect = np.tile([0.0, 1.0], 8)
    expect[1] = -1.0
    np.testing.assert_allclose(gamma(1.0, 64), expect, atol=1e-12)


def test_gamma_length_and_bad_dim():
    assert gamma(0.3, 96).shape == (24,)
    assert encode_position(PatchGeometry(0.5, 0.5, 0.1, 0.1), 96).shape == (96,)
    with pytest.raises(ValueError):
        gamma(0.3, 60)


def test_zero_centre_prefix():
    enc = encode_position(PatchGeometry(0.0, 0.0, 0.3, 0.2), 64)
    np.testing.assert_allclose(enc[:32], np.tile([0.0, 1.0], 16), atol=1e-15)


def test_geometry_validation():
    with pytest.raises(ValueError):
        PatchGeometry(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ValueError):
        PatchGeometry(1.2, 0.5, 0.1, 0.1)


def test_grid_geometries():
    np.testing.assert_allclose(grid_geometries(1, 1), [[0.5, 0.5, 1.0, 1.0]])
    np.testing.assert_allclose(grid_geometries(2, 2)[:, :2], [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
    g = grid_geometries(28, 28)
    assert g.shape == (784, 4)
    np.testing.assert_allclose(g[:, 2:], 1 / 28)


def test_first_cell_by_definition():
    g = grid_geometries(28, 28)[0]
    np.testing.assert_allclose(g, np.array([8, 8, 16, 16]) / 448)
    freqs = 2.0 ** np.arange(96) * np.pi
    manual = []
    for v in g:
        for f in freqs[:768 // 8]:
            manual += [np.sin(f * v), np.cos(f * v)]
    np.testing.assert_allclose(encode_geometry(g, 768), manual, atol=1e-12)


def test_pairwise_distinct_grid_and_boxes():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 400, size=(100, 2))
    wh = rng.uniform(4, 40, size=(100, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    geoms = np.concatenate([grid_geometries(28, 28), box_geometries(boxes, 448, 448)])
    enc = encode_geometry(geoms, 64)
    assert len({row.tobytes() for row in enc}) == len(enc)


def test_box_geometry_clips():
    g = box_geometries([[-10, 0, 10, 20]], 40, 40)[0]
    np.testing.assert_allclose(g, [5 / 40, 10 / 40, 10 / 40, 20 / 40])


def test_add_positions_identities_and_oracle():
    rng = np.random.default_rng(1)
    b, s, d = 2, 5, 8
    h0 = rng.normal(size=(b, s, d)).astype(np.float32)
    pad = np.zeros((b, s), bool)
    zero_enc = np.zeros((b, s - 1, d))
    np.testing.assert_array_equal(add_positions(h0, zero_enc, np.zeros(d), pad).data, h0)
    enc = rng.normal(size=(b, s - 1, d))
    cls = rng.normal(size=d)
    out = add_positions(np.zeros((b, s, d)), enc, cls, pad).data
    np.testing.assert_allclose(out[:, 1:], enc, rtol=1e-6)
    np.testing.assert_allclose(out[:, 0], np.broadcast_to(cls, (b, d)), rtol=1e-6)
    out = add_positions(h0, enc, cls, pad).data
    for i in range(b):
        for j in range(1, s):
            for k in range(d):
                assert out[i, j, k] == np.float32(h0[i, j, k] + np.float32(enc[i, j - 1, k]))
    with pytest.raises(ValueError):
        add_positions(h0, enc[:, :-1], cls, pad)


def test_pad_rows_bit_identical():
    rng = np.random.default_rng(2)
    h0 = rng.normal(size=(1, 6, 8)).astype(np.float32)
    pad = np.array([[False, False, False, False, True, True]])
    out = add_positions(h0, rng.normal(size=(1, 5, 8)), rng.normal(size=8), pad).data
    assert out[0, 4:].tobytes() == h0[0, 4:].tobytes()
    with ad.precision(np.float64):
        h64 = h0.astype(np.float64)
        out = add_positions(h64, rng.normal(size=(1, 5, 8)), rng.normal(size=8), pad).data
        assert out[0, 4:].tobytes() == h64[0, 4:].tobytes()
