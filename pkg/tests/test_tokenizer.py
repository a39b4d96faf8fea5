import logging

import numpy as np
import pytest

from nucleimim.data import crop_resize
from nucleimim.rng import Rng
from nucleimim.tokenizer import (LUMA, Codebook, LuminanceTokenizer, VQTokenizer, _kmeans_pp, collect_training_cells,
                                 nearest_centroid, tokenize_image, tokenize_instance, train_vq_codebook)


def test_constant_image_luminance():
    tok = tokenize_image(np.full((32, 32, 3), 0.37), (4, 4), LuminanceTokenizer(64))
    assert np.unique(tok).tolist() == [int(0.37 * 64)]
    assert tokenize_image(np.ones((8, 8, 3)), (2, 2), LuminanceTokenizer(64)).max() == 63


def test_indivisible_grid_errors():
    with pytest.raises(ValueError, match="not divisible"):
        tokenize_image(np.zeros((30, 32, 3)), (4, 4), LuminanceTokenizer(8))


def test_two_tone_vq():
    img = np.zeros((16, 16, 3))
    img[:, 8:] = [0.9, 0.2, 0.4]
    cells = collect_training_cells([img], (4, 4))
    book = train_vq_codebook(cells, 2, 10, Rng(0))
    tok = tokenize_image(img, (4, 4), VQTokenizer(book))
    assert len(np.unique(tok)) == 2
    assert (tok[:, :2] == tok[0, 0]).all() and (tok[:, 2:] == tok[0, 3]).all()


def test_instance_constant_and_t1():
    img = np.full((40, 40, 3), 0.6)
    lum = LuminanceTokenizer(16)
    tok = tokenize_instance(img, (3, 4, 20, 30), lum)
    assert tok.shape == (2, 2) and len(np.unique(tok)) == 1
    img = np.random.default_rng(0).random((40, 40, 3))
    one = tokenize_instance(img, (3, 4, 20, 30), lum, t=1)
    resized = crop_resize(img, (3, 4, 20, 30), 32, 32)
    assert one.tolist() == tokenize_image(resized, (1, 1), lum).tolist()


def test_instance_quadrant_mean_oracle():
    rng = np.random.default_rng(1)
    img = rng.random((48, 48, 3))
    box = (5.5, 7.0, 41.0, 30.5)
    crop = crop_resize(img, box, 32, 32)
    lum = crop @ LUMA
    expect = [[int(min(np.floor(lum[r * 16:(r + 1) * 16, c * 16:(c + 1) * 16].mean() * 64), 63)) for c in range(2)]
              for r in range(2)]
    assert tokenize_instance(img, box, LuminanceTokenizer(64)).tolist() == expect


def test_degenerate_box_errors():
    with pytest.raises(ValueError, match="degenerate"):
        tokenize_instance(np.zeros((8, 8, 3)), (3, 3, 3, 5), LuminanceTokenizer(4))


def test_exact_cover_zero_inertia():
    rng = np.random.default_rng(2)
    base = rng.random((8, 12))
    data = np.repeat(base, 5, axis=0)
    rng.shuffle(data)
    book = train_vq_codebook(data, 8, 50, Rng(1))
    assert book.inertia_trace[-1] == pytest.approx(0.0, abs=1e-18)


def test_zero_iterations_is_initialisation():
    x = np.random.default_rng(3).random((200, 6))
    book = train_vq_codebook(x, 10, 0, Rng(4))
    np.testing.assert_array_equal(book.centroids, _kmeans_pp(x, 10, Rng(4)))
    assert book.iterations == 0 and len(book.inertia_trace) == 1


def test_inertia_monotone_and_deterministic():
    x = np.random.default_rng(5).random((1000, 12))
    book = train_vq_codebook(x, 16, 40, Rng(6))
    trace = np.array(book.inertia_trace)
    assert (np.diff(trace) <= 1e-9 * trace[0]).all()
    again = train_vq_codebook(x, 16, 40, Rng(6))
    assert again.centroids.tobytes() == book.centroids.tobytes()


def test_few_samples_warns(caplog):
    with caplog.at_level(logging.WARNING):
        book = train_vq_codebook(np.eye(3), 5, 10, Rng(0), cell_size=1)
    assert "duplicating" in caplog.text
    assert book.vocab_size == 5


def test_nearest_centroid_exhaustive_oracle():
    rng = np.random.default_rng(7)
    x = rng.random((300, 5))
    cents = rng.random((17, 5))
    cents[3] = cents[11]
    expect = [int(np.argmin([((row - c) ** 2).sum() for c in cents])) for row in x]
    assert nearest_centroid(x, cents).tolist() == expect
    ties = nearest_centroid(cents[[11]], cents)
    assert ties.tolist() == [3]


def test_vq_resamples_instance_cells():
    book = Codebook(np.random.default_rng(8).random((4, 8 * 8 * 3)), cell_size=8)
    crop_cells = np.random.default_rng(9).random((4, 16, 16, 3))
    tok = VQTokenizer(book).encode_cells(crop_cells)
    assert tok.shape == (4,) and tok.max() < 4
