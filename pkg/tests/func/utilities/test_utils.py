"""Test general utilities: cosine similarity, hashing and file writing."""

import numpy as np
import pytest

from peftscout.utilities import utils


def test_cosine_similarity():
    """Cosine similarity of non-zero vectors."""
    assert utils.cosine_similarity(np.array([1, 0, 1]), np.array([1, 0, 1])) == pytest.approx(1.0)
    assert utils.cosine_similarity(np.array([1, 0]), np.array([0, 1])) == 0.0
    assert utils.cosine_similarity(np.array([1, 1]), np.array([1, 0])) == pytest.approx(
        1 / np.sqrt(2)
    )
    assert utils.cosine_similarity(np.array([1.0]), np.array([-2.0])) == pytest.approx(-1.0)


def test_cosine_similarity_zero_vectors():
    """Two zero vectors are identical, one zero vector shares nothing."""
    assert utils.cosine_similarity(np.zeros(3), np.zeros(3)) == 1.0
    assert utils.cosine_similarity(np.zeros(3), np.ones(3)) == 0.0
    assert utils.cosine_similarity(np.ones(3), np.zeros(3)) == 0.0


def test_cosine_similarity_value_error():
    """Raise a value error for vectors of different length."""
    with pytest.raises(ValueError):
        utils.cosine_similarity(np.ones(2), np.ones(3))


def test_canonical_json():
    """Keys are sorted and whitespace is dropped."""
    assert utils.canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def test_content_hash():
    """Key order does not matter, content does."""
    h1 = utils.content_hash({"a": 1, "b": 2})
    h2 = utils.content_hash({"b": 2, "a": 1})
    assert h1 == h2
    assert len(h1) == 64
    assert utils.content_hash({"a": 1, "b": 3}) != h1


def test_atomic_write_text(tmp_path):
    """Text is written with LF endings, parents are created, no temporary remains."""
    fname = tmp_path.joinpath("sub", "file.txt")
    ret = utils.atomic_write_text(fname, "line 1\nline 2\n")
    assert ret == fname
    assert fname.read_bytes() == b"line 1\nline 2\n"
    assert [p.name for p in fname.parent.iterdir()] == ["file.txt"]


def test_atomic_write_text_overwrite(tmp_path):
    """An existing file is replaced."""
    fname = tmp_path.joinpath("file.txt")
    fname.write_text("old")
    utils.atomic_write_text(fname, "new")
    assert fname.read_text() == "new"
