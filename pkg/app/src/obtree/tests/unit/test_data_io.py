# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0
import hashlib
import io

import numpy as np
import pytest
from scipy import sparse

from obtree.data_io import (
    augment,
    file_hash,
    load_libsvm,
    make_rotated_xor,
    make_tree_data,
    parse_libsvm,
    split_dataset,
    write_libsvm,
)
from obtree.exceptions import ConfigError, DataError, DimensionError
from obtree.greedy_init import build_axis_aligned
from obtree.inference import accuracy
from obtree.losses import LossKind
from obtree.tests.conftest import write_dataset, xor_tree


def _parse(text, **kwargs):
    return parse_libsvm(io.StringIO(text), **kwargs)


def _write(dataset):
    buf = io.StringIO()
    write_libsvm(dataset, buf)
    return buf.getvalue()


# ---------- parsing ----------


def test_parse_by_hand():
    data = _parse("1 1:0.5 3:-2\n# comment only\n\n-1 2:1   # trailing\n")
    assert len(data) == 2
    assert data.num_features == 3
    assert data.label_values == (-1.0, 1.0)
    np.testing.assert_array_equal(data.targets, [2, 1])
    np.testing.assert_array_equal(data.X, [[0.5, 0.0, -2.0], [0.0, 1.0, 0.0]])


def test_parse_line_without_features():
    data = _parse("2\n1 1:3\n")
    np.testing.assert_array_equal(data.X, [[0.0], [3.0]])


def test_non_increasing_index_is_located():
    with pytest.raises(DataError) as excinfo:
        _parse("1 3:1 2:1\n")
    assert (excinfo.value.line, excinfo.value.column) == (1, 7)
    assert "line 1" in str(excinfo.value)


@pytest.mark.parametrize(
    "text, line",
    [
        ("1 2:1 x\n", 1),
        ("0 1:1\nabc 1:1\n", 2),
        ("1 0:1\n", 1),
        ("1 a:1\n", 1),
        ("1 1:1\n1 1:abc\n", 2),
        ("1 1:nan\n", 1),
        ("1 1:1 1:2\n", 1),
        ("1 1:1\n\n# note\n1 2:1 1:2\n", 4),
        ("inf 1:1\n", 1),
        ("1 1:0.5\n2 ²:3\n", 2),
        ("1 ١:7\n", 1),
        ("1 1:1_0\n", 1),
        ("1_0 1:1\n", 1),
    ],
)
def test_malformed_lines_are_rejected(text, line):
    with pytest.raises(DataError) as excinfo:
        _parse(text)
    assert excinfo.value.line == line


def test_empty_input():
    with pytest.raises(DataError):
        _parse("")
    with pytest.raises(DataError):
        _parse("# nothing here\n\n")


def test_fixed_label_mapping():
    data = _parse("3 1:1\n1 1:2\n", label_values=(1.0, 2.0, 3.0))
    np.testing.assert_array_equal(data.targets, [3, 1])
    with pytest.raises(DataError) as excinfo:
        _parse("1 1:1\n\n5 1:2\n", label_values=(1.0, 2.0))
    assert excinfo.value.line == 3


def test_fixed_feature_count():
    assert _parse("1 1:1\n", num_features=4).X.shape == (1, 4)
    with pytest.raises(DataError):
        _parse("1 5:1\n", num_features=4)


def test_regression_targets():
    data = _parse("0.5 1:1\n-2 2:3\n", task="sqr")
    assert data.task == LossKind.SQUARED
    assert data.num_classes == 1
    np.testing.assert_array_equal(data.targets, [[0.5], [-2.0]])


def test_round_trip_is_byte_exact(rng):
    lines = []
    for _ in range(1000):
        label = int(rng.integers(1, 4))
        count = int(rng.integers(0, 8))
        indices = np.sort(rng.choice(np.arange(1, 31), size=count, replace=False))
        fields = [str(label)] + [f"{i}:{format(v, '.17g')}" for i, v in zip(indices, 1e3 * rng.standard_normal(count))]
        lines.append(" ".join(fields))
    text = "\n".join(lines) + "\n"
    data = _parse(text)
    assert _write(data) == text
    assert _parse(_write(data)) == data


def test_features_are_stored_as_csr():
    data = _parse("1 1:0 3:2\n2 2:0.5\n")
    assert sparse.isspmatrix_csr(data.matrix)
    np.testing.assert_array_equal(data.matrix.indptr, [0, 2, 3])
    np.testing.assert_array_equal(data.matrix.indices, [0, 2, 1])
    np.testing.assert_array_equal(data.matrix.data, [0.0, 2.0, 0.5])
    assert not data.X.flags.writeable


def test_explicit_zeros_survive_a_round_trip():
    text = "1 1:0 2:3\n2 4:0\n"
    data = _parse(text)
    assert data.matrix.nnz == 3
    assert _write(data) == text
    assert _write(augment(data).subset([1, 0])).startswith("2 4:0 5:-1\n")


def test_files(tmp_path):
    data = make_rotated_xor(20, seed=1)
    path = write_dataset(tmp_path / "xor.svm", data)
    assert load_libsvm(path) == data
    assert file_hash(path) == hashlib.sha256(path.read_bytes()).hexdigest()
    with pytest.raises(OSError):
        load_libsvm(tmp_path / "missing.svm")


# ---------- dataset operations ----------


def test_augment_appends_minus_one():
    data = augment(_parse("1 1:2\n2 2:3\n"))
    assert data.width == 3 and data.num_features == 2
    np.testing.assert_array_equal(data.X, [[2.0, 0.0, -1.0], [0.0, 3.0, -1.0]])
    with pytest.raises(DimensionError):
        augment(data)


def test_subset_and_concat():
    data = make_rotated_xor(10, seed=2)
    head, tail = data.subset(range(4)), data.subset(range(4, 10))
    assert head.concat(tail) == data
    with pytest.raises(DimensionError):
        head.concat(augment(tail))


def test_with_num_features():
    data = _parse("1 1:1\n2 2:1\n")
    wide = data.with_num_features(5)
    assert wide.X.shape == (2, 5)
    with pytest.raises(DimensionError):
        data.with_num_features(1)
    with pytest.raises(DimensionError):
        augment(data).with_num_features(5)


def test_content_hash():
    data = make_rotated_xor(30, seed=4)
    assert data.content_hash() == make_rotated_xor(30, seed=4).content_hash()
    assert data.content_hash() != make_rotated_xor(30, seed=5).content_hash()
    assert data.content_hash() != data.with_num_features(3).content_hash()


@pytest.mark.parametrize("fractions, sizes", [((0.8, 0.2), (80, 20)), ((0.64, 0.16, 0.2), (64, 16, 20))])
def test_split_sizes(fractions, sizes):
    data = make_tree_data(100, 3, 2, 2, seed=0)
    parts = split_dataset(data, fractions, seed=1)
    assert tuple(len(p) for p in parts) == sizes
    merged = parts[0]
    for part in parts[1:]:
        merged = merged.concat(part)
    assert sorted(map(tuple, merged.X.tolist())) == sorted(map(tuple, data.X.tolist()))


def test_split_fraction_rounding():
    data = make_tree_data(100, 2, 2, 1, seed=0)
    assert [len(p) for p in split_dataset(data, (0.29, 0.71), seed=0)] == [29, 71]


def test_split_is_seeded():
    data = make_tree_data(50, 3, 2, 2, seed=0)
    assert split_dataset(data, (0.8, 0.2), 3) == split_dataset(data, (0.8, 0.2), 3)
    assert split_dataset(data, (0.8, 0.2), 3)[0] != split_dataset(data, (0.8, 0.2), 4)[0]


@pytest.mark.parametrize("fractions", [(), (0.5, 0.6), (1.2, -0.2)])
def test_split_rejects_bad_fractions(fractions):
    with pytest.raises(ConfigError):
        split_dataset(make_tree_data(10, 2, 2, 1), fractions, 0)


# ---------- synthetic data ----------


def test_rotated_xor_is_balanced_and_seeded():
    data = make_rotated_xor(2000, noise=0.0, seed=8)
    assert np.count_nonzero(data.targets == 1) == 1000
    assert data == make_rotated_xor(2000, noise=0.0, seed=8)
    assert np.all(np.abs(data.X) <= 1.0)


def test_rotated_xor_needs_an_oblique_tree():
    data = augment(make_rotated_xor(2000, noise=0.0, seed=8))
    assert accuracy(xor_tree(), data) == 1.0
    assert accuracy(build_axis_aligned(data, 1), data) <= 0.75


def test_rotated_xor_noise_flips_labels():
    data = augment(make_rotated_xor(2000, noise=0.05, seed=8))
    assert 0.92 <= accuracy(xor_tree(), data) <= 0.98


def test_rotated_xor_arguments():
    with pytest.raises(ConfigError):
        make_rotated_xor(3)
    with pytest.raises(ConfigError):
        make_rotated_xor(10, noise=1.5)


def test_tree_data():
    data = make_tree_data(300, 5, 3, 3, seed=2)
    assert data.X.shape == (300, 5)
    assert data.label_values == (1.0, 2.0, 3.0)
    assert set(np.unique(data.targets)) <= {1, 2, 3}
    assert data == make_tree_data(300, 5, 3, 3, seed=2)
    with pytest.raises(ConfigError):
        make_tree_data(10, 2, 1, 2)
