import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from milbench.errors import DataMismatchError, ParameterError
from milbench.numerics import SeededRng
from milbench.synthgen import (Bag, GeneratorParams, SplitSpec, check_consistent, read_bags, sample_bag,
                               sample_dataset, split, write_bags)

SMALL = GeneratorParams(s_low=4, s_high=9, r=3, m=5, k=2)


def test_default_constants():
    p = GeneratorParams()
    assert (p.q_pos, p.s_low, p.s_high, p.r, p.delta, p.mu, p.sigma, p.m, p.k) == \
        (0.5, 20, 60, 12, 0.5, 0.0, 1.0, 768, 1)


@pytest.mark.parametrize("kw", [dict(q_pos=1.5), dict(s_low=0), dict(s_low=10, s_high=5), dict(r=30),
                                dict(sigma=0.0), dict(k=0), dict(k=800)])
def test_invalid_params(kw):
    with pytest.raises(ParameterError):
        GeneratorParams(**kw)


def test_params_dict_roundtrip():
    assert GeneratorParams.from_dict(SMALL.to_dict()) == SMALL


def test_degenerate_segment_covers_bag():
    p = GeneratorParams(q_pos=1.0, s_low=7, s_high=7, r=7, m=3)
    for bag in sample_dataset(p, 20, SeededRng(0)):
        assert bag.label == 1 and bag.segment_start == 0
        assert np.all(bag.instance_labels == 1)


def test_default_config_segments():
    bags = sample_dataset(GeneratorParams(m=4), 300, SeededRng(1))
    for b in bags:
        assert 20 <= b.size <= 60
        lab = b.instance_labels
        if b.label:
            assert lab.sum() == 12
            idx = np.flatnonzero(lab)
            assert np.array_equal(idx, np.arange(b.segment_start, b.segment_start + 12))
        else:
            assert lab.sum() == 0 and b.segment_start is None


def test_segment_carries_the_shift():
    p = GeneratorParams(q_pos=1.0, delta=3.0, m=4, k=2)
    seg, rest = [], []
    for b in sample_dataset(p, 200, SeededRng(2)):
        mask = b.instance_labels.astype(bool)
        seg.append(b.embeddings[mask])
        rest.append(b.embeddings[~mask])
    seg, rest = np.vstack(seg), np.vstack(rest)
    assert np.allclose(seg[:, :2].mean(0), 3.0, atol=0.05)
    assert np.allclose(seg[:, 2:].mean(0), 0.0, atol=0.05)
    assert np.allclose(rest.mean(0), 0.0, atol=0.05)


def test_no_shift_is_indistinguishable():
    p = GeneratorParams(delta=0.0, m=1, s_low=20, s_high=30, r=12)
    pos, neg = [], []
    for b in sample_dataset(p, 17000, SeededRng(3)):
        if b.label:
            pos.append(b.embeddings[b.instance_labels.astype(bool), 0])
        else:
            neg.append(b.embeddings[:, 0])
    pos, neg = np.concatenate(pos)[:100_000], np.concatenate(neg)[:100_000]
    assert len(pos) == len(neg) == 100_000
    assert stats.ks_2samp(pos, neg).pvalue > 0.01


def test_positive_count_binomial():
    n_pos = sum(b.label for b in sample_dataset(GeneratorParams(m=1), 1000, SeededRng(4)))
    assert abs(n_pos - 500) <= 63


def test_zero_bags_rejected():
    with pytest.raises(ParameterError):
        sample_dataset(SMALL, 0, SeededRng(0))


def test_same_seed_bit_identical():
    a = sample_dataset(SMALL, 50, SeededRng(11))
    b = sample_dataset(SMALL, 50, SeededRng(11))
    for x, y in zip(a, b):
        assert x.label == y.label and x.segment_start == y.segment_start
        assert np.array_equal(x.embeddings, y.embeddings)


def test_prefix_stable():
    a = sample_dataset(SMALL, 10, SeededRng(5))
    b = sample_dataset(SMALL, 40, SeededRng(5))[:10]
    assert all(np.array_equal(x.embeddings, y.embeddings) for x, y in zip(a, b))


@given(st.integers(0, 2 ** 31))
@settings(max_examples=30)
def test_sample_bag_invariants(seed):
    b = sample_bag(SMALL, SeededRng(seed))
    assert b.embeddings.shape == (b.size, 5) and SMALL.s_low <= b.size <= SMALL.s_high
    assert b.instance_labels.sum() == (SMALL.r if b.label else 0)
    if b.label:
        assert 0 <= b.segment_start <= b.size - SMALL.r


class TestSplit:
    def test_four_to_one(self):
        train, val = split(sample_dataset(SMALL, 100, SeededRng(0)), SplitSpec())
        assert len(train) == 80 and len(val) == 20

    def test_disjoint_exhaustive(self):
        data = sample_dataset(SMALL, 37, SeededRng(0))
        train, val = split(data, SplitSpec(0.7), SeededRng(9))
        ids = sorted(id(b) for b in train + val)
        assert ids == sorted(id(b) for b in data)

    def test_empty_val_rejected(self):
        with pytest.raises(ParameterError):
            split(sample_dataset(SMALL, 2, SeededRng(0)), SplitSpec(0.999))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ParameterError):
            split([], SplitSpec())

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.2])
    def test_fraction_range(self, f):
        with pytest.raises(ParameterError):
            SplitSpec(f)


def test_bag_build_checks():
    with pytest.raises(ParameterError):
        Bag.build(np.zeros((4, 2)), 1, 2, 3)
    with pytest.raises(ParameterError):
        Bag.build(np.zeros((4, 2)), 0, 0, 3)


def test_check_consistent():
    bags = sample_dataset(SMALL, 5, SeededRng(0))
    check_consistent(bags, SMALL)
    with pytest.raises(DataMismatchError):
        check_consistent(bags, GeneratorParams(s_low=4, s_high=9, r=3, m=6, k=2))


@pytest.mark.parametrize("ext", [".txt", ".bin"])
def test_io_roundtrip(tmp_path, ext):
    bags = sample_dataset(SMALL, 12, SeededRng(6))
    path = tmp_path / f"bags{ext}"
    write_bags(path, bags, SMALL.r)
    back, r = read_bags(path)
    assert r == SMALL.r and len(back) == 12
    for x, y in zip(bags, back):
        assert np.array_equal(x.embeddings, y.embeddings)
        assert (x.label, x.segment_start) == (y.label, y.segment_start)
        assert np.array_equal(x.instance_labels, y.instance_labels)


@pytest.mark.parametrize("ext", [".txt", ".bin"])
def test_rewrite_byte_identical(tmp_path, ext):
    bags = sample_dataset(SMALL, 4, SeededRng(6))
    write_bags(tmp_path / f"a{ext}", bags, SMALL.r)
    write_bags(tmp_path / f"b{ext}", read_bags(tmp_path / f"a{ext}")[0], SMALL.r)
    assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()


@pytest.mark.parametrize("ext", [".txt", ".bin"])
def test_rejects_foreign_file(tmp_path, ext):
    path = tmp_path / f"junk{ext}"
    path.write_bytes(b"hello world\n" * 4)
    with pytest.raises(ParameterError):
        read_bags(path)
