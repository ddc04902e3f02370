import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isa_fss.episodes import (
    Episode,
    augment_one_shot,
    combination_indices,
    cyclic_pairs,
    effective_supports,
    enumerate_combinations,
    hierarchical_pairs,
    load_episode,
    read_pgm,
    save_episode,
    write_pgm,
)
from isa_fss.errors import ContractError, DimensionError
from isa_fss.model import ImageSample


def samples(k, size=8, c=3, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for _ in range(k):
        m = (r.random((size, size)) < 0.4).astype(float)
        out.append(ImageSample(r.random((c, size, size)), m))
    return out


def test_cyclic_pairs_counts():
    for k in (2, 5):
        s = samples(k)
        pairs = cyclic_pairs(s)
        assert len(pairs) == k
        assert all(len(pool) == k - 1 for pool, _ in pairs)
        assert [q for _, q in pairs] == s
        for i, (pool, q) in enumerate(pairs):
            assert q is s[i] and all(p is not q for p in pool)
        for x in s:
            assert sum(any(p is x for p in pool) for pool, _ in pairs) == k - 1


def test_cyclic_pairs_needs_two():
    with pytest.raises(ContractError):
        cyclic_pairs(samples(1))


def test_enumerate_combinations_examples():
    pool = list("abcd")
    assert len(enumerate_combinations(pool, 2)) == 6
    assert enumerate_combinations(pool, 4) == [pool]
    with pytest.raises(ContractError):
        enumerate_combinations(pool, 5)
    with pytest.raises(ContractError):
        enumerate_combinations(pool, 0)


def test_combinations_lexicographic():
    for m in range(1, 7):
        for n in range(1, m + 1):
            assert combination_indices(m, n) == list(itertools.combinations(range(m), n))


def test_capped_sampling_deterministic_and_distinct():
    a = combination_indices(10, 5, cap=20, seed=7)
    b = combination_indices(10, 5, cap=20, seed=7)
    assert a == b and len(a) == 20
    assert len(set(a)) == 20
    valid = set(itertools.combinations(range(10), 5))
    assert all(t in valid for t in a)
    assert a == sorted(a)
    assert combination_indices(10, 5, cap=20, seed=8) != a
    # cap above the total changes nothing
    assert combination_indices(4, 2, cap=50, seed=3) == list(itertools.combinations(range(4), 2))


def test_hierarchical_examples():
    s = samples(5)
    assert len(hierarchical_pairs(s, 2)) == 30
    full = hierarchical_pairs(s, 4)
    assert len(full) == 5
    for pair, (pool, q) in zip(full, cyclic_pairs(s)):
        assert pair.query is q and all(a is b for a, b in zip(pair.supports, pool))
    s3 = samples(3)
    got = [(p.query_index, p.support_indices) for p in hierarchical_pairs(s3, 1)]
    assert got == [(0, (1,)), (0, (2,)), (1, (0,)), (1, (2,)), (2, (0,)), (2, (1,))]
    with pytest.raises(ContractError):
        hierarchical_pairs(s, 5)
    with pytest.raises(ContractError):
        hierarchical_pairs(s, 0)


@pytest.mark.parametrize("k", range(2, 7))
def test_pair_counts_and_exclusion(k):
    s = samples(k, size=4)
    for n in range(1, k):
        pairs = hierarchical_pairs(s, n)
        assert len(pairs) == k * math.comb(k - 1, n)
        for p in pairs:
            assert p.n == n
            assert all(x is not p.query for x in p.supports)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(2, 8), data=st.data())
def test_capped_pairs_deterministic(k, data):
    n = data.draw(st.integers(1, k - 1))
    cap = data.draw(st.integers(1, 10))
    seed = data.draw(st.integers(0, 1000))
    s = samples(k, size=4)
    a = hierarchical_pairs(s, n, cap, seed)
    b = hierarchical_pairs(s, n, cap, seed)
    assert len(a) == k * min(math.comb(k - 1, n), cap)
    assert [(p.query_index, p.support_indices) for p in a] == [(p.query_index, p.support_indices) for p in b]
    assert all(p.query_index not in p.support_indices for p in a)


def test_augment_one_shot():
    (s,) = samples(1)
    out = augment_one_shot(s, seed=0)
    assert len(out) == 3 and out[0] is s
    np.testing.assert_array_equal(out[1].image[:, :, ::-1], s.image)
    np.testing.assert_array_equal(np.rot90(out[2].mask, -1), s.mask)
    for a in out:
        assert a.mask.sum() == s.mask.sum()
        assert set(np.unique(a.mask)) <= {0.0, 1.0}
    # flipping the flip returns the original
    back = augment_one_shot(out[1])[1]
    np.testing.assert_array_equal(back.image, s.image)
    np.testing.assert_array_equal(back.mask, s.mask)


def test_augment_non_square_warns():
    r = np.random.default_rng(1)
    s = ImageSample(r.random((3, 4, 6)), (r.random((4, 6)) < 0.5).astype(float))
    with pytest.warns(UserWarning):
        out = augment_one_shot(s)
    np.testing.assert_array_equal(out[2].mask[::-1, :], s.mask)


def test_effective_supports():
    one = samples(1)
    assert len(effective_supports(one)) == 3
    many = samples(4)
    assert effective_supports(many) == many


def test_episode_validation():
    with pytest.raises(ContractError):
        Episode([])
    with pytest.raises(DimensionError):
        Episode(samples(1, size=8), samples(1, size=4))


def test_pgm_roundtrip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", arr)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), arr)
    with pytest.raises(DimensionError):
        write_pgm(tmp_path / "b.pgm", arr.astype(float))


def test_pgm_ascii_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P2\n# note\n3 2\n255\n0 1 2\n3 4 255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[0, 1, 2], [3, 4, 255]])
    (tmp_path / "d.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "d.pgm")


def test_episode_directory_roundtrip(tmp_path):
    r = np.random.default_rng(2)
    quant = lambda a: np.round(a * 255) / 255  # noqa: E731
    sup = [ImageSample(quant(r.random((3, 8, 8))), (r.random((8, 8)) < 0.5).astype(float)) for _ in range(3)]
    ep = Episode(sup, sup[:1], class_id=4, domain_id="texture", episode_id="texture-0007")
    save_episode(ep, tmp_path / "ep")
    back = load_episode(tmp_path / "ep")
    assert (back.class_id, back.domain_id, back.episode_id, back.k) == (4, "texture", "texture-0007", 3)
    for a, b in zip(ep.supports + ep.queries, back.supports + back.queries):
        np.testing.assert_allclose(a.image, b.image, atol=1e-12)
        np.testing.assert_array_equal(a.mask, b.mask)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        (tmp_path / "nope").mkdir()
        (tmp_path / "nope" / "manifest.json").write_text("{}")
        with pytest.raises(ValueError):
            load_episode(tmp_path / "nope")
