import numpy as np
import pytest

from popstab.streams import (
    CoinStream,
    agent_keys,
    first_words,
    numpy_generator,
    seed_streams,
    stream_key,
    word_from_key,
)


def test_same_key_same_bits():
    a = seed_streams(1, 2, 3).bits(200)
    b = seed_streams(1, 2, 3).bits(200)
    assert a == b
    assert set(a) <= {0, 1}


def test_keys_differ_by_each_component():
    base = seed_streams(1, 2, 3).bits(64)
    assert seed_streams(2, 2, 3).bits(64) != base
    assert seed_streams(1, 3, 3).bits(64) != base
    assert seed_streams(1, 2, 4).bits(64) != base


def test_purposes_are_separate():
    assert seed_streams(1, 0, "matching").key != seed_streams(1, 0, "adversary").key
    assert seed_streams(1, 0, "matching").key != seed_streams(1, 0, 0).key
    with pytest.raises(ValueError):
        seed_streams(1, 0, "weather")
    with pytest.raises(ValueError):
        seed_streams(1, 0, -1)


def test_no_collisions_million_keys():
    handles = np.arange(10**6, dtype=np.int64)
    keys = agent_keys(5, 17, handles)
    assert np.unique(keys).size == keys.size
    words = first_words(keys)
    assert np.unique(words).size == words.size


def test_vector_keys_match_scalar():
    handles = np.array([0, 1, 99, 12345], dtype=np.int64)
    keys = agent_keys(8, 3, handles)
    for h, k in zip(handles, keys):
        assert int(k) == seed_streams(8, 3, int(h)).key


def test_bits_are_lsb_first_of_word_zero():
    c = seed_streams(4, 4, 4)
    w0 = word_from_key(c.key, 0)
    w1 = word_from_key(c.key, 1)
    bits = c.bits(128)
    assert bits[:64] == [(w0 >> i) & 1 for i in range(64)]
    assert bits[64:] == [(w1 >> i) & 1 for i in range(64)]
    assert c.consumed == 128


def test_bit_balance():
    bits = CoinStream(stream_key(0, 0, 1)).bits(20000)
    assert abs(sum(bits) - 10000) < 5 * 71


def test_uniform_range():
    c = seed_streams(0, 0, 0)
    xs = [c.uniform() for _ in range(200)]
    assert all(0 <= x < 1 for x in xs)
    assert c.consumed == 200 * 53


def test_numpy_generator_reproducible():
    a = numpy_generator(3, 9, "matching").integers(0, 10**9, 5)
    b = numpy_generator(3, 9, "matching").integers(0, 10**9, 5)
    c = numpy_generator(3, 10, "matching").integers(0, 10**9, 5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
