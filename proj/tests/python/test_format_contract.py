"""Reference implementation of the on-disk contract in plain Python.

A feature exporter written outside the engine has to reproduce the sign
generator and the container byte for byte; these helpers are the minimal
version of that and are checked against the published vectors in
docs/format.md and against the engine itself.
"""

import struct

import numpy as np
import pytest

import ntksel

MASK = (1 << 64) - 1
BLOCK = 4096


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def sign_word(seed, row, block):
    return splitmix64(splitmix64(splitmix64(seed) ^ row) ^ block)


def sign_row(seed, row, p):
    out = np.empty(p)
    for k in range(p):
        out[k] = -1.0 if (sign_word(seed, row, k // 64) >> (k % 64)) & 1 else 1.0
    return out


def project(g, p, seed):
    # Row-sequential accumulation inside fixed blocks, blocks folded in order.
    total = np.zeros(p)
    for b0 in range(0, len(g), BLOCK):
        acc = np.zeros(p)
        for i in range(b0, min(b0 + BLOCK, len(g))):
            if g[i] != 0.0:
                acc += g[i] * sign_row(seed, i, p)
        total += acc
    return total


HEADER = struct.Struct("<8sBBHIQQQdII")


def write_container(path, kind, flags, dim, proj_seed, source_dim, grad_scale, records):
    with open(path, "wb") as f:
        f.write(HEADER.pack(b"NTKSEL01", kind, flags, 0, dim, len(records), proj_seed, source_dim, grad_scale, 0, 0))
        for tag, index, seq_len, values in records:
            t = tag.encode()
            f.write(struct.pack("<H", len(t)) + t + struct.pack("<QI", index, seq_len))
            f.write(np.asarray(values, dtype="<f4").tobytes())


def read_container(path):
    data = open(path, "rb").read()
    magic, kind, flags, _, dim, count, seed, source_dim, scale, ext_len, _ = HEADER.unpack_from(data, 0)
    assert magic == b"NTKSEL01"
    pos = HEADER.size + ext_len
    width = 4 if kind in (0, 1) else 8
    records = []
    for _ in range(count):
        (tlen,) = struct.unpack_from("<H", data, pos)
        tag = data[pos + 2 : pos + 2 + tlen].decode()
        index, seq_len = struct.unpack_from("<QI", data, pos + 2 + tlen)
        pos += 2 + tlen + 12
        values = np.frombuffer(data, dtype="<f4" if width == 4 else "<f8", count=dim, offset=pos)
        pos += dim * width
        records.append((f"{tag}:{index}", seq_len, values))
    assert pos == len(data)
    header = dict(kind=kind, flags=flags, dim=dim, count=count, proj_seed=seed,
                  source_param_dim=source_dim, grad_scale=scale)
    return header, records


PUBLISHED_WORDS = [
    0x238275BC38FCBE91, 0x44E5B98100C67FB0, 0xD5F095A997147825, 0x3843E3078BB861C8,
    0x7931EB5D1FED59B7, 0x01EBD290BD8B65F5, 0x8E13655C158AC3B5, 0x4E6CCAC83849C89A,
]


def test_published_vectors():
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(1) == 0x910A2DEC89025CC1
    assert splitmix64(42) == 0xBDD732262FEB6E95
    assert [sign_word(0, i, 0) for i in range(8)] == PUBLISHED_WORDS
    assert sign_word(42, 7, 3) == 0xF55E4254D4655539
    assert sign_word(0, 4096, 1) == 0x538A79035A9B9A42
    table = np.array([sign_row(0, i, 8) for i in range(8)])
    assert table[0].tolist() == [-1, 1, 1, 1, -1, 1, 1, -1]
    assert table[7].tolist() == [1, -1, 1, -1, -1, 1, 1, -1]
    assert project(np.arange(1.0, 9.0), 8, 0).tolist() == [-8, 10, -6, 12, -22, -10, 16, -30]


def test_generator_matches_engine_on_first_64_indices():
    for seed in (0, 1, 2**63 + 5):
        ref = np.array([sign_row(seed, i, 64) for i in range(64)])
        np.testing.assert_array_equal(ref, ntksel.sign_table(seed, 64, 64))
        for i in range(64):
            assert sign_word(seed, i, 0) == ntksel.sign_word(seed, i, 0)


def test_projection_equivalence_at_storage_precision():
    rng = np.random.default_rng(3)
    g = rng.standard_normal(2 * BLOCK + 77)
    g[::13] = 0.0
    ref = project(g, 96, 11)
    eng = ntksel.project(g, 96, seed=11)
    np.testing.assert_array_equal(ref.astype(np.float32), eng.astype(np.float32))


def test_engine_reads_reference_writer(tmp_path):
    path = str(tmp_path / "g.bin")
    recs = [("alpaca", 0, 3, [0.5, -1.0, 2.0]), ("alpaca", 7, 1, [0.0, -0.0, 1e-20]), ("b", 2, 9, [1.0, 1.0, 1.0])]
    write_container(path, 0, 0b111, 3, 42, 1000, 1e-5, recs)
    header, ids, lens, mat = ntksel.read_features(path)
    assert header == dict(kind="gradient", flags=7, dim=3, count=3, proj_seed=42, source_param_dim=1000,
                          grad_scale=1e-5)
    assert ids == ["alpaca:0", "alpaca:7", "b:2"]
    assert lens == [3, 1, 9]
    np.testing.assert_array_equal(mat, np.array([r[3] for r in recs], dtype=np.float32))


def test_reference_reader_parses_engine_files(tmp_path):
    path = str(tmp_path / "e.bin")
    vecs = np.arange(12, dtype=np.float32).reshape(4, 3)
    ntksel.write_embeddings(path, ["x:3", "x:0", "y:1", "a:b:2"], vecs)
    header, records = read_container(path)
    assert header["kind"] == 1 and header["flags"] == 0 and header["count"] == 4
    assert [r[0] for r in records] == ["x:3", "x:0", "y:1", "a:b:2"]
    assert all(r[1] == 0 for r in records)
    np.testing.assert_array_equal(np.stack([r[2] for r in records]), vecs)


def test_empty_file_is_header_only(tmp_path):
    path = str(tmp_path / "empty.bin")
    write_container(path, 1, 0, 8, 0, 0, 0.0, [])
    assert len(open(path, "rb").read()) == 56
    assert ntksel.read_header(path)["count"] == 0


@pytest.mark.parametrize("patch", ["magic", "kind", "nan", "trailing"])
def test_engine_rejects_broken_reference_files(tmp_path, patch):
    path = str(tmp_path / "bad.bin")
    write_container(path, 0, 0b111, 2, 0, 10, 1e-5, [("d", 0, 1, [1.0, 2.0])])
    data = bytearray(open(path, "rb").read())
    if patch == "magic":
        data[0:1] = b"X"
    elif patch == "kind":
        data[8] = 7
    elif patch == "nan":
        data[-4:] = struct.pack("<f", float("nan"))
    else:
        data += b"\0"
    open(path, "wb").write(bytes(data))
    with pytest.raises(ntksel.NtkselError):
        ntksel.read_features(path)
