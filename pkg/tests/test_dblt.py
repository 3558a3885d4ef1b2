"""Binary tensor container: byte layout and roundtrips."""

import io
import struct

import numpy as np
import pytest

from hqdeblur import dblt


class TestTensorRecord:
    def test_byte_layout_of_known_tensor(self):
        """Golden check: magic, version, rank, little-endian dims, f64 payload."""
        arr = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        blob = dblt.tensor_bytes(arr)
        assert blob[:4] == b"DBLT"
        assert blob[4] == 1          # version
        assert blob[5] == 2          # rank
        assert struct.unpack("<QQ", blob[6:22]) == (3, 2)
        assert blob[22:] == struct.pack("<6d", 1, 2, 3, 4, 5, 6)

    def test_roundtrip_various_ranks(self, tmp_path):
        rng = np.random.default_rng(0)
        cases = [
            np.float64(3.25),                     # rank 0
            rng.normal(size=7),                   # rank 1
            rng.normal(size=(4, 5)),              # rank 2
            rng.normal(size=(2, 3, 3, 3)),        # rank 4
        ]
        for i, arr in enumerate(cases):
            p = tmp_path / f"t{i}.dblt"
            dblt.write_tensor(p, arr)
            back = dblt.read_tensor_file(p)
            assert back.shape == np.shape(arr)
            assert np.array_equal(back, np.asarray(arr, dtype=float))

    def test_write_is_deterministic(self, tmp_path):
        arr = np.random.default_rng(1).normal(size=(3, 3))
        a, b = tmp_path / "a.dblt", tmp_path / "b.dblt"
        dblt.write_tensor(a, arr)
        dblt.write_tensor(b, arr)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_bad_magic_version_truncation(self):
        good = dblt.tensor_bytes(np.ones((2, 2)))
        with pytest.raises(ValueError, match="magic"):
            dblt.read_tensor(io.BytesIO(b"XBLT" + good[4:]))
        with pytest.raises(ValueError, match="version"):
            dblt.read_tensor(io.BytesIO(good[:4] + b"\x09" + good[5:]))
        with pytest.raises(ValueError, match="truncated"):
            dblt.read_tensor(io.BytesIO(good[:-8]))

    def test_no_temp_residue_after_write(self, tmp_path):
        dblt.write_tensor(tmp_path / "x.dblt", np.ones(3))
        names = {p.name for p in tmp_path.iterdir()}
        assert names == {"x.dblt"}


class TestManifest:
    def test_roundtrip_preserves_order_and_values(self, tmp_path):
        rng = np.random.default_rng(2)
        entries = {
            "meta": np.array([2.0, 4.0, 1.0, 11.0, 11.0, 1e-6]),
            "w.1": rng.normal(size=(4, 4, 3, 3)),
            "w.2": rng.normal(size=(4, 1, 3, 3)),
            "beta": rng.normal(size=2),
        }
        p = tmp_path / "model.dblt"
        dblt.write_manifest(p, entries)
        back = dblt.read_manifest(p)
        assert list(back) == list(entries)
        for name in entries:
            assert np.array_equal(back[name], entries[name])

    def test_count_is_u32_and_names_u16_prefixed(self, tmp_path):
        p = tmp_path / "m.dblt"
        dblt.write_manifest(p, {"ab": np.zeros(1)})
        blob = p.read_bytes()
        assert struct.unpack("<I", blob[:4]) == (1,)
        assert struct.unpack("<H", blob[4:6]) == (2,)
        assert blob[6:8] == b"ab"
        assert blob[8:12] == b"DBLT"

    def test_duplicate_and_trailing_rejected(self, tmp_path):
        p = tmp_path / "m.dblt"
        dblt.write_manifest(p, {"a": np.zeros(1)})
        blob = p.read_bytes()
        two = struct.pack("<I", 2) + blob[4:] + blob[4:]
        bad = tmp_path / "bad.dblt"
        bad.write_bytes(two)
        with pytest.raises(ValueError, match="duplicate"):
            dblt.read_manifest(bad)
        bad.write_bytes(blob + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            dblt.read_manifest(bad)

    def test_unicode_names(self, tmp_path):
        p = tmp_path / "m.dblt"
        dblt.write_manifest(p, {"weights/élan": np.arange(3.0)})
        assert list(dblt.read_manifest(p)) == ["weights/élan"]
