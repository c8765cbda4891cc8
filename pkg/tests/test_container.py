"""Test the chunked GSHD container."""

import struct
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add project root to path to import from gshdl
sys.path.insert(0, str(Path(__file__).parent.parent))

from gshdl.container import (
    FORMAT_VERSION,
    Chunk,
    decode_container,
    encode_container,
    read_container,
    write_container,
)
from gshdl.errors import BadMagicError, ChecksumError, ContainerError, VersionError


class TestContainer(unittest.TestCase):
    """Test container encoding and validation."""

    def setUp(self):
        self.chunks = [
            Chunk("META", {"name": "run", "values": [1, 2, 3], "beta": None}, {}),
            Chunk("CRBM", {"sigma": 1.0}, {
                "filters": np.arange(24, dtype=np.float64).reshape(2, 3, 2, 2),
                "flags": np.array([1, 0, 1], dtype=np.uint8),
                "index": np.array([-5, 7], dtype=np.int64),
                "planes": np.ones((2, 2), dtype="<f4"),
            }),
        ]

    def test_contents_preserved(self):
        """Headers, dtypes and shapes survive encoding."""
        decoded = decode_container(encode_container(self.chunks))
        self.assertEqual([c.tag for c in decoded], ["META", "CRBM"])
        self.assertEqual(decoded[0].header, self.chunks[0].header)
        for name, array in self.chunks[1].arrays.items():
            self.assertEqual(decoded[1].arrays[name].dtype, array.dtype)
            np.testing.assert_array_equal(decoded[1].arrays[name], array)

    def test_encoding_deterministic(self):
        """Equal chunks encode to equal bytes."""
        self.assertEqual(encode_container(self.chunks), encode_container(self.chunks))

    def test_big_endian_input(self):
        """Big-endian arrays are stored little-endian with equal values."""
        values = np.array([1.5, -2.25], dtype=">f8")
        (decoded,) = decode_container(encode_container([Chunk("TEST", {}, {"v": values})]))
        np.testing.assert_array_equal(decoded.arrays["v"], values)

    def test_bad_magic(self):
        """Files without the magic are rejected."""
        data = bytearray(encode_container(self.chunks))
        data[0:4] = b"GSHX"
        with self.assertRaises(BadMagicError):
            decode_container(bytes(data))

    def test_checksum_names_chunk(self):
        """A corrupted payload byte is reported with its chunk."""
        data = bytearray(encode_container(self.chunks))
        data[-10] ^= 0xFF
        with self.assertRaises(ChecksumError) as ctx:
            decode_container(bytes(data))
        self.assertEqual(ctx.exception.chunk, "CRBM#1")
        self.assertIn("CRBM", str(ctx.exception))

    def test_newer_version(self):
        """A version above the supported one is refused."""
        data = bytearray(encode_container(self.chunks))
        data[4:6] = struct.pack("<H", FORMAT_VERSION + 1)
        with self.assertRaises(VersionError):
            decode_container(bytes(data))

    def test_truncated(self):
        """Cutting the file mid-chunk is a container error."""
        data = encode_container(self.chunks)
        with self.assertRaises(ContainerError):
            decode_container(data[:-7])

    def test_bad_tag(self):
        """Tags must be four ASCII characters."""
        with self.assertRaises(ContainerError):
            encode_container([Chunk("TOOLONG", {}, {})])

    def test_files(self):
        """Written files read back; missing files are container errors."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "file.gshd"
            write_container(path, self.chunks)
            self.assertEqual(len(read_container(path)), 2)
            with self.assertRaises(ContainerError):
                read_container(Path(tmp) / "missing.gshd")


if __name__ == "__main__":
    unittest.main()
