"""Chunked binary container shared by feature, prior, layer and model files.

Layout::

    "GSHD" | u16 version | chunk*
    chunk = tag (4 ASCII bytes) | u32 length | payload | u32 CRC-32(tag + payload)
    payload = u32 header length | msgpack header | array bytes

The msgpack header carries scalars plus an ``arrays`` table (name, dtype,
shape, offset, nbytes); arrays are stored little-endian back to back.
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Union

import msgpack
import numpy as np

from .errors import BadMagicError, ChecksumError, ContainerError, VersionError

logger = logging.getLogger("gshdl.container")

MAGIC = b"GSHD"
FORMAT_VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class Chunk(NamedTuple):
    """One tagged record: msgpack-able ``header`` plus named arrays."""

    tag: str
    header: Dict[str, Any]
    arrays: Dict[str, np.ndarray]


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">" or (array.dtype.byteorder == "=" and not np.little_endian):
        array = array.astype(array.dtype.newbyteorder("<"))
    return array


def encode_payload(header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    """Serialize a header and arrays into a chunk payload."""
    table = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        array = _little_endian(np.asarray(array))
        data = array.tobytes()
        table.append({
            "name": name,
            "dtype": array.dtype.newbyteorder("<").str,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        blobs.append(data)
        offset += len(data)
    meta = msgpack.packb({"header": header, "arrays": table}, use_bin_type=True)
    return _U32.pack(len(meta)) + meta + b"".join(blobs)


def decode_payload(payload: bytes, tag: str = "?") -> Chunk:
    """Inverse of :func:`encode_payload`."""
    try:
        (meta_length,) = _U32.unpack_from(payload, 0)
        meta = msgpack.unpackb(payload[4:4 + meta_length], raw=False, strict_map_key=False)
    except (struct.error, ValueError, msgpack.UnpackException) as e:
        raise ContainerError(f"chunk {tag}: unreadable header ({e})") from e
    base = 4 + meta_length
    arrays = {}
    for entry in meta["arrays"]:
        start = base + entry["offset"]
        data = payload[start:start + entry["nbytes"]]
        if len(data) != entry["nbytes"]:
            raise ContainerError(f"chunk {tag}: array {entry['name']} is truncated")
        arrays[entry["name"]] = np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return Chunk(tag=tag, header=meta["header"], arrays=arrays)


def encode_container(chunks: Iterable[Chunk], version: int = FORMAT_VERSION) -> bytes:
    """Serialize chunks into container bytes."""
    parts = [MAGIC, _U16.pack(version)]
    for chunk in chunks:
        tag = chunk.tag.encode("ascii")
        if len(tag) != 4:
            raise ContainerError(f"chunk tag must be 4 ASCII characters, got {chunk.tag!r}")
        payload = encode_payload(chunk.header, chunk.arrays)
        crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
        parts.extend([tag, _U32.pack(len(payload)), payload, _U32.pack(crc)])
    return b"".join(parts)


def decode_container(data: bytes) -> List[Chunk]:
    """Parse container bytes, verifying magic, version and every checksum.

    Raises:
        BadMagicError: Missing ``GSHD`` magic
        VersionError: File written by a newer format version
        ChecksumError: CRC mismatch; names the chunk
        ContainerError: Truncated or malformed data
    """
    if data[:4] != MAGIC:
        raise BadMagicError("not a GSHD container (bad magic)")
    if len(data) < 6:
        raise ContainerError("container truncated before version field")
    (version,) = _U16.unpack_from(data, 4)
    if version > FORMAT_VERSION:
        raise VersionError(f"container version {version} is newer than supported version {FORMAT_VERSION}")

    raw_chunks = []
    position = 6
    index = 0
    while position < len(data):
        if position + 8 > len(data):
            raise ContainerError(f"chunk #{index} truncated in its header")
        tag_bytes = data[position:position + 4]
        tag = tag_bytes.decode("ascii", errors="replace")
        (length,) = _U32.unpack_from(data, position + 4)
        start = position + 8
        end = start + length
        if end + 4 > len(data):
            raise ContainerError(f"chunk {tag} (#{index}) is truncated")
        payload = data[start:end]
        (stored_crc,) = _U32.unpack_from(data, end)
        if zlib.crc32(tag_bytes + payload) & 0xFFFFFFFF != stored_crc:
            raise ChecksumError(f"CRC mismatch in chunk {tag} (#{index})", chunk=f"{tag}#{index}")
        raw_chunks.append((tag, payload))
        position = end + 4
        index += 1

    return [decode_payload(payload, tag) for tag, payload in raw_chunks]


def write_container(path: Union[str, Path], chunks: Iterable[Chunk]) -> None:
    """Write chunks to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_container(chunks)
    path.write_bytes(data)
    logger.debug(f"Wrote {len(data)} bytes to {path}")


def read_container(path: Union[str, Path]) -> List[Chunk]:
    """Read and verify all chunks of the container at ``path``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    return decode_container(data)
