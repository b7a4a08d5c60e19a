"""Mask serialization and storage accounting.

The mask container (magic "SMNM") stores one bit per weight, packed
least-significant-bit first and zero-padded to a byte boundary per layer,
with a trailing CRC32 over everything before it. The compression benchmark
reproduces the storage argument: trained masks compress far better than
trained float weights.
"""

import bz2
import json
import lzma
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MASK_MAGIC = b"SMNM"
MASK_VERSION = 1


class MaskFileError(ValueError):
    code = "invalid"


class BadMagicError(MaskFileError):
    code = "bad_magic"


class BadVersionError(MaskFileError):
    code = "bad_version"


class TruncatedError(MaskFileError):
    code = "truncated"


class ChecksumError(MaskFileError):
    code = "bad_checksum"


def pack_masks(masks) -> bytes:
    """Serialize a list of bit arrays to the SMNM byte stream."""
    if len(masks) > 0xFFFF:
        raise ValueError("too many mask layers for a u16 count")
    out = bytearray()
    out += MASK_MAGIC
    out += struct.pack("<HH", MASK_VERSION, len(masks))
    for m in masks:
        m = np.asarray(m)
        if m.ndim > 0xFF:
            raise ValueError("mask rank exceeds u8")
        out += struct.pack("<B", m.ndim)
        for dim in m.shape:
            out += struct.pack("<I", dim)
        bits = np.asarray(m, dtype=bool).ravel().astype(np.uint8)
        out += np.packbits(bits, bitorder="little").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def unpack_masks(data: bytes):
    """Exact inverse of pack_masks. Distinct errors for each corruption mode."""
    if len(data) < 8 + 4:
        raise TruncatedError("stream shorter than header plus checksum")
    if data[:4] != MASK_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != MASK_VERSION:
        raise BadVersionError(f"unsupported mask file version {version}")
    body, crc_bytes = data[:-4], data[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("CRC32 mismatch")
    off = 8
    masks = []
    for _ in range(count):
        if off + 1 > len(body):
            raise TruncatedError("layer header past end of stream")
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        if off + 4 * rank > len(body):
            raise TruncatedError("layer dims past end of stream")
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        nbytes = (n + 7) // 8
        if off + nbytes > len(body):
            raise TruncatedError("layer payload past end of stream")
        packed = np.frombuffer(body, dtype=np.uint8, count=nbytes, offset=off)
        off += nbytes
        bits = np.unpackbits(packed, bitorder="little")[:n]
        masks.append(bits.astype(bool).reshape(shape))
    if off != len(body):
        raise TruncatedError(f"{len(body) - off} trailing bytes after last layer")
    return masks


def packed_size(masks) -> int:
    """Exact byte size pack_masks will produce for these masks."""
    size = 8 + 4  # header + CRC
    for m in masks:
        m = np.asarray(m)
        size += 1 + 4 * m.ndim + (m.size + 7) // 8
    return size


def _deflate(data):
    return zlib.compress(data, 9)


_CODECS = {
    "deflate": _deflate,
    "bz2": lambda d: bz2.compress(d, 9),
    "lzma": lambda d: lzma.compress(d),
}


def available_codecs():
    return sorted(_CODECS)


@dataclass
class StorageReport:
    method: str
    raw_bits: int
    compressed_bits: dict = field(default_factory=dict)
    reductions: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def compression_benchmark(artifact: bytes, codecs=("deflate",), method="artifact") -> StorageReport:
    """Compress a byte stream with each codec and report the reduction.

    reduction = 1 - compressed/raw. DEFLATE is always available; codecs
    that fail or are unknown are reported per-codec without aborting the
    rest.
    """
    report = StorageReport(method=method, raw_bits=len(artifact) * 8)
    for name in codecs:
        fn = _CODECS.get(name)
        if fn is None:
            report.errors[name] = "codec unavailable"
            continue
        try:
            compressed = fn(artifact)
        except Exception as exc:  # codec failure should not kill the others
            report.errors[name] = str(exc)
            continue
        bits = len(compressed) * 8
        report.compressed_bits[name] = bits
        report.reductions[name] = 1.0 - bits / report.raw_bits
    return report


def storage_report(maskable_params: int, method: str, cascade_k: int = 5,
                   router_bits: int = 0, whitening_bits: int = 0) -> StorageReport:
    """Uncompressed storage accounting for one adaptation method.

    fft stores a 32-bit float per fine-tuned backbone weight; mask stores
    one bit per maskable weight; cascade stores (K+1) mask sets plus the
    router and whitening parameters (itemized, and negligible next to the
    masks).
    """
    fft_bits = 32 * maskable_params
    mask_bits = maskable_params
    if method == "fft":
        return StorageReport(method="fft", raw_bits=fft_bits,
                             detail={"bits_per_param": 32, "params": maskable_params})
    if method == "mask":
        return StorageReport(method="mask", raw_bits=mask_bits,
                             detail={"bits_per_param": 1, "params": maskable_params,
                                     "fft_to_mask_ratio": fft_bits / mask_bits})
    if method == "cascade":
        total = (cascade_k + 1) * mask_bits + router_bits + whitening_bits
        return StorageReport(
            method="cascade", raw_bits=total,
            detail={"mask_sets": cascade_k + 1, "mask_bits": (cascade_k + 1) * mask_bits,
                    "router_bits": router_bits, "whitening_bits": whitening_bits,
                    "fraction_of_fft": total / fft_bits})
    raise ValueError(f"unknown storage method {method!r}")
