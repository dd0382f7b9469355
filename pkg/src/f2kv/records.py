"""Packed binary layouts shared by the record logs and hash indexes.

Everything that crosses a memory/disk boundary in f2-kv is built from two
64-bit words:

* a *logical address*: a 47-bit byte offset into one log's address space,
  with bit 47 reserved as the read-cache flag (set only on addresses that
  reference the read cache instead of the hot log);
* a *hash bucket entry*: address (48 bits, including the read-cache flag),
  14 tag bits of extra key-hash resolution, a tentative bit, and one
  reserved bit (used internally to mark overflow-bucket pointers).

A record is an 8-byte header (previous address + invalid/tombstone bits)
followed by a fixed-size key and a fixed-size value, padded to 8-byte
alignment.  Address 0 is the INVALID sentinel, so every log reserves its
first record slot and real records start at `record_size`.
"""

from __future__ import annotations

import struct

U64_MASK = (1 << 64) - 1

# Logical addresses.
ADDRESS_BITS = 48
ADDRESS_MASK = (1 << ADDRESS_BITS) - 1
READ_CACHE_BIT = 1 << 47
OFFSET_MASK = READ_CACHE_BIT - 1  # pure 47-bit byte offset
INVALID_ADDRESS = 0

# Hash bucket entries.
TAG_SHIFT = ADDRESS_BITS
TAG_BITS = 14
TAG_MASK = (1 << TAG_BITS) - 1
ENTRY_TENTATIVE_BIT = 1 << 62
ENTRY_OVERFLOW_BIT = 1 << 63  # last-slot overflow pointer, never a user entry
ENTRY_FREE = 0

# Record headers.
HEADER_SIZE = 8
HEADER_TOMBSTONE_BIT = 1 << 62
HEADER_INVALID_BIT = 1 << 63

_U64 = struct.Struct("<Q")


def is_read_cache(address: int) -> bool:
    return bool(address & READ_CACHE_BIT)


def strip_read_cache(address: int) -> int:
    return address & OFFSET_MASK


def with_read_cache(address: int) -> int:
    return address | READ_CACHE_BIT


def make_entry(address: int, tag: int, tentative: bool = False) -> int:
    entry = (address & ADDRESS_MASK) | ((tag & TAG_MASK) << TAG_SHIFT)
    if tentative:
        entry |= ENTRY_TENTATIVE_BIT
    return entry


def entry_address(entry: int) -> int:
    return entry & ADDRESS_MASK


def entry_tag(entry: int) -> int:
    return (entry >> TAG_SHIFT) & TAG_MASK


def entry_is_tentative(entry: int) -> bool:
    return bool(entry & ENTRY_TENTATIVE_BIT)


def make_header(previous: int, tombstone: bool = False, invalid: bool = False) -> int:
    header = previous & ADDRESS_MASK
    if tombstone:
        header |= HEADER_TOMBSTONE_BIT
    if invalid:
        header |= HEADER_INVALID_BIT
    return header


def header_previous(header: int) -> int:
    return header & ADDRESS_MASK


def header_is_tombstone(header: int) -> bool:
    return bool(header & HEADER_TOMBSTONE_BIT)


def header_is_invalid(header: int) -> bool:
    return bool(header & HEADER_INVALID_BIT)


def mix_hash(value: int) -> int:
    """64-bit finalizer (splitmix-style) used for key and chunk-id hashing."""
    value &= U64_MASK
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & U64_MASK
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & U64_MASK
    return value ^ (value >> 31)


def hash_key(key: bytes) -> int:
    """Hash fixed-size key bytes to a 64-bit value."""
    if len(key) <= 8:
        return mix_hash(int.from_bytes(key, "little"))
    h = 0
    for i in range(0, len(key), 8):
        h = mix_hash(h ^ int.from_bytes(key[i : i + 8], "little"))
    return h


def align8(n: int) -> int:
    return (n + 7) & ~7


class RecordFormat:
    """Fixed-size record codec for one log: header + key + value, 8-aligned."""

    __slots__ = ("key_size", "value_size", "record_size",
                 "_key_off", "_value_off")

    def __init__(self, key_size: int, value_size: int):
        self.key_size = key_size
        self.value_size = value_size
        self._key_off = HEADER_SIZE
        self._value_off = HEADER_SIZE + key_size
        self.record_size = align8(HEADER_SIZE + key_size + value_size)

    def header_at(self, buf, off: int) -> int:
        return _U64.unpack_from(buf, off)[0]

    def set_header(self, buf, off: int, header: int) -> None:
        _U64.pack_into(buf, off, header)

    def key_at(self, buf, off: int) -> bytes:
        start = off + self._key_off
        return bytes(buf[start : start + self.key_size])

    def key_matches(self, buf, off: int, key: bytes) -> bool:
        start = off + self._key_off
        return buf[start : start + self.key_size] == key

    def value_at(self, buf, off: int) -> bytes:
        start = off + self._value_off
        return bytes(buf[start : start + self.value_size])

    def set_value(self, buf, off: int, value: bytes) -> None:
        start = off + self._value_off
        buf[start : start + self.value_size] = value

    def write(self, buf, off: int, header: int, key: bytes, value: bytes) -> None:
        _U64.pack_into(buf, off, header)
        buf[off + self._key_off : off + self._key_off + self.key_size] = key
        if value:
            buf[off + self._value_off : off + self._value_off + self.value_size] = value

    def mark_invalid(self, buf, off: int) -> None:
        # Single-byte write: flips bit 63 without touching the rest of
        # the header, safe against concurrent full-header readers.
        buf[off + 7] |= 0x80
