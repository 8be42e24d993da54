"""Shared domain types, canonical binary encoding and digests.

Encoding layout (all integers big-endian):

    u8   type tag
    str  u32 length + UTF-8 bytes
    opt  u8 presence flag (0/1) followed by the value when present
    u64  unsigned 64-bit integer
    blob u32 length + raw bytes

    Transaction  0x01 | str sender | opt str recipient | u64 nonce | u64 amount
                 | u64 gas_limit | blob payload | blob signature
    signing form 0x11 | the same fields without the signature
    Block        0x02 | u32 proposer | u64 timestamp | opt 32B parent_digest
                 | opt 32B digest | u32 count | count x blob(Transaction)
    Superblock   0x03 | u64 index | u32 count | count x blob(Block)

A block's digest is the SHA-256 of its encoding with the digest field absent.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Protocol, Sequence, Union

Digest = bytes
DIGEST_SIZE = 32

TAG_TX = 0x01
TAG_TX_SIGNING = 0x11
TAG_BLOCK = 0x02
TAG_SUPERBLOCK = 0x03

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_U64_MAX = 2**64 - 1
_U32_MAX = 2**32 - 1


class ChainError(Exception):
    """Base class for errors raised by this package."""


class EncodingLimit(ChainError):
    """An item does not fit the canonical encoding or a configured size cap."""


class DecodeError(ChainError):
    """Malformed canonical bytes."""


class ContractViolation(ChainError):
    """A caller broke an operation's precondition (a bug, not bad input)."""


class BadInput(ChainError):
    pass


def digest_of(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


# -- signatures --------------------------------------------------------------


class SignatureScheme(Protocol):
    def sign(self, account: str, message: bytes) -> bytes: ...

    def verify(self, account: str, message: bytes, signature: bytes) -> bool: ...


class HmacScheme:
    """Deterministic keyed-MAC signatures.

    Every account key is derived from one master secret, so a simulation can
    sign for any honest client while a byzantine node holding a different
    secret cannot forge.
    """

    def __init__(self, secret: bytes = b"sbchain-default-secret"):
        self._secret = secret
        self._keys: dict[str, bytes] = {}

    def _key(self, account: str) -> bytes:
        key = self._keys.get(account)
        if key is None:
            key = hmac.new(self._secret, account.encode(), hashlib.sha256).digest()
            self._keys[account] = key
        return key

    def sign(self, account: str, message: bytes) -> bytes:
        return hmac.new(self._key(account), message, hashlib.sha256).digest()

    def verify(self, account: str, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(account, message), signature)


DEFAULT_SCHEME = HmacScheme()


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ChainConfig:
    n: int = 4
    f: int = 1
    proposal_threshold: int = 1500
    pool_capacity: int = 10_000
    max_tx_size: int = 1024
    max_block_gas: int = 10_000_000
    flat_gas_fee: int = 0
    intrinsic_gas: int = 21
    nonce_window: int = 64
    fee_account: str = "@fees"

    def __post_init__(self):
        if self.n < 1 or self.f < 0 or self.n < 3 * self.f + 1:
            raise BadInput(f"need n >= 3f+1, got n={self.n} f={self.f}")
        if self.proposal_threshold < 1:
            raise BadInput("proposal_threshold must be >= 1")
        if self.pool_capacity < self.proposal_threshold:
            raise BadInput("pool_capacity must be >= proposal_threshold")
        if self.flat_gas_fee < 0 or self.intrinsic_gas < 0 or self.nonce_window < 1:
            raise BadInput("fee, intrinsic gas and nonce window must be non-negative")

    @classmethod
    def for_size(cls, n: int, **kw) -> "ChainConfig":
        """Config tolerating the maximum number of faults for ``n`` nodes."""
        return cls(n=n, f=(n - 1) // 3, **kw)


# -- domain types ------------------------------------------------------------


def _check_uint(name: str, value: int, limit: int = _U64_MAX) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise BadInput(f"{name} must be a non-negative integer, got {value!r}")
    if value > limit:
        raise EncodingLimit(f"{name}={value} exceeds encodable range")


@dataclass(frozen=True)
class Transaction:
    sender: str
    nonce: int
    recipient: Optional[str] = None
    amount: int = 0
    gas_limit: int = 21
    payload: bytes = b""
    signature: bytes = b""

    def __post_init__(self):
        _check_uint("nonce", self.nonce)
        _check_uint("amount", self.amount)
        _check_uint("gas_limit", self.gas_limit)
        if not isinstance(self.payload, bytes) or not isinstance(self.signature, bytes):
            raise BadInput("payload and signature must be bytes")

    @cached_property
    def encoded(self) -> bytes:
        return _encode_tx(self, signed=True)

    @cached_property
    def signing_bytes(self) -> bytes:
        return _encode_tx(self, signed=False)

    @cached_property
    def tx_id(self) -> Digest:
        return digest_of(self.encoded)

    @property
    def size(self) -> int:
        return len(self.encoded)

    @property
    def key(self) -> tuple[str, int]:
        return (self.sender, self.nonce)


def make_transaction(
    sender: str,
    nonce: int,
    recipient: Optional[str] = None,
    amount: int = 0,
    gas_limit: int = 21,
    payload: bytes = b"",
    scheme: SignatureScheme = DEFAULT_SCHEME,
) -> Transaction:
    unsigned = Transaction(sender, nonce, recipient, amount, gas_limit, payload)
    return replace(unsigned, signature=scheme.sign(sender, unsigned.signing_bytes))


def verify_signature(tx: Transaction, scheme: SignatureScheme = DEFAULT_SCHEME) -> bool:
    return scheme.verify(tx.sender, tx.signing_bytes, tx.signature)


@dataclass(frozen=True)
class Block:
    proposer: int
    transactions: tuple[Transaction, ...] = ()
    timestamp: int = 0
    parent_digest: Optional[Digest] = None
    digest: Optional[Digest] = None

    def __post_init__(self):
        _check_uint("proposer", self.proposer, _U32_MAX)
        _check_uint("timestamp", self.timestamp)
        if not isinstance(self.transactions, tuple):
            object.__setattr__(self, "transactions", tuple(self.transactions))
        keys = [tx.key for tx in self.transactions]
        if any(a > b for a, b in zip(keys, keys[1:])):
            raise BadInput("block transactions must be sorted by (sender, nonce)")
        for d in (self.parent_digest, self.digest):
            if d is not None and len(d) != DIGEST_SIZE:
                raise BadInput("digests are 32 bytes")

    @cached_property
    def encoded(self) -> bytes:
        return encode_block(self)

    @cached_property
    def payload_digest(self) -> Digest:
        """Digest of the block as proposed, before commit fills in hashes."""
        return digest_of(self.encoded)

    def computed_digest(self) -> Digest:
        return digest_of(encode_block(replace(self, digest=None)))

    def sealed(self, parent_digest: Optional[Digest], timestamp: int) -> "Block":
        """Copy with parent, timestamp and digest filled in (commit time)."""
        b = replace(self, parent_digest=parent_digest, timestamp=timestamp, digest=None)
        return replace(b, digest=b.computed_digest())


@dataclass(frozen=True)
class Superblock:
    index: int
    blocks: tuple[Block, ...] = field(default_factory=tuple)

    def __post_init__(self):
        _check_uint("index", self.index)
        if not isinstance(self.blocks, tuple):
            object.__setattr__(self, "blocks", tuple(self.blocks))
        proposers = [b.proposer for b in self.blocks]
        if any(a >= b for a, b in zip(proposers, proposers[1:])):
            raise BadInput("superblock blocks must have strictly ascending proposers")

    @cached_property
    def encoded(self) -> bytes:
        return encode_superblock(self)

    @cached_property
    def digest(self) -> Digest:
        return digest_of(self.encoded)

    def __len__(self) -> int:
        return len(self.blocks)


# -- encoding ----------------------------------------------------------------


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _blob(b: bytes) -> bytes:
    if len(b) > _U32_MAX:
        raise EncodingLimit("blob too large")
    return _U32.pack(len(b)) + b


def _encode_tx(tx: Transaction, signed: bool) -> bytes:
    parts = [bytes([TAG_TX if signed else TAG_TX_SIGNING]), _str(tx.sender)]
    if tx.recipient is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + _str(tx.recipient))
    parts += [_U64.pack(tx.nonce), _U64.pack(tx.amount), _U64.pack(tx.gas_limit), _blob(tx.payload)]
    if signed:
        parts.append(_blob(tx.signature))
    return b"".join(parts)


def _opt_digest(d: Optional[Digest]) -> bytes:
    return b"\x00" if d is None else b"\x01" + d


def encode_block(block: Block) -> bytes:
    parts = [
        bytes([TAG_BLOCK]),
        _U32.pack(block.proposer),
        _U64.pack(block.timestamp),
        _opt_digest(block.parent_digest),
        _opt_digest(block.digest),
        _U32.pack(len(block.transactions)),
    ]
    parts += [_blob(tx.encoded) for tx in block.transactions]
    return b"".join(parts)


def encode_superblock(sb: Superblock) -> bytes:
    parts = [bytes([TAG_SUPERBLOCK]), _U64.pack(sb.index), _U32.pack(len(sb.blocks))]
    parts += [_blob(b.encoded) for b in sb.blocks]
    return b"".join(parts)


Item = Union[Transaction, Block, Superblock]


def canonical_encode(item: Item, max_size: Optional[int] = None) -> bytes:
    if isinstance(item, (Transaction, Block, Superblock)):
        data = item.encoded
    else:
        raise TypeError(f"cannot encode {type(item).__name__}")
    if max_size is not None and len(data) > max_size:
        raise EncodingLimit(f"encoding is {len(data)} bytes, limit {max_size}")
    return data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.data):
            raise DecodeError("truncated input")
        out = self.data[self.pos : self.pos + k]
        self.pos += k
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def str(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(str(e)) from None

    def flag(self) -> bool:
        v = self.u8()
        if v not in (0, 1):
            raise DecodeError(f"bad presence flag {v}")
        return v == 1

    def opt_digest(self) -> Optional[Digest]:
        return self.take(DIGEST_SIZE) if self.flag() else None

    def end(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError("trailing bytes")


def _decode_tx(r: _Reader) -> Transaction:
    if r.u8() != TAG_TX:
        raise DecodeError("not a transaction")
    sender = r.str()
    recipient = r.str() if r.flag() else None
    nonce, amount, gas = r.u64(), r.u64(), r.u64()
    payload = r.blob()
    sig = r.blob()
    return Transaction(sender, nonce, recipient, amount, gas, payload, sig)


def _decode_block(r: _Reader) -> Block:
    if r.u8() != TAG_BLOCK:
        raise DecodeError("not a block")
    proposer = r.u32()
    ts = r.u64()
    parent = r.opt_digest()
    digest = r.opt_digest()
    txs = []
    for _ in range(r.u32()):
        sub = _Reader(r.blob())
        txs.append(_decode_tx(sub))
        sub.end()
    try:
        return Block(proposer, tuple(txs), ts, parent, digest)
    except BadInput as e:
        raise DecodeError(str(e)) from None


def canonical_decode(data: bytes) -> Item:
    if not data:
        raise DecodeError("empty input")
    r = _Reader(data)
    tag = data[0]
    if tag == TAG_TX:
        item: Item = _decode_tx(r)
    elif tag == TAG_BLOCK:
        item = _decode_block(r)
    elif tag == TAG_SUPERBLOCK:
        r.u8()
        index = r.u64()
        blocks = []
        for _ in range(r.u32()):
            sub = _Reader(r.blob())
            blocks.append(_decode_block(sub))
            sub.end()
        try:
            item = Superblock(index, tuple(blocks))
        except BadInput as e:
            raise DecodeError(str(e)) from None
    else:
        raise DecodeError(f"unknown tag {tag:#x}")
    r.end()
    return item


def sort_transactions(txs: Sequence[Transaction]) -> tuple[Transaction, ...]:
    return tuple(sorted(txs, key=lambda t: t.key))
