"""Cryptographic primitives shared by every protocol module.

AES, CMAC and X25519 come from ``cryptography``; this module only fixes
key-length rules, truncation, padding and the deterministic random source
the simulator depends on.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
import struct
from dataclasses import dataclass
from typing import Sequence

from cryptography.hazmat.primitives import hashes, padding
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.cmac import CMAC
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from simcan.errors import AlgoMismatch, DecryptError, InvalidPeerKey, KeyLenError

BLOCK = 16
NONCE_LEN = 16
KEY_LENGTHS = (8, 16, 32)


class KeyKind(enum.Enum):
    PL_KEY = "PL_KEY"
    SHARED_KEY = "SHARED_KEY"
    CARMAKER_KEY = "CARMAKER_KEY"
    ECC_PRIVATE = "ECC_PRIVATE"
    ECC_PUBLIC = "ECC_PUBLIC"


@dataclass(frozen=True)
class KeyMaterial:
    data: bytes
    kind: KeyKind = KeyKind.PL_KEY

    def __post_init__(self):
        n = len(self.data)
        if self.kind in (KeyKind.ECC_PRIVATE, KeyKind.ECC_PUBLIC):
            if n != 32:
                raise KeyLenError(f"{self.kind.value} must be 32 bytes, got {n}")
        elif n not in KEY_LENGTHS:
            raise KeyLenError(f"key length {n} not in {KEY_LENGTHS}")

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        # never print key bytes
        fp = hashlib.sha256(self.data).hexdigest()[:8]
        return f"KeyMaterial({self.kind.value}, {len(self.data)}B, fp={fp})"


class MacVariant(enum.Enum):
    CMAC_AES256 = "CMAC_AES256"
    HASH_MAC_256 = "HASH_MAC_256"


_SUPPORTED_BITS = {
    MacVariant.CMAC_AES256: (64, 128),
    MacVariant.HASH_MAC_256: (64, 128, 256),
}


@dataclass(frozen=True)
class MacAlgo:
    variant: MacVariant
    digest_len_bits: int

    @property
    def digest_len(self) -> int:
        return self.digest_len_bits // 8

    def check(self) -> None:
        if self.digest_len_bits not in _SUPPORTED_BITS[self.variant]:
            raise AlgoMismatch(
                f"{self.variant.value} cannot emit {self.digest_len_bits}-bit digests"
            )

    def to_str(self) -> str:
        return f"{self.variant.value}/{self.digest_len_bits}"

    @classmethod
    def parse(cls, text: str) -> "MacAlgo":
        variant, _, bits = text.partition("/")
        algo = cls(MacVariant(variant), int(bits))
        algo.check()
        return algo


CMAC_128 = MacAlgo(MacVariant.CMAC_AES256, 128)
HMAC_256 = MacAlgo(MacVariant.HASH_MAC_256, 256)


class RandomSource:
    """Seeded generator; the simulator never touches OS entropy."""

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = random.Random(seed)

    def bytes(self, n: int) -> bytes:
        return self._rng.randbytes(n)

    def nonce(self) -> bytes:
        return self._rng.randbytes(NONCE_LEN)

    def randrange(self, *args) -> int:
        return self._rng.randrange(*args)

    def choice(self, seq):
        return self._rng.choice(seq)

    def shuffle(self, seq) -> None:
        self._rng.shuffle(seq)

    def random(self) -> float:
        return self._rng.random()

    def fork(self, label: str) -> "RandomSource":
        """Independent child stream, stable under changes to sibling streams."""
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return RandomSource(int.from_bytes(digest[:8], "big"))


# -- Curve25519 -------------------------------------------------------------

def x25519_public(private: bytes) -> bytes:
    key = X25519PrivateKey.from_private_bytes(private)
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def ecdh_keypair(rng: RandomSource) -> tuple[KeyMaterial, KeyMaterial]:
    private = rng.bytes(32)
    return (
        KeyMaterial(private, KeyKind.ECC_PRIVATE),
        KeyMaterial(x25519_public(private), KeyKind.ECC_PUBLIC),
    )


def ecdh_shared(private: KeyMaterial, peer_public: KeyMaterial) -> bytes:
    if len(private.data) != 32 or len(peer_public.data) != 32:
        raise KeyLenError("X25519 inputs must be 32 bytes")
    key = X25519PrivateKey.from_private_bytes(private.data)
    try:
        return key.exchange(X25519PublicKey.from_public_bytes(peer_public.data))
    except ValueError as exc:
        # raised by the backend on an all-zero result (low-order peer point)
        raise InvalidPeerKey(str(exc)) from exc


# -- AES --------------------------------------------------------------------

def _aes256(key: KeyMaterial | bytes) -> algorithms.AES:
    raw = key.data if isinstance(key, KeyMaterial) else key
    if len(raw) != 32:
        raise KeyLenError(f"AES-256 needs a 32-byte key, got {len(raw)}")
    return algorithms.AES(raw)


def aes_cbc_encrypt(key: KeyMaterial | bytes, iv: bytes, plaintext: bytes) -> bytes:
    if len(iv) != BLOCK:
        raise ValueError("IV must be 16 bytes")
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(_aes256(key), modes.CBC(iv)).encryptor()
    return enc.update(padded) + enc.finalize()


def aes_cbc_decrypt(key: KeyMaterial | bytes, iv: bytes, ciphertext: bytes) -> bytes:
    if len(iv) != BLOCK:
        raise ValueError("IV must be 16 bytes")
    if not ciphertext or len(ciphertext) % BLOCK:
        raise DecryptError("ciphertext is not a whole number of blocks")
    dec = Cipher(_aes256(key), modes.CBC(iv)).decryptor()
    padded = dec.update(ciphertext) + dec.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise DecryptError("invalid padding") from exc


def aes_encrypt_block(key: KeyMaterial | bytes, block: bytes) -> bytes:
    """Single-block AES-256 (ECB of exactly one block)."""
    if len(block) != BLOCK:
        raise ValueError("block must be 16 bytes")
    enc = Cipher(_aes256(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


# -- MAC --------------------------------------------------------------------

def mac(algo: MacAlgo, key: KeyMaterial | bytes, message: bytes) -> bytes:
    algo.check()
    raw = key.data if isinstance(key, KeyMaterial) else key
    if algo.variant is MacVariant.CMAC_AES256:
        # AES-CMAC keyed by a 16-byte short key runs as AES-128
        if len(raw) not in (16, 32):
            raise AlgoMismatch(f"CMAC needs a 16- or 32-byte key, got {len(raw)}")
        c = CMAC(algorithms.AES(raw))
        c.update(message)
        full = c.finalize()
    else:
        full = hmac.new(raw, message, hashlib.sha256).digest()
    return full[: algo.digest_len]


def digest_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


def kdf(inputs: Sequence[bytes], label: bytes, out_len: int = 32,
        kind: KeyKind = KeyKind.SHARED_KEY) -> KeyMaterial:
    """HMAC-SHA256 extract-and-expand keyed by ``label``.

    Inputs are length-prefixed before concatenation so that neither the
    split points nor the order of the inputs can collide.
    """
    if out_len not in KEY_LENGTHS:
        raise KeyLenError(f"kdf output length {out_len} not in {KEY_LENGTHS}")
    if not any(inputs):
        raise ValueError("kdf needs at least one non-empty input")
    ikm = b"".join(struct.pack(">H", len(x)) + x for x in inputs)
    out = HKDF(algorithm=hashes.SHA256(), length=out_len, salt=label, info=label).derive(ikm)
    return KeyMaterial(out, kind)
