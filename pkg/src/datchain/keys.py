"""Ed25519 keypairs and addresses.

An address is the SHA-256 of the raw 32-byte public key, so every
transaction can carry its public key and be checked against the claimed
sender without a registry lookup.
"""

from __future__ import annotations

import hashlib

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


def address_of(public_key: bytes) -> bytes:
    if len(public_key) != 32:
        raise ValueError("Ed25519 public key must be 32 bytes")
    return hashlib.sha256(public_key).digest()


class KeyPair:
    """Ed25519 signing key plus the derived address."""

    __slots__ = ("_sk", "public_key", "address")

    def __init__(self, sk: Ed25519PrivateKey):
        self._sk = sk
        self.public_key = sk.public_key().public_bytes_raw()
        self.address = address_of(self.public_key)

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(Ed25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        """Deterministic keypair from 32 secret bytes."""
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    def private_bytes(self) -> bytes:
        return self._sk.private_bytes_raw()

    def sign(self, message: bytes) -> bytes:
        return self._sk.sign(message)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False
