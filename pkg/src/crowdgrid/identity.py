"""Enrollment keypairs and signatures (ed25519)."""

from __future__ import annotations

from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


@dataclass(frozen=True)
class Keypair:
    secret: bytes  # 32-byte private seed
    public: bytes  # 32-byte public key

    @classmethod
    def generate(cls) -> "Keypair":
        priv = Ed25519PrivateKey.generate()
        return cls(secret=priv.private_bytes_raw(), public=priv.public_key().public_bytes_raw())

    @classmethod
    def from_seed(cls, seed: bytes) -> "Keypair":
        priv = Ed25519PrivateKey.from_private_bytes(seed)
        return cls(secret=seed, public=priv.public_key().public_bytes_raw())

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.secret).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False
