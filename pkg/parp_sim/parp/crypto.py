"""Keccak digests, recoverable secp256k1 signatures and address derivation."""
import struct
from eth_keys import keys
from eth_keys.constants import SECPK1_N
from eth_keys.exceptions import BadSignature
from eth_utils import ValidationError, keccak

from .errors import ParpError

DIGEST_SIZE = 32
SIGNATURE_SIZE = 65
ADDRESS_SIZE = 20


class CryptoError(ParpError):
    """Base class for signature and key failures."""


class MalformedSignature(CryptoError):
    """Raised when a signature cannot be parsed or no signer can be recovered from it."""


def digest(data):
    """Hash a byte string to a 32-byte keccak-256 digest."""
    return keccak(bytes(data))


def address_of(public_key):
    """Derive the 20-byte address: the last 20 bytes of the digest of the public key."""
    return public_key.to_canonical_address()


def keygen(rng):
    """Draw a private key from the injected RNG and return it with its address."""
    while True:
        secret = rng.getrandbits(256)
        if 0 < secret < SECPK1_N:
            break
    private_key = keys.PrivateKey(secret.to_bytes(32, "big"))
    return private_key, address_of(private_key.public_key)


def sign(message_digest, private_key):
    """Sign a 32-byte digest, returning the 65-byte r || s || recovery-id signature."""
    if len(message_digest) != DIGEST_SIZE:
        raise CryptoError(f"Expected a {DIGEST_SIZE}-byte digest, got {len(message_digest)} bytes.")
    return private_key.sign_msg_hash(bytes(message_digest)).to_bytes()


def recover(message_digest, signature):
    """Return the address that produced signature over message_digest."""
    if len(signature) != SIGNATURE_SIZE or len(message_digest) != DIGEST_SIZE:
        raise MalformedSignature(f"Expected {SIGNATURE_SIZE} bytes, got {len(signature)}.")
    try:
        parsed = keys.Signature(signature_bytes=bytes(signature))
        public_key = parsed.recover_public_key_from_msg_hash(bytes(message_digest))
    except (BadSignature, ValidationError, ValueError) as err:
        raise MalformedSignature(str(err)) from err
    return address_of(public_key)


def signed_by(message_digest, signature, address):
    """Return True when signature recovers to address; malformed signatures count as False."""
    try:
        return recover(message_digest, signature) == address
    except MalformedSignature:
        return False


def payment_digest(alpha, amount):
    """Digest covered by the cumulative payment signature sigma_a."""
    return digest(struct.pack(">QQ", alpha, amount))


def consent_digest(lc_address, expiry):
    """Digest covered by the node's channel consent in the handshake."""
    return digest(bytes(lc_address) + struct.pack(">Q", expiry))


def receipt_digest(alpha):
    """Digest covered by the node's signature on an opened channel id."""
    return digest(struct.pack(">Q", alpha))


def address_from_public_bytes(raw):
    """Derive the address of a 64-byte uncompressed public key received over the wire."""
    try:
        return address_of(keys.PublicKey(bytes(raw)))
    except (ValidationError, ValueError) as err:
        raise CryptoError(f"Not a public key: {err}") from err
