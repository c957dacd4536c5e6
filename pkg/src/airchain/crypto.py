"""Hashing and secp256k1 signing for ledger records.

Transaction and batch headers are signed with ECDSA over secp256k1 and
payloads are validated with SHA-512 digests.  Signing is deterministic
(RFC 6979 nonces, low-S normalization) so the same header bytes always
yield the same 64-byte compact signature, which keeps fixtures and block
ids reproducible across machines.

The curve arithmetic is self-contained: Jacobian coordinates, a
fixed-base comb table for the generator, and Straus interleaving for
verification.  The test suite cross-checks signatures against an
independent OpenSSL-backed implementation.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass
from functools import lru_cache

# secp256k1 domain parameters
P = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F
N = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
GX = 0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798
GY = 0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8

_HALF_N = N // 2


class CryptoError(ValueError):
    """Invalid keys, scalars, signatures or points."""


def sha512_digest(data: bytes) -> str:
    """Hex SHA-512 digest of arbitrary bytes."""
    return hashlib.sha512(data).hexdigest()


def sha256_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# --- field / point arithmetic (Jacobian coordinates, a = 0) ---

_INF = (0, 0, 0)


def _jac_double(pt):
    x, y, z = pt
    if not y:
        return _INF
    ysq = y * y % P
    s = 4 * x * ysq % P
    m = 3 * x * x % P
    nx = (m * m - 2 * s) % P
    ny = (m * (s - nx) - 8 * ysq * ysq) % P
    nz = 2 * y * z % P
    return (nx, ny, nz)


def _jac_add_mixed(pt, ax, ay):
    # pt in Jacobian, (ax, ay) affine
    if pt is _INF or not pt[2]:
        return (ax, ay, 1)
    x1, y1, z1 = pt
    z1z1 = z1 * z1 % P
    u2 = ax * z1z1 % P
    s2 = ay * z1 * z1z1 % P
    if u2 == x1:
        if s2 == y1:
            return _jac_double(pt)
        return _INF
    h = (u2 - x1) % P
    hh = h * h % P
    i = 4 * hh % P
    j = h * i % P
    r = 2 * (s2 - y1) % P
    v = x1 * i % P
    nx = (r * r - j - 2 * v) % P
    ny = (r * (v - nx) - 2 * y1 * j) % P
    nz = (z1 + h) * (z1 + h) % P
    nz = (nz - z1z1 - hh) % P
    return (nx, ny, nz)


def _jac_to_affine(pt):
    x, y, z = pt
    if not z:
        raise CryptoError("point at infinity")
    zinv = pow(z, -1, P)
    zinv2 = zinv * zinv % P
    return (x * zinv2 % P, y * zinv2 * zinv % P)


def _affine_table(ax, ay, size=16):
    """[0] unused; [d] = d * (ax, ay) in affine form."""
    table = [None] * size
    table[1] = (ax, ay)
    acc = (ax, ay, 1)
    for d in range(2, size):
        acc = _jac_add_mixed(acc, ax, ay)
        table[d] = _jac_to_affine(acc)
    return table


def _build_comb():
    # comb[i][d] = d * (16 ** i) * G, affine; scalar mult of G becomes
    # at most 63 mixed additions with no doublings.
    comb = []
    ax, ay = GX, GY
    for _ in range(64):
        comb.append(_affine_table(ax, ay))
        acc = (ax, ay, 1)
        for _ in range(4):
            acc = _jac_double(acc)
        ax, ay = _jac_to_affine(acc)
    return comb


_G_COMB = _build_comb()


def _mul_g(k: int):
    """k * G in affine coordinates, k in [1, N)."""
    acc = _INF
    for i in range(64):
        d = (k >> (4 * i)) & 0xF
        if d:
            ax, ay = _G_COMB[i][d]
            acc = _jac_add_mixed(acc, ax, ay)
    return _jac_to_affine(acc)


def _shamir(u1: int, u2: int, qx: int, qy: int):
    """u1 * G + u2 * Q with interleaved 4-bit windows."""
    gt = _affine_table(GX, GY)
    qt = _affine_table(qx, qy)
    acc = _INF
    started = False
    for shift in range(252, -4, -4):
        if started:
            acc = _jac_double(acc)
            acc = _jac_double(acc)
            acc = _jac_double(acc)
            acc = _jac_double(acc)
        d1 = (u1 >> shift) & 0xF
        d2 = (u2 >> shift) & 0xF
        if d1:
            acc = _jac_add_mixed(acc, *gt[d1])
            started = True
        if d2:
            acc = _jac_add_mixed(acc, *qt[d2])
            started = True
    return acc


# --- key handling ---


@dataclass(frozen=True)
class KeyPair:
    """secp256k1 keypair; both fields lowercase hex at rest."""

    private_key: str  # 64 hex chars (32-byte scalar)
    public_key: str  # 66 hex chars (33-byte compressed point)

    @property
    def scalar(self) -> int:
        return int(self.private_key, 16)


def _compress(ax: int, ay: int) -> str:
    prefix = "03" if ay & 1 else "02"
    return prefix + format(ax, "064x")


def decompress_public_key(public_key: str) -> tuple[int, int]:
    """Compressed hex point -> affine (x, y); raises on invalid points."""
    if len(public_key) != 66 or public_key[:2] not in ("02", "03"):
        raise CryptoError("malformed compressed public key")
    try:
        x = int(public_key[2:], 16)
    except ValueError as exc:
        raise CryptoError("malformed compressed public key") from exc
    if x >= P:
        raise CryptoError("public key x out of field")
    y_sq = (pow(x, 3, P) + 7) % P
    y = pow(y_sq, (P + 1) // 4, P)
    if y * y % P != y_sq:
        raise CryptoError("point not on curve")
    if (y & 1) != (public_key[:2] == "03"):
        y = P - y
    return x, y


def keypair_from_private(private_key: str) -> KeyPair:
    try:
        d = int(private_key, 16)
    except ValueError as exc:
        raise CryptoError("malformed private key hex") from exc
    if not 1 <= d < N:
        raise CryptoError("private scalar out of range")
    ax, ay = _mul_g(d)
    return KeyPair(format(d, "064x"), _compress(ax, ay))


def keypair_generate(seed: bytes | None = None) -> KeyPair:
    """Generate a keypair, deterministically when a 32-byte seed is given.

    The seed is interpreted as a big-endian scalar and must lie in
    [1, N); anything else is rejected rather than reduced, so callers
    notice bad seeds instead of silently colliding.
    """
    if seed is not None:
        if len(seed) != 32:
            raise CryptoError("seed must be exactly 32 bytes")
        d = int.from_bytes(seed, "big")
        if not 1 <= d < N:
            raise CryptoError("seed is not a valid nonzero scalar below the curve order")
        return keypair_from_private(format(d, "064x"))
    while True:
        d = int.from_bytes(os.urandom(32), "big")
        if 1 <= d < N:
            return keypair_from_private(format(d, "064x"))


# --- RFC 6979 deterministic ECDSA ---


def _rfc6979_nonce(z: int, d: int):
    h1 = z.to_bytes(32, "big")
    x = d.to_bytes(32, "big")
    v = b"\x01" * 32
    k = b"\x00" * 32
    k = hmac.new(k, v + b"\x00" + x + h1, hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    k = hmac.new(k, v + b"\x01" + x + h1, hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    while True:
        v = hmac.new(k, v, hashlib.sha256).digest()
        candidate = int.from_bytes(v, "big")
        if 1 <= candidate < N:
            yield candidate
        k = hmac.new(k, v + b"\x00", hashlib.sha256).digest()
        v = hmac.new(k, v, hashlib.sha256).digest()


def _bits2int(digest: bytes) -> int:
    return int.from_bytes(digest, "big")


def sign(message: bytes, key: KeyPair) -> str:
    """Sign message bytes; returns the 128-hex compact r||s signature.

    The message is hashed with SHA-256 and the nonce is derived per
    RFC 6979, so signing is a pure function of (message, private key).
    """
    if not message:
        raise CryptoError("refusing to sign empty message")
    d = key.scalar
    if not 1 <= d < N:
        raise CryptoError("private scalar out of range")
    z = _bits2int(sha256_bytes(message)) % N
    for k in _rfc6979_nonce(z, d):
        rx, _ = _mul_g(k)
        r = rx % N
        if r == 0:
            continue
        s = pow(k, -1, N) * (z + r * d) % N
        if s == 0:
            continue
        if s > _HALF_N:
            s = N - s
        return format(r, "064x") + format(s, "064x")
    raise CryptoError("nonce generation exhausted")  # pragma: no cover


def _parse_signature(signature: str) -> tuple[int, int]:
    if len(signature) != 128 or not all(c in "0123456789abcdef" for c in signature):
        raise CryptoError("malformed signature hex")
    return int(signature[:64], 16), int(signature[64:], 16)


@lru_cache(maxsize=1 << 16)
def _verify_cached(message: bytes, signature: str, public_key: str) -> bool:
    try:
        r, s = _parse_signature(signature)
        qx, qy = decompress_public_key(public_key)
    except CryptoError:
        return False
    if not (1 <= r < N and 1 <= s < N):
        return False
    z = _bits2int(sha256_bytes(message)) % N
    w = pow(s, -1, N)
    u1 = z * w % N
    u2 = r * w % N
    pt = _shamir(u1, u2, qx, qy)
    if pt is _INF or not pt[2]:
        return False
    x, _ = _jac_to_affine(pt)
    return x % N == r


def verify(message: bytes, signature: str, public_key: str) -> bool:
    """True iff signature validates for message under the public key.

    Results are memoized process-wide: the journal re-checks the same
    header signatures at several pipeline stages and on every node of an
    in-process simulation.
    """
    return _verify_cached(bytes(message), signature, public_key)


def read_key_file(path) -> KeyPair:
    """Load the two-line key file format (private hex, public hex)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh.read().splitlines() if line.strip()]
    if len(lines) < 2:
        raise CryptoError(f"key file {path} needs two lines (private, public)")
    pair = keypair_from_private(lines[0])
    if pair.public_key != lines[1]:
        raise CryptoError(f"key file {path}: public key does not match private key")
    return pair


def write_key_file(path, pair: KeyPair) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(pair.private_key + "\n" + pair.public_key + "\n")
