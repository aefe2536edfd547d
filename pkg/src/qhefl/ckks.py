"""CKKS approximate homomorphic encryption over the RNS ring in :mod:`qhefl.ring`.

The last entry of ``coeff_modulus_bits`` is the special prime P used only
for key switching (SEAL convention); the others form the data chain
q_0 .. q_L.  A ciphertext at level ``l`` lives modulo q_0 * ... * q_l.
Ciphertexts and plaintexts are kept in the evaluation (NTT) domain.

Key switching uses one digit per data prime: the switched polynomial's
residue mod q_i is multiplied by a key that carries ``P * target`` in row i
only, and the sum is divided by P with rounding.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import ring
from .errors import (
    CapacityError,
    ChecksumMismatch,
    ContextMismatch,
    ContractViolation,
    LevelExhausted,
    ParameterError,
    ParseError,
    TruncatedFrame,
)
from .ring import RnsPoly

SCALE_MARGIN_BITS = 2
SCALE_RTOL = 1e-9


@dataclass(frozen=True)
class CkksParams:
    n: int
    coeff_modulus_bits: tuple[int, ...]
    scale: float
    sigma: float = 3.2
    label: str = "custom"

    @property
    def slots(self) -> int:
        return self.n // 2

    @property
    def scale_bits(self) -> int:
        return int(round(math.log2(self.scale)))

    def validate(self) -> None:
        if not ring.is_power_of_two(self.n) or self.n < 4:
            raise ParameterError(f"polynomial degree {self.n} must be a power of two >= 4")
        bits = tuple(self.coeff_modulus_bits)
        if len(bits) < 2:
            raise ParameterError("need at least one data prime and one special prime")
        if self.scale <= 1 or 2.0 ** self.scale_bits != self.scale:
            raise ParameterError(f"scale {self.scale} is not a power of two")
        middle = bits[1:-1] or bits[:1]
        if self.scale_bits > min(middle) + SCALE_MARGIN_BITS:
            raise ParameterError("scale exceeds the rescaling primes' width")
        if self.scale_bits >= bits[0]:
            raise ParameterError("scale must be smaller than the first prime")
        if self.sigma <= 0:
            raise ParameterError("sigma must be positive")


PAPER = CkksParams(8192, (60, 40, 40, 60), 2.0**40, label="paper")
# Tiny ring for exact small-scale checks.  Offers no security at all.
TOY = CkksParams(16, (40, 30, 40), 2.0**20, label="toy")
PROFILES = {"paper": PAPER, "toy": TOY}


def _pick_primes(bits: tuple[int, ...], n: int) -> list[int]:
    wanted: dict[int, int] = {}
    for b in bits:
        wanted[b] = wanted.get(b, 0) + 1
    pools = {b: ring.find_ntt_primes(b, n, c) for b, c in wanted.items()}
    taken = {b: 0 for b in wanted}
    out = []
    for b in bits:
        out.append(pools[b][taken[b]])
        taken[b] += 1
    return out


class Context:
    """Prime chain, NTT tables and encoder tables for one parameter set."""

    def __init__(self, params: CkksParams):
        params.validate()
        self.params = params
        self.n = params.n
        self.slots = params.slots
        primes = _pick_primes(tuple(params.coeff_modulus_bits), params.n)
        mods = [ring.prime_modulus(q, params.n) for q in primes]
        self.data: tuple[ring.PrimeModulus, ...] = tuple(mods[:-1])
        self.special: ring.PrimeModulus = mods[-1]
        self.max_level = len(self.data) - 1
        self.scale = params.scale
        h = hashlib.sha256(repr((params.n, tuple(primes), params.scale)).encode())
        self.fingerprint = h.digest()[:8]

        n = self.n
        two_n = 2 * n
        k = np.array([pow(5, j, two_n) for j in range(self.slots)], dtype=np.int64)
        self._slot_idx = (k - 1) // 2
        self._conj_idx = n - 1 - self._slot_idx
        i = np.arange(n)
        self._zeta = np.exp(1j * np.pi * i / n)
        self._zeta_inv = np.conj(self._zeta)

    def moduli_at(self, level: int) -> tuple[ring.PrimeModulus, ...]:
        if not 0 <= level <= self.max_level:
            raise ContractViolation(f"level {level} outside [0, {self.max_level}]")
        return self.data[: level + 1]

    def key_moduli(self, level: int | None = None) -> tuple[ring.PrimeModulus, ...]:
        level = self.max_level if level is None else level
        return self.moduli_at(level) + (self.special,)

    def modulus_bits(self, level: int) -> float:
        return sum(math.log2(m.q) for m in self.moduli_at(level))

    def __repr__(self):
        return f"Context(n={self.n}, primes={[m.q for m in self.data]}+P={self.special.q})"


@lru_cache(maxsize=16)
def gen_context(params: CkksParams) -> Context:
    """Build (and memoise) the context for ``params``."""
    return Context(params)


@dataclass(frozen=True, eq=False)
class Plaintext:
    poly: RnsPoly
    scale: float
    level: int


@dataclass(frozen=True, eq=False)
class Ciphertext:
    parts: tuple[RnsPoly, ...]
    scale: float
    level: int
    noise_bits: float = 0.0

    def __post_init__(self):
        if len(self.parts) not in (2, 3):
            raise ContractViolation("a ciphertext has 2 or 3 parts")

    @property
    def size(self) -> int:
        return len(self.parts)

    def noise_budget(self, ctx: Context) -> float:
        """Heuristic headroom in bits; informational only."""
        used = max(self.noise_bits, math.log2(self.scale) + 1)
        return ctx.modulus_bits(self.level) - 1 - used

    def __eq__(self, other):
        return (
            isinstance(other, Ciphertext)
            and self.scale == other.scale
            and self.level == other.level
            and len(self.parts) == len(other.parts)
            and all(a == b for a, b in zip(self.parts, other.parts))
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class KeySwitchKey:
    """One (b_i, a_i) pair per data prime, over data primes + special prime."""

    pairs: tuple[tuple[RnsPoly, RnsPoly], ...]


@dataclass(eq=False)
class KeySet:
    secret: RnsPoly
    secret_coeffs: np.ndarray
    public: tuple[RnsPoly, RnsPoly]
    relin: KeySwitchKey
    galois: dict[int, KeySwitchKey] = field(default_factory=dict)

    def public_view(self) -> "PublicKeys":
        """Copy without the secret key (what a server may hold)."""
        return PublicKeys(self.public, self.relin, dict(self.galois))


@dataclass(eq=False)
class PublicKeys:
    public: tuple[RnsPoly, RnsPoly]
    relin: KeySwitchKey
    galois: dict[int, KeySwitchKey] = field(default_factory=dict)


# -- encoding ----------------------------------------------------------------


def _round_to_poly(coeffs: np.ndarray, moduli) -> RnsPoly:
    r = np.rint(coeffs)
    if not np.all(np.isfinite(r)):
        raise ParameterError("non-finite value in encoding")
    if np.max(np.abs(r), initial=0.0) < 2.0**62:
        return ring.from_int_coeffs(r.astype(np.int64), moduli)
    return ring.from_int_coeffs(np.array([int(v) for v in r], dtype=object), moduli)


def encode(values, scale: float | None = None, ctx: Context | None = None, level: int | None = None) -> Plaintext:
    """Real vector -> plaintext via the inverse canonical embedding.

    Slot j is the evaluation at zeta^(5^j); conjugate slots receive the complex
    conjugates, so the polynomial has real coefficients.
    """
    if ctx is None:
        raise ContractViolation("encode needs a context")
    scale = ctx.scale if scale is None else float(scale)
    level = ctx.max_level if level is None else level
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size > ctx.slots:
        raise CapacityError(f"{v.size} values exceed {ctx.slots} slots")
    if not np.all(np.isfinite(v)):
        raise ParameterError("non-finite value in encoding")
    evals = np.zeros(ctx.n, dtype=np.complex128)
    evals[ctx._slot_idx[: v.size]] = v
    evals[ctx._conj_idx[: v.size]] = v
    x = np.fft.fft(evals) / ctx.n
    coeffs = (x * ctx._zeta_inv).real * scale
    poly = _round_to_poly(coeffs, ctx.moduli_at(level)).to_ntt()
    return Plaintext(poly, scale, level)


def decode(pt: Plaintext, ctx: Context) -> np.ndarray:
    coeffs = ring.to_int_coeffs(pt.poly).astype(np.float64)
    x = coeffs / pt.scale * ctx._zeta
    evals = ctx.n * np.fft.ifft(x)
    return evals[ctx._slot_idx].real


# -- keys --------------------------------------------------------------------


def _automorphism_rows(rows: np.ndarray, moduli, g: int) -> np.ndarray:
    """Coefficient-domain X -> X^g on every residue row."""
    n = rows.shape[1]
    idx = (np.arange(n) * g) % (2 * n)
    neg = idx >= n
    dest = idx % n
    out = np.empty_like(rows)
    for r, m in enumerate(moduli):
        src = rows[r]
        vals = np.where(neg & (src != 0), np.uint64(m.q) - src, src)
        out[r, dest] = vals
    return out


def apply_automorphism(p: RnsPoly, g: int) -> RnsPoly:
    c = p.to_coeff()
    out = RnsPoly(_automorphism_rows(c.rows, c.moduli, g), c.moduli, False)
    return out.to_ntt() if p.ntt else out


def galois_element(step: int, n: int) -> int:
    return pow(5, step % (n // 2), 2 * n)


def _make_ksk(ctx: Context, secret: RnsPoly, target: RnsPoly, rng) -> KeySwitchKey:
    full = ctx.key_moduli()
    p_big = ctx.special.q
    pairs = []
    for i in range(len(ctx.data)):
        a = ring.sample_uniform(full, ctx.n, rng, ntt=True)
        e = ring.gaussian_poly(full, ctx.params.sigma, rng).to_ntt()
        b = ring.poly_add(ring.poly_negate(ring.poly_mul(a, secret)), e)
        shifted = ring.poly_mul_scalar(target.select([i]), p_big)
        rows = b.rows.copy()
        rows[i] = ring.poly_add(b.select([i]), shifted).rows[0]
        pairs.append((RnsPoly(rows, full, True), a))
    return KeySwitchKey(tuple(pairs))


def keygen(ctx: Context, rng: np.random.Generator, galois_steps=()) -> KeySet:
    """Secret (ternary), public, relinearisation and optional Galois keys."""
    full = ctx.key_moduli()
    s_coeffs = ring.sample_ternary(ctx.n, rng)
    s = ring.from_int_coeffs(s_coeffs, full).to_ntt()
    data = ctx.moduli_at(ctx.max_level)
    a = ring.sample_uniform(data, ctx.n, rng, ntt=True)
    e = ring.gaussian_poly(data, ctx.params.sigma, rng).to_ntt()
    s_data = s.select(range(len(data)))
    pk0 = ring.poly_add(ring.poly_negate(ring.poly_mul(a, s_data)), e)
    relin = _make_ksk(ctx, s, ring.poly_mul(s, s), rng)
    keys = KeySet(s, s_coeffs, (pk0, a), relin)
    if galois_steps:
        keys.galois.update(gen_galois_keys(ctx, keys, galois_steps, rng))
    return keys


def gen_galois_keys(ctx: Context, keys: KeySet, steps, rng: np.random.Generator) -> dict[int, KeySwitchKey]:
    """Key-switching keys from s(X^g) to s for each rotation step."""
    full = ctx.key_moduli()
    out = {}
    for step in steps:
        g = galois_element(step, ctx.n)
        s_rot = apply_automorphism(ring.from_int_coeffs(keys.secret_coeffs, full), g).to_ntt()
        out[int(step)] = _make_ksk(ctx, keys.secret, s_rot, rng)
    return out


def _restrict(p: RnsPoly, level: int, with_special: bool) -> RnsPoly:
    idx = list(range(level + 1))
    if with_special:
        idx.append(len(p.moduli) - 1)
    return p.select(idx)


def key_switch(ctx: Context, d: RnsPoly, ksk: KeySwitchKey, level: int) -> tuple[RnsPoly, RnsPoly]:
    """Return (c0, c1) with c0 + c1*s ~= d * target, both in the NTT domain."""
    d_coeff = d.to_coeff()
    mods = ctx.key_moduli(level)
    acc0 = ring.zeros(mods, ntt=True)
    acc1 = ring.zeros(mods, ntt=True)
    for i in range(level + 1):
        ext = RnsPoly(ring.extend_small_row(d_coeff.rows[i], mods), mods, False).to_ntt()
        b, a = ksk.pairs[i]
        acc0 = acc0 + ext * _restrict(b, level, True)
        acc1 = acc1 + ext * _restrict(a, level, True)
    return ring.divide_round_by_last(acc0), ring.divide_round_by_last(acc1)


# -- encryption ----------------------------------------------------------------


def _fresh_noise_bits(ctx: Context) -> float:
    return math.log2(6 * ctx.params.sigma * math.sqrt(4 * ctx.n / 3))


def encrypt_with_randomness(pt: Plaintext, pk, ctx: Context, u: RnsPoly, e0: RnsPoly, e1: RnsPoly) -> Ciphertext:
    """Deterministic core of :func:`encrypt` for explicitly supplied u, e0, e1."""
    if hasattr(pk, "public"):
        pk = pk.public
    pk0, pk1 = (_restrict(p, pt.level, False) for p in pk)
    c0 = pk0 * u + e0 + pt.poly
    c1 = pk1 * u + e1
    return Ciphertext((c0, c1), pt.scale, pt.level, _fresh_noise_bits(ctx))


def sample_encryption_randomness(ctx: Context, level: int, rng) -> tuple[RnsPoly, RnsPoly, RnsPoly]:
    mods = ctx.moduli_at(level)
    u = ring.ternary_poly(mods, rng).to_ntt()
    e0 = ring.gaussian_poly(mods, ctx.params.sigma, rng).to_ntt()
    e1 = ring.gaussian_poly(mods, ctx.params.sigma, rng).to_ntt()
    return u, e0, e1


def encrypt(pt: Plaintext, pk, ctx: Context, rng: np.random.Generator) -> Ciphertext:
    """Public-key encryption; ``pk`` is a KeySet, PublicKeys or (pk0, pk1)."""
    if hasattr(pk, "public"):
        pk = pk.public
    if pk[0].moduli[: pt.level + 1] != pt.poly.moduli:
        raise ContractViolation("plaintext level does not match the key chain")
    u, e0, e1 = sample_encryption_randomness(ctx, pt.level, rng)
    return encrypt_with_randomness(pt, pk, ctx, u, e0, e1)


def decrypt(ct: Ciphertext, sk, ctx: Context) -> Plaintext:
    s_full = sk.secret if hasattr(sk, "secret") else sk
    s = _restrict(s_full, ct.level, False)
    m = ct.parts[0] + ct.parts[1] * s
    if ct.size == 3:
        m = m + ct.parts[2] * (s * s)
    return Plaintext(m, ct.scale, ct.level)


def encrypt_values(values, keys, ctx: Context, rng, scale=None) -> Ciphertext:
    return encrypt(encode(values, scale, ctx), keys, ctx, rng)


def decrypt_values(ct: Ciphertext, keys, ctx: Context) -> np.ndarray:
    return decode(decrypt(ct, keys, ctx), ctx)


# -- homomorphic operations --------------------------------------------------------


def _log2_add(a: float, b: float) -> float:
    return max(a, b) + math.log2(1 + 2.0 ** (-abs(a - b)))


def _check_compatible(scale_a, level_a, scale_b, level_b):
    if level_a != level_b:
        raise ContractViolation(f"level mismatch ({level_a} vs {level_b})")
    if not math.isclose(scale_a, scale_b, rel_tol=SCALE_RTOL):
        raise ContractViolation(f"scale mismatch ({scale_a:.6g} vs {scale_b:.6g})")


def add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_compatible(a.scale, a.level, b.scale, b.level)
    if a.size != b.size:
        raise ContractViolation("cannot add ciphertexts of different sizes")
    parts = tuple(x + y for x, y in zip(a.parts, b.parts))
    return Ciphertext(parts, a.scale, a.level, _log2_add(a.noise_bits, b.noise_bits))


def add_many(cts) -> Ciphertext:
    cts = list(cts)
    if not cts:
        raise ContractViolation("nothing to add")
    acc = cts[0]
    for ct in cts[1:]:
        acc = add(acc, ct)
    return acc


def add_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    _check_compatible(ct.scale, ct.level, pt.scale, pt.level)
    return replace(ct, parts=(ct.parts[0] + pt.poly,) + ct.parts[1:])


def mul_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    """Slot-wise product with a plaintext; scale multiplies, rescale separately."""
    if ct.level != pt.level:
        raise ContractViolation(f"level mismatch ({ct.level} vs {pt.level})")
    parts = tuple(p * pt.poly for p in ct.parts)
    noise = ct.noise_bits + math.log2(pt.scale) + 0.5 * math.log2(ct.parts[0].n)
    return Ciphertext(parts, ct.scale * pt.scale, ct.level, noise)


def encode_multiplier(values, ct: Ciphertext, ctx: Context) -> Plaintext:
    """Encode at the value of the prime the next rescale drops.

    mul_plain followed by rescale then returns exactly to ``ct.scale``.
    """
    return encode(values, float(ctx.data[ct.level].q), ctx, ct.level)


def mul(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.size != 2 or b.size != 2:
        raise ContractViolation("multiply expects relinearised (2-part) ciphertexts")
    if a.level != b.level:
        raise ContractViolation(f"level mismatch ({a.level} vs {b.level})")
    a0, a1 = a.parts
    b0, b1 = b.parts
    parts = (a0 * b0, a0 * b1 + a1 * b0, a1 * b1)
    noise = max(a.noise_bits + math.log2(b.scale), b.noise_bits + math.log2(a.scale)) + math.log2(a0.n)
    return Ciphertext(parts, a.scale * b.scale, a.level, noise)


def relinearize(ct: Ciphertext, rlk, ctx: Context) -> Ciphertext:
    if ct.size != 3:
        raise ContractViolation("relinearize expects a 3-part ciphertext")
    rlk = rlk.relin if hasattr(rlk, "relin") else rlk
    k0, k1 = key_switch(ctx, ct.parts[2], rlk, ct.level)
    parts = (ct.parts[0] + k0, ct.parts[1] + k1)
    return Ciphertext(parts, ct.scale, ct.level, _log2_add(ct.noise_bits, math.log2(8 * ctx.n)))


def rescale(ct: Ciphertext, ctx: Context) -> Ciphertext:
    if ct.level == 0:
        raise LevelExhausted("ciphertext is already at level 0")
    q = ctx.data[ct.level].q
    parts = tuple(ring.rescale_drop_prime(p) for p in ct.parts)
    noise = _log2_add(ct.noise_bits - math.log2(q), math.log2(math.sqrt(ctx.n) + 1))
    return Ciphertext(parts, ct.scale / q, ct.level - 1, noise)


def rotate(ct: Ciphertext, step: int, galois_keys, ctx: Context) -> Ciphertext:
    """Cyclic left rotation of the slot vector by ``step``."""
    if ct.size != 2:
        raise ContractViolation("rotate expects a 2-part ciphertext")
    galois_keys = galois_keys.galois if hasattr(galois_keys, "galois") else galois_keys
    if step not in galois_keys:
        raise ContractViolation(f"no Galois key for step {step}")
    g = galois_element(step, ctx.n)
    c0 = apply_automorphism(ct.parts[0], g)
    c1 = apply_automorphism(ct.parts[1], g)
    k0, k1 = key_switch(ctx, c1, galois_keys[step], ct.level)
    return Ciphertext((c0 + k0, k1), ct.scale, ct.level, _log2_add(ct.noise_bits, math.log2(8 * ctx.n)))


# -- serialisation -------------------------------------------------------------

MAGIC = b"CKT1"
FORMAT_VERSION = 1
# magic, version, level, parts, scale exponent, exact scale, noise estimate, context fingerprint
_HEADER = struct.Struct("<4sHBBhdd8s")


def serialize(ct: Ciphertext, ctx: Context) -> bytes:
    exp = int(round(math.log2(ct.scale)))
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, ct.level, ct.size, exp, ct.scale, ct.noise_bits, ctx.fingerprint)
    body = np.stack([p.rows for p in ct.parts]).astype("<u8", copy=False).tobytes()
    blob = head + body
    return blob + struct.pack("<I", zlib.crc32(blob))


def serialized_size(ctx: Context, level: int, parts: int = 2) -> int:
    return _HEADER.size + parts * (level + 1) * ctx.n * 8 + 4


def deserialize(data: bytes, ctx: Context) -> Ciphertext:
    data = bytes(data)
    if len(data) < _HEADER.size + 4:
        raise TruncatedFrame("ciphertext frame shorter than its header")
    magic, version, level, nparts, _exp, scale, noise, fp = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported ciphertext format version {version}")
    if nparts not in (2, 3) or level > ctx.max_level:
        raise ParseError("corrupt ciphertext header")
    expected = serialized_size(ctx, level, nparts)
    if len(data) != expected:
        if len(data) < expected:
            raise TruncatedFrame(f"ciphertext frame has {len(data)} bytes, expected {expected}")
        raise ParseError("trailing bytes after ciphertext frame")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumMismatch("ciphertext CRC32 mismatch")
    if fp != ctx.fingerprint:
        raise ContextMismatch("ciphertext was produced under a different context")
    mods = ctx.moduli_at(level)
    arr = np.frombuffer(data, dtype="<u8", offset=_HEADER.size, count=nparts * (level + 1) * ctx.n)
    arr = arr.astype(np.uint64).reshape(nparts, level + 1, ctx.n)
    for p in arr:
        if np.any(p >= np.array([m.q for m in mods], dtype=np.uint64)[:, None]):
            raise ParseError("residue out of range for its prime")
    parts = tuple(RnsPoly(arr[i].copy(), mods, True) for i in range(nparts))
    return Ciphertext(parts, scale, level, noise)


def save_keys(keys: KeySet, path) -> None:
    """Store the key set as a compressed npz archive."""
    arrays = {
        "secret_coeffs": keys.secret_coeffs,
        "public": np.stack([p.rows for p in keys.public]),
        "relin": np.stack([np.stack([b.rows, a.rows]) for b, a in keys.relin.pairs]),
    }
    for step, ksk in keys.galois.items():
        arrays[f"galois_{step}"] = np.stack([np.stack([b.rows, a.rows]) for b, a in ksk.pairs])
    np.savez_compressed(path, **arrays)


def load_keys(path, ctx: Context) -> KeySet:
    z = np.load(path)
    full = ctx.key_moduli()
    data = ctx.moduli_at(ctx.max_level)
    s_coeffs = z["secret_coeffs"]
    secret = ring.from_int_coeffs(s_coeffs, full).to_ntt()
    pub = tuple(RnsPoly(r.copy(), data, True) for r in z["public"])

    def ksk(arr):
        return KeySwitchKey(tuple((RnsPoly(p[0].copy(), full, True), RnsPoly(p[1].copy(), full, True)) for p in arr))

    galois = {int(k.split("_", 1)[1]): ksk(z[k]) for k in z.files if k.startswith("galois_")}
    return KeySet(secret, s_coeffs, pub, ksk(z["relin"]), galois)
