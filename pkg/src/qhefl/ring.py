"""Negacyclic polynomial arithmetic in Z_q[X]/(X^n + 1) with RNS coefficients.

Every residue row lives in a ``uint64`` array.  Products of two residues below
2^60 do not fit in 64 bits, so modular multiplication estimates the quotient
``floor(a*b/q)`` in x87 extended precision (64-bit mantissa) and recovers the
exact remainder with wrapping 64-bit integer arithmetic.  The estimate is off
by at most one, which a single conditional correction absorbs.

Evaluation-domain rows are stored in bit-reversed order: entry ``i`` holds the
value of the polynomial at ``psi ** (2 * bitrev(i) + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, LevelExhausted, ParameterError

_LD = np.longdouble
if np.finfo(_LD).nmant < 63:  # pragma: no cover - platform guard
    raise ImportError("qhefl.ring needs an extended-precision long double (x86-64)")

MAX_PRIME_BITS = 61


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def bit_reverse(i: int, bits: int) -> int:
    out = 0
    for _ in range(bits):
        out = (out << 1) | (i & 1)
        i >>= 1
    return out


def _is_prime(q: int) -> bool:
    from sympy import isprime

    return bool(isprime(q))


def find_primitive_root(n: int, q: int) -> int:
    """Smallest primitive 2n-th root of unity mod q (q prime, 2n | q-1)."""
    if (q - 1) % (2 * n):
        raise ParameterError(f"q={q} is not 1 mod 2n={2 * n}")
    k = (q - 1) // (2 * n)
    best = None
    for g in range(2, q):
        cand = pow(g, k, q)
        if pow(cand, n, q) == q - 1:
            best = cand
            break
    if best is None:
        raise ParameterError(f"no primitive {2 * n}-th root mod {q}")
    # the primitive roots are best**odd; take the smallest for reproducibility
    # only when the group is small enough to enumerate cheaply
    if 2 * n <= 1 << 14:
        sq = best * best % q
        cur, smallest = best, best
        for _ in range(n - 1):
            cur = cur * sq % q
            smallest = min(smallest, cur)
        best = smallest
    return best


def find_ntt_primes(bits: int, n: int, count: int = 1, exclude: tuple[int, ...] = ()) -> list[int]:
    """Descending search for ``count`` primes below 2**bits with q = 1 mod 2n."""
    if not 2 <= bits <= MAX_PRIME_BITS:
        raise ParameterError(f"prime width {bits} outside [2, {MAX_PRIME_BITS}]")
    m = 2 * n
    q = ((1 << bits) - 1) // m * m + 1
    if q >= 1 << bits:
        q -= m
    found: list[int] = []
    lower = 1 << (bits - 1)
    while len(found) < count:
        if q < lower or q < 2:
            raise ParameterError(f"no {bits}-bit prime = 1 mod {m} left (found {len(found)}/{count})")
        if q not in exclude and _is_prime(q):
            found.append(q)
        q -= m
    return found


class PrimeModulus:
    """One NTT-friendly prime together with its twiddle tables for degree n."""

    def __init__(self, q: int, n: int, psi: int | None = None):
        if not is_power_of_two(n):
            raise ParameterError(f"ring degree {n} is not a power of two")
        if q.bit_length() > MAX_PRIME_BITS:
            raise ParameterError(f"prime {q} wider than {MAX_PRIME_BITS} bits")
        if q % (2 * n) != 1:
            raise ParameterError(f"q={q} is not 1 mod 2n={2 * n}")
        self.q = q
        self.n = n
        self.psi = find_primitive_root(n, q) if psi is None else psi
        if pow(self.psi, n, q) != q - 1:
            raise ParameterError("psi is not a primitive 2n-th root of unity")
        logn = n.bit_length() - 1
        psi_inv = pow(self.psi, -1, q)
        pw = np.empty(n, dtype=object)
        pw_inv = np.empty(n, dtype=object)
        a, b = 1, 1
        for i in range(n):
            pw[i], pw_inv[i] = a, b
            a, b = a * self.psi % q, b * psi_inv % q
        rev = np.array([bit_reverse(i, logn) for i in range(n)])
        self.psi_rev = pw[rev].astype(np.uint64)
        self.psi_inv_rev = pw_inv[rev].astype(np.uint64)
        self.n_inv = pow(n, -1, q)

    def __eq__(self, other):
        return isinstance(other, PrimeModulus) and (self.q, self.n) == (other.q, other.n)

    def __hash__(self):
        return hash((self.q, self.n))

    def __repr__(self):
        return f"PrimeModulus(q={self.q}, n={self.n})"


@lru_cache(maxsize=None)
def prime_modulus(q: int, n: int) -> PrimeModulus:
    """Cached constructor so twiddle tables are computed once per (q, n)."""
    return PrimeModulus(q, n)


class _Chain:
    """Stacked per-prime constants for vectorised arithmetic over a chain."""

    def __init__(self, moduli: tuple[PrimeModulus, ...]):
        self.moduli = moduli
        qs = [m.q for m in moduli]
        self.q = np.array(qs, dtype=np.uint64)[:, None]
        self.q_i = self.q.view(np.int64)
        self.q_ld = self.q.astype(_LD)
        self.qinv_ld = _LD(1) / self.q_ld
        self.psi = np.stack([m.psi_rev for m in moduli])
        self.psi_sh = self.psi.astype(_LD) / self.q_ld
        self.psi_inv = np.stack([m.psi_inv_rev for m in moduli])
        self.psi_inv_sh = self.psi_inv.astype(_LD) / self.q_ld
        self.n_inv = np.array([m.n_inv for m in moduli], dtype=np.uint64)[:, None]
        self.n_inv_sh = self.n_inv.astype(_LD) / self.q_ld


@lru_cache(maxsize=64)
def _chain(moduli: tuple[PrimeModulus, ...]) -> _Chain:
    return _Chain(moduli)


# -- raw row kernels ---------------------------------------------------------
# All kernels take uint64 arrays whose leading axis indexes the primes of the
# chain; q-like arguments are broadcastable columns.


def _fix(r, q_i):
    """Map int64 values in [-q, 2q) to [0, q)."""
    r += (r >> 63) & q_i
    r -= q_i
    r += (r >> 63) & q_i
    return r.view(np.uint64)


def _mulmod(a, b, q, q_i, qinv_ld):
    quo = (a.astype(_LD) * b.astype(_LD) * qinv_ld).astype(np.uint64)
    return _fix((a * b - quo * q).view(np.int64), q_i)


def _mulmod_shoup(a, w, w_sh, q, q_i):
    """a*w mod q for a fixed multiplier w with w_sh = w/q in long double."""
    quo = (a.astype(_LD) * w_sh).astype(np.uint64)
    return _fix((a * w - quo * q).view(np.int64), q_i)


def _addmod(a, b, q_i):
    r = (a + b).view(np.int64) - q_i
    r += (r >> 63) & q_i
    return r.view(np.uint64)


def _submod(a, b, q_i):
    r = a.view(np.int64) - b.view(np.int64)
    r += (r >> 63) & q_i
    return r.view(np.uint64)


def _ntt_rows(rows: np.ndarray, ch: _Chain) -> np.ndarray:
    """Cooley-Tukey negacyclic NTT, natural order in, bit-reversed out."""
    L, n = rows.shape
    a = rows.copy()
    q = ch.q[:, :, None]
    q_i = ch.q_i[:, :, None]
    m, t = 1, n
    while m < n:
        t //= 2
        blk = a.reshape(L, m, 2, t)
        w = ch.psi[:, m:2 * m, None]
        w_sh = ch.psi_sh[:, m:2 * m, None]
        u = blk[:, :, 0, :].copy()
        v = _mulmod_shoup(blk[:, :, 1, :], w, w_sh, q, q_i)
        blk[:, :, 0, :] = _addmod(u, v, q_i)
        blk[:, :, 1, :] = _submod(u, v, q_i)
        m *= 2
    return a


def _intt_rows(rows: np.ndarray, ch: _Chain) -> np.ndarray:
    """Gentleman-Sande inverse NTT, bit-reversed in, natural order out."""
    L, n = rows.shape
    a = rows.copy()
    q = ch.q[:, :, None]
    q_i = ch.q_i[:, :, None]
    t, m = 1, n
    while m > 1:
        h = m // 2
        blk = a.reshape(L, h, 2, t)
        w = ch.psi_inv[:, h:m, None]
        w_sh = ch.psi_inv_sh[:, h:m, None]
        u = blk[:, :, 0, :].copy()
        v = blk[:, :, 1, :].copy()
        blk[:, :, 0, :] = _addmod(u, v, q_i)
        blk[:, :, 1, :] = _mulmod_shoup(_submod(u, v, q_i), w, w_sh, q, q_i)
        t *= 2
        m = h
    return _mulmod_shoup(a, ch.n_inv, ch.n_inv_sh, ch.q, ch.q_i)


# -- RnsPoly -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RnsPoly:
    """A ring element as one residue row per prime of ``moduli``.

    ``ntt`` flags the evaluation domain.  Treat instances as immutable.
    """

    rows: np.ndarray
    moduli: tuple[PrimeModulus, ...]
    ntt: bool = False

    def __post_init__(self):
        if self.rows.dtype != np.uint64 or self.rows.ndim != 2:
            raise ContractViolation("rows must be a 2-D uint64 array")
        if self.rows.shape[0] != len(self.moduli):
            raise ContractViolation("one residue row per prime required")
        if any(m.n != self.rows.shape[1] for m in self.moduli):
            raise ContractViolation("row length differs from ring degree")

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    @property
    def chain(self) -> _Chain:
        return _chain(self.moduli)

    def __eq__(self, other):
        return (
            isinstance(other, RnsPoly)
            and self.moduli == other.moduli
            and self.ntt == other.ntt
            and np.array_equal(self.rows, other.rows)
        )

    __hash__ = None

    def __add__(self, other):
        return poly_add(self, other)

    def __sub__(self, other):
        return poly_sub(self, other)

    def __neg__(self):
        return poly_negate(self)

    def __mul__(self, other):
        return poly_mul(self, other)

    def drop_last(self) -> "RnsPoly":
        """Restrict to all primes but the last (plain truncation, no division)."""
        return RnsPoly(self.rows[:-1].copy(), self.moduli[:-1], self.ntt)

    def select(self, idx) -> "RnsPoly":
        idx = list(idx)
        return RnsPoly(self.rows[idx].copy(), tuple(self.moduli[i] for i in idx), self.ntt)

    def to_ntt(self) -> "RnsPoly":
        return self if self.ntt else ntt_forward(self)

    def to_coeff(self) -> "RnsPoly":
        return ntt_inverse(self) if self.ntt else self


def _check_same(a: RnsPoly, b: RnsPoly):
    if a.moduli != b.moduli:
        raise ContractViolation("operands live over different prime chains")
    if a.ntt != b.ntt:
        raise ContractViolation("operands are in different domains")


def zeros(moduli, ntt=False) -> RnsPoly:
    moduli = tuple(moduli)
    return RnsPoly(np.zeros((len(moduli), moduli[0].n), dtype=np.uint64), moduli, ntt)


def from_int_coeffs(coeffs, moduli) -> RnsPoly:
    """Coefficient-domain poly from signed integer coefficients.

    ``coeffs`` may be an int64 array or an object array of Python ints.
    """
    moduli = tuple(moduli)
    c = np.asarray(coeffs)
    if c.dtype == object:
        rows = np.stack([np.array([int(v) % m.q for v in c], dtype=np.uint64) for m in moduli])
    else:
        c = c.astype(np.int64)
        rows = np.stack([(c % np.int64(m.q)).astype(np.uint64) for m in moduli])
    return RnsPoly(rows, moduli, False)


def crt_basis(moduli) -> tuple[int, list[int]]:
    big_q = 1
    for m in moduli:
        big_q *= m.q
    basis = []
    for m in moduli:
        qi_hat = big_q // m.q
        basis.append(qi_hat * pow(qi_hat % m.q, -1, m.q) % big_q)
    return big_q, basis


def to_int_coeffs(p: RnsPoly) -> np.ndarray:
    """Centered integer coefficients in (-Q/2, Q/2] via CRT (object array)."""
    p = p.to_coeff()
    if len(p.moduli) == 1:
        q = p.moduli[0].q
        r = p.rows[0].astype(object)
        return np.where(r > q // 2, r - q, r)
    big_q, basis = crt_basis(p.moduli)
    acc = np.zeros(p.n, dtype=object)
    for row, b in zip(p.rows, basis):
        acc = acc + row.astype(object) * b
    acc = acc % big_q
    return np.where(acc > big_q // 2, acc - big_q, acc)


def ntt_forward(p: RnsPoly) -> RnsPoly:
    if p.ntt:
        raise ContractViolation("ntt_forward expects a coefficient-domain poly")
    return RnsPoly(_ntt_rows(p.rows, p.chain), p.moduli, True)


def ntt_inverse(p: RnsPoly) -> RnsPoly:
    if not p.ntt:
        raise ContractViolation("ntt_inverse expects an evaluation-domain poly")
    return RnsPoly(_intt_rows(p.rows, p.chain), p.moduli, False)


def poly_add(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    _check_same(a, b)
    return RnsPoly(_addmod(a.rows, b.rows, a.chain.q_i), a.moduli, a.ntt)


def poly_sub(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    _check_same(a, b)
    return RnsPoly(_submod(a.rows, b.rows, a.chain.q_i), a.moduli, a.ntt)


def poly_negate(a: RnsPoly) -> RnsPoly:
    return RnsPoly(_submod(np.zeros_like(a.rows), a.rows, a.chain.q_i), a.moduli, a.ntt)


def poly_mul(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    """Negacyclic product.  Coefficient-domain inputs are converted and back."""
    _check_same(a, b)
    ch = a.chain
    if a.ntt:
        return RnsPoly(_mulmod(a.rows, b.rows, ch.q, ch.q_i, ch.qinv_ld), a.moduli, True)
    prod = _mulmod(_ntt_rows(a.rows, ch), _ntt_rows(b.rows, ch), ch.q, ch.q_i, ch.qinv_ld)
    return RnsPoly(_intt_rows(prod, ch), a.moduli, False)


def poly_mul_scalar(a: RnsPoly, c: int) -> RnsPoly:
    """Multiply by an integer constant (reduced per prime)."""
    ch = a.chain
    w = np.array([c % m.q for m in a.moduli], dtype=np.uint64)[:, None]
    return RnsPoly(_mulmod_shoup(a.rows, w, w.astype(_LD) / ch.q_ld, ch.q, ch.q_i), a.moduli, a.ntt)


# -- sampling ----------------------------------------------------------------


def sample_uniform(moduli, n: int, rng: np.random.Generator, ntt: bool = True) -> RnsPoly:
    """Uniform residues per prime; by CRT this is uniform over Z_Q.

    Uniform polys are equally uniform in either domain, so the caller picks
    the flag without paying for a transform.
    """
    moduli = tuple(moduli)
    if any(m.n != n for m in moduli):
        raise ContractViolation("ring degree mismatch")
    rows = np.stack([rng.integers(0, m.q, size=n, dtype=np.uint64) for m in moduli])
    return RnsPoly(rows, moduli, ntt)


def sample_ternary(n: int, rng: np.random.Generator) -> np.ndarray:
    """Signed coefficients uniform over {-1, 0, 1}."""
    return rng.integers(-1, 2, size=n, dtype=np.int64)


def sample_gaussian(n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Rounded continuous Gaussian with standard deviation ``sigma``."""
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    return np.rint(rng.normal(0.0, sigma, size=n)).astype(np.int64)


def ternary_poly(moduli, rng) -> RnsPoly:
    moduli = tuple(moduli)
    return from_int_coeffs(sample_ternary(moduli[0].n, rng), moduli)


def gaussian_poly(moduli, sigma, rng) -> RnsPoly:
    moduli = tuple(moduli)
    return from_int_coeffs(sample_gaussian(moduli[0].n, sigma, rng), moduli)


# -- modulus switching -------------------------------------------------------


def _centered_row_to(row: np.ndarray, q_src: int, moduli) -> np.ndarray:
    """Reduce a centered residue row mod q_src into each target prime."""
    signed = row.view(np.int64).copy()
    signed -= np.where(signed > q_src // 2, np.int64(q_src), np.int64(0))
    return np.stack([(signed % np.int64(m.q)).astype(np.uint64) for m in moduli])


def divide_round_by_last(p: RnsPoly) -> RnsPoly:
    """round(p / q_last) over the remaining primes; keeps the input domain."""
    if len(p.moduli) < 2:
        raise LevelExhausted("cannot drop the last remaining prime")
    last = p.moduli[-1]
    rest = p.moduli[:-1]
    last_row = p.rows[-1:]
    if p.ntt:
        last_row = _intt_rows(last_row, _chain((last,)))
    lifted = _centered_row_to(last_row[0], last.q, rest)
    ch = _chain(rest)
    if p.ntt:
        lifted = _ntt_rows(lifted, ch)
    diff = _submod(p.rows[:-1], lifted, ch.q_i)
    inv = np.array([pow(last.q, -1, m.q) for m in rest], dtype=np.uint64)[:, None]
    out = _mulmod_shoup(diff, inv, inv.astype(_LD) / ch.q_ld, ch.q, ch.q_i)
    return RnsPoly(out, rest, p.ntt)


def rescale_drop_prime(p: RnsPoly) -> RnsPoly:
    """Divide by the last prime of the chain with rounding, dropping that prime."""
    return divide_round_by_last(p)


def extend_small_row(row: np.ndarray, moduli) -> np.ndarray:
    """Reduce a row of non-negative residues (< 2^63) into each prime of moduli."""
    return np.stack([row % np.uint64(m.q) for m in moduli])
