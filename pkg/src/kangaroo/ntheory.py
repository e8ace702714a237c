"""Small number-theory helpers: primality, NTT-friendly primes, roots of unity."""

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24, which covers every modulus used here."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def ntt_primes(bits: int, modulus: int, count: int, below: int | None = None) -> list[int]:
    """The ``count`` largest primes p < 2**bits (and < ``below``) with p = 1 mod ``modulus``."""
    top = min(1 << bits, below) if below else 1 << bits
    p = (top - 1) // modulus * modulus + 1
    if p >= top:
        p -= modulus
    out = []
    while len(out) < count:
        if p < 2:
            raise ValueError(f"not enough {bits}-bit primes = 1 mod {modulus}")
        if is_prime(p):
            out.append(p)
        p -= modulus
    return out


def _factor_small(n: int) -> list[int]:
    fs, d = [], 2
    while d * d <= n:
        if n % d == 0:
            fs.append(d)
            while n % d == 0:
                n //= d
        d += 1
    if n > 1:
        fs.append(n)
    return fs


def primitive_root_of_unity(order: int, q: int) -> int:
    """Smallest-generator-derived primitive ``order``-th root of unity mod prime q."""
    if (q - 1) % order:
        raise ValueError(f"{q} has no primitive {order}-th root of unity")
    cofactor = (q - 1) // order
    factors = _factor_small(order)
    for g in range(2, q):
        w = pow(g, cofactor, q)
        if all(pow(w, order // f, q) != 1 for f in factors):
            return w
    raise ValueError("no root found")


def bit_reverse(x: int, bits: int) -> int:
    return int(format(x, f"0{bits}b")[::-1], 2) if bits else 0
