"""Writes high-precision values of (phi(b) - phi(a)) / (Phi(b) - Phi(a)).

Run from the repository root:
    python3 tools/kernel_reference.py > crates/core/tests/data/kernel_reference.csv
"""
import mpmath as mp

mp.mp.dps = 60


def phi(z):
    return mp.mpf(0) if mp.isinf(z) else mp.npdf(z)


def correction(a, b):
    # 1 - Phi(a) and friends through erfc, so nothing cancels at 60 digits
    if a >= 0:
        p = (mp.erfc(a / mp.sqrt(2)) - mp.erfc(b / mp.sqrt(2))) / 2
    elif b <= 0:
        p = (mp.erfc(-b / mp.sqrt(2)) - mp.erfc(-a / mp.sqrt(2))) / 2
    else:
        p = 1 - (mp.erfc(b / mp.sqrt(2)) + mp.erfc(-a / mp.sqrt(2))) / 2
    return (phi(b) - phi(a)) / p


def fmt(z):
    if mp.isinf(z):
        return "inf" if z > 0 else "-inf"
    return mp.nstr(z, 17)


inf = mp.inf
pairs = []
grid = list(range(-8, 9))
for a in grid:
    for b in grid:
        if a < b:
            pairs.append((mp.mpf(a), mp.mpf(b)))
for z in grid:
    pairs.append((mp.mpf(z), inf))
    pairs.append((-inf, mp.mpf(z)))
extra = [
    (-1.0886, inf), (6, 6.5), (7.9, 8), (-8, -7.9), (3, 3.000001),
    (0.25, 0.5), (-0.5, -0.25), (-3, 0.001), (12, 13), (20, inf),
    (30, 38), (-38, -30), (37, 38), (-inf, -38), (38, inf), (-38, 38), (-38, 1),
]
pairs += [(mp.mpf(a) if not mp.isinf(a) else a, mp.mpf(b) if not mp.isinf(b) else b) for a, b in extra]

print("a,b,correction")
for a, b in pairs:
    print(f"{fmt(a)},{fmt(b)},{mp.nstr(correction(a, b), 20)}")
