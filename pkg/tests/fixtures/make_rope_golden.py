"""Regenerate rope_golden.json with a pure-Python complex-number oracle.

Run from the repository root: ``python3 tests/fixtures/make_rope_golden.py``.
The oracle uses only ``cmath`` so the frozen vectors are independent of the
package's vectorized implementation.
"""

import cmath
import json
import random
from pathlib import Path

BASES = [10.0, 100.0, 1000.0, 10000.0]


def rotate(vec, pos, d_head, base):
    n = d_head // 6
    out = []
    for j in range(d_head // 2):
        theta = base ** (-(j // 3) / n)
        z = complex(vec[2 * j], vec[2 * j + 1]) * cmath.exp(1j * theta * pos[j % 3])
        out += [z.real, z.imag]
    return out


def main():
    rnd = random.Random(20240611)
    cases = []
    for d_head in (6, 12, 24):
        for _ in range(4):
            vec = [rnd.uniform(-1, 1) for _ in range(d_head)]
            pos = [rnd.uniform(-3, 3) for _ in range(3)]
            per_base = {str(b): rotate(vec, pos, d_head, b) for b in BASES}
            mean = [sum(per_base[str(b)][c] for b in BASES) / len(BASES) for c in range(d_head)]
            cases.append({"d_head": d_head, "vec": vec, "pos": pos,
                          "per_base": per_base, "hierarchical": mean})
    out = Path(__file__).with_name("rope_golden.json")
    out.write_text(json.dumps({"bases": BASES, "cases": cases}, indent=1) + "\n")


if __name__ == "__main__":
    main()
