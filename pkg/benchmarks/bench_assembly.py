"""Element-stiffness kernel: compiled extension against the numpy fallback.

    python3 benchmarks/bench_assembly.py --n 16 --repeat 5
"""

import argparse
import timeit

import numpy as np

from glcoupling import _kernels_py
from glcoupling.fem import Physics, assemble
from glcoupling.mesh import MaterialField, structured_mesh

try:
    from glcoupling import _kernels
except ImportError:  # extension not built
    _kernels = None


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=16, help="elements per axis of the cube mesh")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    m = structured_mesh((0.0, 0.0, 0.0), (args.n,) * 3, 1.0 / args.n, 1e-9 / args.n)
    X = m.nodes[m.elements]
    coef = np.ones(m.n_elements)
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["compiled"] = _kernels
    else:
        print("compiled extension not available; timing the fallback only")

    print(f"{m.n_elements} hex elements")
    print(f"{'kernel':<12}{'backend':<10}{'best (ms)':>12}{'speedup':>10}")
    for kind, name in ((_kernels_py.POISSON, "poisson"), (_kernels_py.ELASTICITY, "elasticity")):
        times = {}
        for label, mod in backends.items():
            t = timeit.repeat(lambda: mod.element_matrices(X, coef, kind, 0.3), number=1, repeat=args.repeat)
            times[label] = min(t)
        if len(backends) == 2:
            Kc, _ = _kernels.element_matrices(X, coef, kind, 0.3)
            Kp, _ = _kernels_py.element_matrices(X, coef, kind, 0.3)
            assert np.allclose(Kc, Kp, rtol=1e-12, atol=1e-14), "backends disagree"
        for label, t in times.items():
            speed = times["python"] / t
            print(f"{name:<12}{label:<10}{1e3 * t:>12.2f}{speed:>9.1f}x")

    t = timeit.repeat(lambda: assemble(m, Physics("elasticity"), MaterialField.homogeneous(m)),
                      number=1, repeat=args.repeat)
    print(f"full elasticity assembly with the active backend: {1e3 * min(t):.1f} ms")


if __name__ == "__main__":
    main()
