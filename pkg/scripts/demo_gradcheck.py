#!/usr/bin/env python3
"""Finite-difference sanity pass over the tensor engine.

Checks a few representative ops and the differentiable patch sampler against
central differences in float64, printing max relative errors.
"""

import numpy as np

from partvit import autodiff as ad
from partvit.autodiff import Tensor, gradient_check
from partvit.parts import grid_sample_patches


def main():
    rng = np.random.default_rng(0)
    coeff = Tensor(rng.standard_normal((3, 4)))   # frozen so f is deterministic
    cases = {
        "gelu": lambda t: ad.sum_(ad.gelu(t)),
        "softmax": lambda t: ad.sum_(ad.mul(ad.softmax(ad.reshape(t, (3, 4))), coeff)),
        "layer_norm": lambda t: ad.sum_(ad.layer_norm(
            ad.reshape(t, (3, 4)),
            Tensor(np.ones(4)), Tensor(np.zeros(4)))),
    }
    for name, f in cases.items():
        rep = gradient_check(f, Tensor(rng.standard_normal(12), dtype=np.float64),
                             tol=1e-5)
        print(f"{name:>12}: max rel err {rep.max_rel_error:.2e}  "
              f"{'ok' if rep.passed else 'FAIL'}")

    img = Tensor(rng.random((1, 1, 8, 8)), dtype=np.float64)
    lm = Tensor(rng.uniform(0.3, 0.7, (1, 2, 2)), dtype=np.float64)
    coeff = Tensor(rng.standard_normal((1, 2, 1, 3, 3)), dtype=np.float64)
    rep = gradient_check(lambda t: ad.sum_(ad.mul(grid_sample_patches(img, t, 3), coeff)),
                         lm, eps=1e-6, tol=1e-4)
    print(f"{'sampler':>12}: max rel err {rep.max_rel_error:.2e}  "
          f"{'ok' if rep.passed else 'FAIL'} (wrt landmark coordinates)")


if __name__ == "__main__":
    main()
