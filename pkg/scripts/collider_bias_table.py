#!/usr/bin/env python3
"""How far conditioning on the collider moves the treatment coefficient.

Prints the t coefficient of several OLS adjustments on a large simulated
cohort, including the noisy-proxy regression at a sweep of proxy-noise
variances, next to the interventional effect.
"""
import sys

import numpy as np

from collidernet import ols, scm


def coef(design, y):
    return ols.fit(np.column_stack(design), y).coefficients[1]


def main(n: int = 100_000, seed: int = 1) -> int:
    p = scm.ScmParams()
    c = scm.sample_cohort(p, n, seed)
    rng = np.random.default_rng(seed)
    print(f"P(t=1)                          {c.t.mean():.4f}")
    print(f"do(t=1) - do(t=0)               {scm.interventional_ate(p, n, seed, stream=1):.4f}")
    print(f"y ~ t                           {coef([c.t], c.y):.4f}")
    print(f"y ~ t + z                       {coef([c.t, c.z], c.y):.4f}")
    print(f"y ~ t + x + z                   {coef([c.t, c.x, c.z], c.y):.4f}")
    for var in (0.05, 0.1, 0.2, 0.3, 0.5):
        xp = c.x + np.sqrt(var) * rng.standard_normal(n)
        print(f"y ~ t + x' + z   Var(x'-x)={var:<4}  {coef([c.t, xp, c.z], c.y):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
