"""Cross-fitted AIPW estimate of an average treatment effect on a confounded design.

Run: python demos/ddml_ate.py
"""

import numpy as np

from scoreflow import dgp
from scoreflow.inference import ate_crossfit, gformula_mean, ipw_means, linear_learner


def main():
    d = dgp.confounded_design(5000, np.random.default_rng(0))
    rep = ate_crossfit(d.X, d.A, d.Y, 5, linear_learner, rng=np.random.default_rng(1))
    print(f"AIPW ATE {rep.psi:.4f}  SE {rep.se:.4f}  95% CI [{rep.ci95[0]:.4f}, {rep.ci95[1]:.4f}]"
          "  (truth 1.0)")
    naive = d.Y[d.A == 1].mean() - d.Y[d.A == 0].mean()
    print(f"difference in means {naive:.4f}")
    m1, m0 = ipw_means(d.X, d.A, d.Y, dgp.confounded_e)
    print(f"IPW with the true propensity {m1 - m0:.4f}")
    g = gformula_mean(d.X, dgp.confounded_mu1) - gformula_mean(d.X, dgp.confounded_mu0)
    print(f"g-formula with the true outcome means {g:.4f}")


if __name__ == "__main__":
    main()
