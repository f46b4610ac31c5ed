"""Watch a two-concept posterior lock onto the true coin as observations accumulate."""

import math

from userip import bayes

model = bayes.ConceptModel.bernoulli(0.8, [0.5])
kl = bayes.kl_bernoulli(0.8, 0.5)
counts = [1, 5, 10, 20, 26, 50, 100, 200]
report = bayes.predictor_agreement(model, counts, trials=500, seed=0)

print(f"KL(0.8 || 0.5) = {kl:.5f}; exp(-M KL) drops below 1% near M = {math.ceil(5 / kl)}")
print(f"{'M':>4} {'median exp(M r)':>16} {'exp(-M KL)':>11} {'P(true)':>8} {'agree':>6}")
for j, n in enumerate(counts):
    print(f"{n:>4} {report.median_exp_r[1][j]:>16.4g} {math.exp(-n * kl):>11.4g} "
          f"{report.posterior_mass[j]:>8.4f} {report.agreement[j]:>6.3f}")
