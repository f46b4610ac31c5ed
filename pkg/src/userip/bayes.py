"""Finite-concept Bayesian toy world: likelihood-ratio statistic, posterior, agreement.

Here ``n_obs`` counts observations drawn from the true concept; it is unrelated
to the number of profile categories used elsewhere in the package.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


@dataclass
class ConceptModel:
    """Concepts with a prior and a categorical emission table ``(n_concepts, n_symbols)``.

    ``predict`` optionally holds ``P(y | concept)`` for the downstream label;
    by default the label is the next symbol, so it equals ``emissions``.
    """

    prior: np.ndarray
    emissions: np.ndarray
    true_concept: int = 0
    predict: np.ndarray | None = None

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.emissions = np.atleast_2d(np.asarray(self.emissions, dtype=np.float64))
        if self.predict is None:
            self.predict = self.emissions
        self.predict = np.atleast_2d(np.asarray(self.predict, dtype=np.float64))
        for name, p in (("prior", self.prior), ("emissions", self.emissions),
                        ("predict", self.predict)):
            if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-12):
                raise ValueError(f"{name} must hold proper distributions")
        if len(self.prior) != len(self.emissions) or len(self.prior) != len(self.predict):
            raise ValueError("prior, emissions and predict disagree on the concept count")
        if not 0 <= self.true_concept < len(self.prior) or self.prior[self.true_concept] <= 0:
            raise ValueError("true concept needs positive prior mass")

    @classmethod
    def bernoulli(cls, p_true: float, others, prior=None) -> "ConceptModel":
        """Concept 0 emits 1 with ``p_true``; each entry of ``others`` is another concept."""
        ps = [p_true, *others]
        em = np.array([[1 - p, p] for p in ps])
        prior = np.full(len(ps), 1 / len(ps)) if prior is None else prior
        return cls(prior, em, 0)

    @property
    def n_concepts(self) -> int:
        return len(self.prior)

    def sample(self, n: int, rng: np.random.Generator, concept: int | None = None) -> np.ndarray:
        c = self.true_concept if concept is None else concept
        return rng.choice(self.emissions.shape[1], size=n, p=self.emissions[c])

    def log_likelihood(self, obs) -> np.ndarray:
        """``log P(obs | concept)`` for every concept, summed over i.i.d. observations."""
        counts = np.bincount(np.asarray(obs, dtype=np.int64),
                             minlength=self.emissions.shape[1])
        with np.errstate(divide="ignore"):
            logp = np.log(self.emissions)
        # 0 * log 0 counts as 0: unseen symbols contribute nothing
        terms = np.where(counts > 0, counts * logp, 0.0)
        return terms.sum(axis=1)


def kl_bernoulli(p: float, q: float) -> float:
    return float(p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q)))


def r_m(model: ConceptModel, obs, theta: int) -> float:
    """Average log-likelihood ratio of ``theta`` against the true concept."""
    obs = np.asarray(obs, dtype=np.int64)
    if len(obs) == 0:
        raise ValueError("r_m needs at least one observation")
    if np.any(model.emissions[model.true_concept, obs] == 0):
        raise ValueError("an observation has zero probability under the true concept")
    ll = model.log_likelihood(obs)
    return float((ll[theta] - ll[model.true_concept]) / len(obs))


def posterior(model: ConceptModel, obs) -> np.ndarray:
    logp = np.log(model.prior) + model.log_likelihood(obs)
    return np.exp(logp - logsumexp(logp))


def bayes_prediction(model: ConceptModel, obs) -> int:
    """Label maximising the posterior-averaged predictive distribution."""
    return int(np.argmax(posterior(model, obs) @ model.predict))


@dataclass
class ConcentrationReport:
    n_obs: list
    median_exp_r: dict = field(default_factory=dict)  # concept -> list over n_obs
    posterior_mass: list = field(default_factory=list)  # median mass on the true concept
    agreement: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for c in sorted(self.median_exp_r):
            for j, n in enumerate(self.n_obs):
                out.append({"M": n, "concept": c, "median_exp_Mr": self.median_exp_r[c][j],
                            "posterior_mass": self.posterior_mass[j],
                            "agreement": self.agreement[j]})
        return out

    def write_csv(self, path, extra: dict | None = None) -> None:
        extra = extra or {}
        cols = ["M", "concept", "median_exp_Mr", "posterior_mass", "agreement", *extra]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                w.writerow({**{k: repr(v) if isinstance(v, float) else v for k, v in r.items()},
                            **extra})


def predictor_agreement(model: ConceptModel, n_obs_range, trials: int = 200,
                        seed: int = 0) -> ConcentrationReport:
    """Monte-Carlo concentration curves over growing observation counts.

    Each trial draws one long i.i.d. stream from the true concept and reads
    prefixes of it, so curves are coupled across counts within a trial.
    """
    n_obs_range = [int(n) for n in n_obs_range]
    if any(b <= a for a, b in zip(n_obs_range, n_obs_range[1:])):
        raise ValueError("observation counts must be strictly ascending")
    target = int(np.argmax(model.predict[model.true_concept]))
    n_max = n_obs_range[-1] if n_obs_range else 0
    exp_r = np.zeros((trials, len(n_obs_range), model.n_concepts))
    mass = np.zeros((trials, len(n_obs_range)))
    agree = np.zeros((trials, len(n_obs_range)))
    for t in range(trials):
        stream = model.sample(n_max, np.random.default_rng([seed, t]))
        for j, n in enumerate(n_obs_range):
            obs = stream[:n]
            if n > 0:
                for c in range(model.n_concepts):
                    # exp(n * r) = likelihood ratio; exact 1 for the true concept
                    exp_r[t, j, c] = 1.0 if c == model.true_concept else \
                        float(np.exp(n * r_m(model, obs, c)))
            else:
                exp_r[t, j, :] = 1.0
            post = posterior(model, obs)
            mass[t, j] = post[model.true_concept]
            agree[t, j] = bayes_prediction(model, obs) == target
    rep = ConcentrationReport(n_obs_range)
    med = np.median(exp_r, axis=0)
    rep.median_exp_r = {c: [float(v) for v in med[:, c]] for c in range(model.n_concepts)}
    rep.posterior_mass = [float(v) for v in np.median(mass, axis=0)]
    rep.agreement = [float(v) for v in agree.mean(axis=0)]
    return rep
