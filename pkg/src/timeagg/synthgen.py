"""Seeded generator of synthetic rheumatoid-arthritis-like cohorts.

Each patient has a latent severity ``s ~ N(0, 1)`` and a latent CDAI deviation
``d_t`` that follows an AR(1) process around ``mu = 6 * signal * s``:

    d_{t+1} = mu + phi * (d_t - mu) - signal * treatment_effect_t + eps,
    phi = 0.85 * signal,  eps ~ N(0, 6)

Treatment decisions react to ``d_t``: prednisone is prescribed with probability
rising in current disease activity, and a DMARD is added when activity stays
high.  Observed CDAI is ``base + d_t`` plus measurement noise (sd 3), clipped to
[0, 76]; ESR and CRP are noisy increasing functions of the latent CDAI.  The
outcome is Uncontrolled when the simulated next-visit CDAI exceeds the
threshold (10 by default); ``base`` is set so the cohort hits
``prevalence_target``.  At ``signal_strength = 0`` the next-visit CDAI is pure
noise, independent of everything observed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .cohort import Cohort, Outcome, Patient, Visit, make_schema

DMARDS = ("mtx", "hcq", "ssz", "lef", "biologic")
CONTINUOUS = ("cdai", "esr", "crp")
BINARY = ("prednisone",) + DMARDS + ("dmard_switch",)

CDAI_MAX = 76.0
INNOVATION_SD = 6.0
MEASUREMENT_SD = 3.0
# drift reduction per active drug, scaled by signal_strength
DMARD_EFFECT = {"mtx": 2.0, "hcq": 1.0, "ssz": 1.0, "lef": 1.5, "biologic": 3.5}
PREDNISONE_EFFECT = 2.0


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 600
    mean_visits: float = 6.0
    visit_gap_median: float = 100.0
    signal_strength: float = 0.7
    seed: int = 0
    prevalence_target: float = 0.4
    cdai_threshold: float = 10.0
    # treatment-pattern knobs, shifted for the second benchmark cohort
    mtx_start_prob: float = 0.6
    biologic_access: float = 0.5
    prednisone_bias: float = -1.2
    escalation_prob: float = 0.35
    # continuous variables independent of everything else
    extra_noise_vars: int = 0
    id_prefix: str = "P"

    def validate(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.mean_visits <= 0:
            raise ValueError("mean_visits must be positive")
        if self.visit_gap_median <= 0:
            raise ValueError("visit_gap_median must be positive")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")
        if not 0.0 < self.prevalence_target < 1.0:
            raise ValueError("prevalence_target must lie in (0, 1)")
        if self.extra_noise_vars < 0:
            raise ValueError("extra_noise_vars must be >= 0")
        for name in ("mtx_start_prob", "biologic_access", "escalation_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def schema_for(config: GeneratorConfig):
    noise = [f"noise{i}" for i in range(config.extra_noise_vars)]
    return make_schema([(n, "continuous") for n in CONTINUOUS]
                       + [(n, "binary") for n in BINARY]
                       + [(n, "continuous") for n in noise])


def _simulate_patient(rng, cfg: GeneratorConfig):
    """Latent trajectory, visit days and treatments; CDAI still unshifted."""
    sig = cfg.signal_strength
    phi = 0.85 * sig
    n_visits = 2 + rng.poisson(max(cfg.mean_visits - 2.0, 0.0))
    gaps = np.maximum(1, np.rint(cfg.visit_gap_median * rng.lognormal(0.0, 0.45, n_visits - 1)))
    days = np.concatenate([[0], np.cumsum(gaps)]).astype(int)

    mu = 6.0 * sig * rng.normal()
    d = mu + rng.normal(0.0, INNOVATION_SD)
    active = {"mtx"} if rng.random() < cfg.mtx_start_prob else set()
    visits = []
    for t in range(n_visits + 1):
        # nominal activity used by the simulated clinician; independent of base
        nominal = 12.0 + d
        pred = rng.random() < expit(cfg.prednisone_bias + 0.15 * (nominal - 12.0))
        switched = False
        if nominal > 15.0 and rng.random() < cfg.escalation_prob:
            candidates = [m for m in DMARDS if m not in active]
            if "biologic" in candidates and rng.random() >= cfg.biologic_access:
                candidates.remove("biologic")
            if candidates:
                active.add(candidates[rng.integers(len(candidates))])
                switched = True
        visits.append({"d": d, "pred": pred, "active": set(active), "switch": switched})
        effect = sum(DMARD_EFFECT[m] for m in active) + PREDNISONE_EFFECT * pred
        d = mu + phi * (d - mu) - sig * (effect - 3.0) + rng.normal(0.0, INNOVATION_SD)
    # the last simulated step is the unobserved next visit that defines the label
    return days, visits[:-1], visits[-1]["d"]


def generate_cohort(config: GeneratorConfig) -> Cohort:
    config.validate()
    schema = schema_for(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))

    sims = [_simulate_patient(rng, config) for _ in range(config.n_patients)]
    next_scores = np.array([nxt + rng.normal(0.0, MEASUREMENT_SD) for _, _, nxt in sims])
    # shift so that a fraction prevalence_target of next-visit CDAI lies above the cut
    base = config.cdai_threshold - float(np.quantile(next_scores, 1.0 - config.prevalence_target))

    patients = []
    for i, ((days, visits, _), score) in enumerate(zip(sims, next_scores)):
        records = []
        for day, v in zip(days, visits):
            latent = float(np.clip(base + v["d"], 0.0, CDAI_MAX))
            obs = {}
            if rng.random() < 0.9:
                obs["cdai"] = round(float(np.clip(latent + rng.normal(0.0, MEASUREMENT_SD),
                                                  0.0, CDAI_MAX)), 2)
            if rng.random() < 0.6:
                obs["esr"] = round(max(0.0, 8.0 + 0.8 * latent + rng.normal(0.0, 10.0)), 1)
            if rng.random() < 0.6:
                obs["crp"] = round(max(0.0, 0.2 + 0.06 * latent + rng.normal(0.0, 0.8)), 2)
            obs["prednisone"] = float(v["pred"])
            for m in DMARDS:
                obs[m] = float(m in v["active"])
            obs["dmard_switch"] = float(v["switch"])
            for k in range(config.extra_noise_vars):
                if rng.random() < 0.9:
                    obs[f"noise{k}"] = round(float(rng.normal()), 4)
            records.append(Visit(int(day), obs))
        outcome = Outcome.UNCONTROLLED if base + score > config.cdai_threshold else Outcome.CONTROLLED
        patients.append(Patient(f"{config.id_prefix}{config.seed:x}-{i:05d}", records, outcome))
    return Cohort(schema, patients)


def make_benchmark_pair(seed, n_primary=578, n_shifted=242, signal_strength=0.7):
    """Two cohorts from one generator with different prevalence and treatment
    patterns, standing in for a university clinic and a safety-net clinic."""
    primary = GeneratorConfig(n_patients=n_primary, seed=seed, signal_strength=signal_strength,
                              prevalence_target=0.35, id_prefix="UC")
    shifted = replace(primary, n_patients=n_shifted, seed=seed + 1, prevalence_target=0.55,
                      mtx_start_prob=0.4, biologic_access=0.15, prednisone_bias=-0.4,
                      escalation_prob=0.2, visit_gap_median=120.0, id_prefix="SN")
    return generate_cohort(primary), generate_cohort(shifted)
