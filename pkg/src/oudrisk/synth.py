"""Seeded synthetic EHR generator with a planted, known risk signal.

Every history encounter carries one opioid order of the patient's single
opioid product at a fixed quantity, so per-encounter MME moves only through
the prescribed strength. For a "trend" positive the strengths over the last
``window`` history encounters strictly increase; everyone else gets the same
strengths either tapering (strictly decreasing, the default) or shuffled into
any order that is not increasing. The pooled static aggregate is
therefore blind to the trend while a sequence model can read it.

Static effects are patient traits: a trait holder shows the feature at
``trait_rate`` per encounter, everyone else at ``background_rate``. Positives
hold each trait more often than negatives.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

ICD10_START = datetime(2015, 10, 1)

# (ICD-10 code, ICD-9 source in the crosswalk); the ICD-10 category is the feature
DX_VOCAB = (
    ("M54.5", "7242"), ("J06.9", "4659"), ("I10", "4019"), ("E11.9", "25000"),
    ("F41.9", "30000"), ("F32.9", "311"), ("K21.9", "53081"), ("J45.909", "49390"),
    ("M25.569", "71946"), ("G43.909", "34690"), ("R51", "7840"), ("N39.0", "5990"),
    ("E78.5", "2724"), ("M79.1", "7291"), ("R10.9", "78900"), ("F17.210", "3051"),
    ("R42", "7804"), ("R07.9", "78650"), ("J30.9", "4779"),
)
M54_CODES = (("M54.5", "7242"), ("M54.2", "7231"), ("M54.12", "7220"))
OUD_CODE = ("F11.20", "30400")
CANCER_CODE = ("C50.919", "1749")

OPIOID_PRODUCTS = (  # ndc, ingredient, MME factor
    ("90001-0001-01", "oxycodone"), ("90001-0011-01", "hydrocodone"),
    ("90001-0020-01", "morphine"),
)
ANXIOLYTICS = ("90002-0003-01", "90002-0004-01")
MED_VOCAB = (
    "90002-0001-01", "90002-0002-01", "90002-0005-01", "90002-0006-01", "90002-0007-01",
    "90002-0008-01", "90002-0009-01", "90002-0010-01", "90002-0011-01", "90002-0012-01",
    "90002-0013-01", "90002-0014-01",
)
LAB_VOCAB = (("GLU", 5.5, 1.0), ("HGB", 13.5, 1.5), ("WBC", 7.0, 2.0), ("NA", 140, 3),
             ("K", 4.2, 0.4), ("CREAT", 0.9, 0.2), ("ALT", 25, 10), ("AST", 24, 8))
EVENT_VOCAB = (("TEMP", 37.0, 0.4), ("PULSE", 76, 10), ("RESP", 16, 2))
FLAG_EVENTS = ("FALL_RISK", "SMOKER")
RACES = ("white", "black", "hispanic", "asian", "other")

STRENGTH_UNIT_MG = 5.0
OPIOID_QUANTITY = 30


class SynthConfigError(ValueError):
    pass


class UnknownPatient(KeyError):
    pass


@dataclass
class SynthConfig:
    n_positive: int = 1000
    n_negative: int = 4500
    mean_encounters: float = 4.0  # history encounters before the index encounter
    min_encounters: int = 2
    max_encounters: int = 20      # including the index encounter
    n_dx: int = 12
    n_meds: int = 8
    n_labs: int = 6
    n_events: int = 3
    planted_features: list = field(default_factory=lambda: [
        ["med:MME", "trend"], ["dx:M54", "static"], ["med:N05B", "static"]])
    decoy_features: list = field(default_factory=lambda: ["dx:J06"])
    temporal_signal_strength: float = 1.0
    label_noise: float = 0.0
    window: int = 5
    strength_levels: int = 12
    null_trend: str = "falling"  # or "shuffled"
    trait_prob_pos: float = 0.6
    trait_prob_neg: float = 0.1
    trait_rate: float = 0.7
    background_rate: float = 0.05
    dx_rate: float = 0.08
    med_rate: float = 0.08
    lab_rate: float = 0.3
    event_rate: float = 0.5
    n_excluded: int = 30
    seed: int = 42

    def validate(self):
        for name in ("n_positive", "n_negative", "n_dx", "n_meds", "window"):
            if getattr(self, name) <= 0:
                raise SynthConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.label_noise < 0.5:
            raise SynthConfigError(f"label_noise must be in [0, 0.5), got {self.label_noise}")
        if not 0 <= self.temporal_signal_strength <= 1:
            raise SynthConfigError("temporal_signal_strength must be in [0, 1]")
        if self.null_trend not in ("falling", "shuffled"):
            raise SynthConfigError(f"null_trend must be falling or shuffled, got {self.null_trend!r}")
        if self.min_encounters < 2:
            raise SynthConfigError("min_encounters must be >= 2")
        if not self.min_encounters <= self.mean_encounters < self.max_encounters:
            raise SynthConfigError("need min_encounters <= mean_encounters < max_encounters")
        if self.strength_levels < self.window:
            raise SynthConfigError("strength_levels must be >= window for distinct strengths")
        known = {"med:MME": "trend", "dx:M54": "static", "med:N05B": "static"}
        for feat, effect in self.planted_features:
            if known.get(feat) != effect:
                raise SynthConfigError(f"cannot plant {feat!r} as {effect!r}")
        vocab = {"dx:" + c[:3] for c, _ in DX_VOCAB[:self.n_dx]}
        planted_dx = {f for f, _ in self.planted_features if f.startswith("dx:")}
        decoys = set(self.decoy_features)
        if not decoys <= vocab | planted_dx:
            raise SynthConfigError(
                f"n_dx={self.n_dx} vocabulary does not cover decoys {sorted(decoys - vocab)}")
        if len(vocab) < len(planted_dx | decoys):
            raise SynthConfigError("vocabulary smaller than the planted set")
        for p in ("trait_prob_pos", "trait_prob_neg", "trait_rate", "background_rate"):
            if not 0 <= getattr(self, p) <= 1:
                raise SynthConfigError(f"{p} must be a probability")
        return self

    @property
    def prior(self) -> float:
        return self.n_positive / (self.n_positive + self.n_negative)

    def static_features(self) -> list:
        return [f for f, e in self.planted_features if e == "static"]

    def has_trend(self) -> bool:
        return any(e == "trend" for _, e in self.planted_features)


# ---------------------------------------------------------------- generation

def _dx_code(pair, when):
    icd10, icd9 = pair
    return icd9 if when < ICD10_START else icd10


def _history_length(cfg, rng):
    p = 1.0 / (cfg.mean_encounters - cfg.min_encounters + 1)
    h = cfg.min_encounters + int(rng.geometric(p)) - 1
    return min(h, cfg.max_encounters - 1)


def _strength_levels(cfg, rng, n_hist, rising):
    """Per-encounter strength levels; the last ``window`` are distinct."""
    k = min(cfg.window, n_hist)
    early = rng.integers(1, cfg.strength_levels + 1, size=n_hist - k)
    last = rng.choice(cfg.strength_levels, size=k, replace=False) + 1
    if rising:
        last = np.sort(last)
    elif cfg.null_trend == "falling":
        last = np.sort(last)[::-1]
    else:
        while np.all(np.diff(last) > 0):
            last = rng.permutation(last)
    return np.concatenate([early, last]).astype(int)


def _background(cfg, rng, when, dx_vocab):
    dx = [_dx_code(p, when) for p in dx_vocab if rng.random() < cfg.dx_rate]
    meds = [{"ndc": ndc, "quantity": int(rng.choice((10, 30, 60, 90)))}
            for ndc in MED_VOCAB[:cfg.n_meds] if rng.random() < cfg.med_rate]
    labs = []
    for code, mu, sd in LAB_VOCAB[:cfg.n_labs]:
        if rng.random() < cfg.lab_rate:
            flag = rng.choice(("LOW", "NORMAL", "HIGH"), p=(0.1, 0.8, 0.1))
            shift = {"LOW": -2.5, "NORMAL": 0.0, "HIGH": 2.5}[str(flag)]
            labs.append({"code": code, "value": round(float(mu + sd * (shift + rng.normal())), 2),
                         "flag": str(flag)})
    events = [{"code": code, "value": round(float(rng.normal(mu, sd)), 1)}
              for code, mu, sd in EVENT_VOCAB[:cfg.n_events] if rng.random() < cfg.event_rate]
    events += [{"code": code} for code in FLAG_EVENTS if rng.random() < 0.1]
    return dx, meds, labs, events


def _patient(cfg, idx, label, observed, exclusion=None):
    """One patient's JSON object and its ground-truth record."""
    rng = np.random.default_rng([cfg.seed, idx])
    dx_vocab = [p for p in DX_VOCAB[:cfg.n_dx] if not p[0].startswith("M54")]
    static = cfg.static_features()
    trait_p = cfg.trait_prob_pos if label else cfg.trait_prob_neg
    traits = {f: bool(rng.random() < trait_p) for f in static}
    rising = bool(label and rng.random() < cfg.temporal_signal_strength and cfg.has_trend())
    n_hist = _history_length(cfg, rng)
    levels = _strength_levels(cfg, rng, n_hist, rising)
    ndc, ingredient = OPIOID_PRODUCTS[int(rng.integers(len(OPIOID_PRODUCTS)))]
    age = int(rng.integers(18, 60))
    if exclusion == "age":
        age = int(rng.integers(67, 80))
    when = datetime(2012, 1, 1) + timedelta(days=int(rng.integers(0, 1600)))
    birth_year = when.year - age
    counts = {f: 0 for f in static}
    encounters = []
    for e in range(n_hist + 1):
        index = e == n_hist
        dx, meds, labs, events = _background(cfg, rng, when, dx_vocab)
        if not index:
            if exclusion != "no_opioid":
                meds.insert(0, {"ndc": ndc, "quantity": OPIOID_QUANTITY,
                                "ingredient": ingredient,
                                "strength_mg": float(levels[e] * STRENGTH_UNIT_MG)})
            for f in static:
                rate = cfg.trait_rate if traits[f] else cfg.background_rate
                if rng.random() < rate:
                    counts[f] += 1
                    if f == "dx:M54":
                        dx.append(_dx_code(M54_CODES[int(rng.integers(3))], when))
                    else:
                        meds.append({"ndc": ANXIOLYTICS[int(rng.integers(2))],
                                     "quantity": 30})
            if exclusion == "cancer" and e == 0:
                dx.append(_dx_code(CANCER_CODE, when))
        elif observed:
            dx.insert(0, _dx_code(OUD_CODE, when))
        encounters.append({"encounter_id": f"E{e:02d}", "ts": when.isoformat(),
                           "dx": dx, "meds": meds, "labs": labs, "events": events})
        when += timedelta(days=int(rng.integers(10, 120)))
    pid = f"S{idx:06d}"
    record = {"patient_id": pid, "gender": str(rng.choice(("F", "M"))),
              "race": str(rng.choice(RACES)), "birth_year": birth_year,
              "encounters": encounters}
    truth = {"label": int(label), "observed": int(observed), "history": n_hist,
             "rising": rising, "counts": counts, "traits": traits, "excluded": exclusion}
    return record, truth


def generate(config: SynthConfig, out_dir) -> dict:
    """Write ``patients.jsonl`` and ``truth.json`` under ``out_dir``; returns their paths."""
    cfg = config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 0])
    n = cfg.n_positive + cfg.n_negative
    labels = np.zeros(n, dtype=int)
    labels[:cfg.n_positive] = 1
    labels = labels[rng.permutation(n)]
    flips = rng.random(n) < cfg.label_noise
    reasons = ("cancer", "age", "no_opioid")
    patients = {}
    jsonl = out / "patients.jsonl"
    with open(jsonl, "w", encoding="utf-8") as fh:
        for idx in range(n + cfg.n_excluded):
            if idx < n:
                y = int(labels[idx])
                rec, truth = _patient(cfg, idx, y, y ^ int(flips[idx]))
            else:
                rec, truth = _patient(cfg, idx, 0, 0, reasons[(idx - n) % len(reasons)])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            patients[rec["patient_id"]] = truth
    manifest = {
        "config": asdict(cfg), "prior": cfg.prior,
        "planted": [{"feature": f, "effect": e} for f, e in cfg.planted_features],
        "decoys": list(cfg.decoy_features), "patients": patients,
    }
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    return {"patients": jsonl, "truth": truth_path}


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- oracle

def _trait_likelihood(c, h, p_trait, rate, background):
    # binomial coefficients cancel in the class ratio and are dropped
    return (p_trait * rate ** c * (1 - rate) ** (h - c)
            + (1 - p_trait) * background ** c * (1 - background) ** (h - c))


def oracle_score(patient_id, manifest) -> float:
    """Posterior P(observed label = 1) under the generating process."""
    try:
        rec = manifest["patients"][patient_id]
    except KeyError:
        raise UnknownPatient(patient_id) from None
    cfg = manifest["config"]
    prior = manifest["prior"]
    planted = manifest["planted"]
    if not planted:
        return float(prior)
    odds = prior / (1 - prior)
    for p in planted:
        if p["effect"] == "static":
            c, h = rec["counts"][p["feature"]], rec["history"]
            args = (cfg["trait_rate"], cfg["background_rate"])
            num = _trait_likelihood(c, h, cfg["trait_prob_pos"], *args)
            den = _trait_likelihood(c, h, cfg["trait_prob_neg"], *args)
            odds *= num / den
        elif p["effect"] == "trend":
            s = cfg["temporal_signal_strength"]
            if rec["rising"]:
                odds = math.inf if s > 0 else odds
            else:
                odds *= 1 - s
    post = 1.0 if math.isinf(odds) else odds / (1 + odds)
    rho = cfg["label_noise"]
    return float((1 - 2 * rho) * post + rho)
