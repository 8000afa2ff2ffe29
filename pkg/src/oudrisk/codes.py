"""Medical code vocabularies: ICD-9 -> ICD-10 crosswalk, NDC -> ATC level 3,
opioid ingredients and morphine milligram equivalents.

All tables are loaded once into an immutable :class:`CodeTables` and every
lookup is a pure function of ``(input, tables)``.
"""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"

_ATC3_RE = re.compile(r"^[A-Z]\d\d[A-Z]$")


class CodeError(ValueError):
    """Malformed code."""


class ConfigurationError(RuntimeError):
    """Code tables are inconsistent with the data being processed."""


@dataclass(frozen=True)
class NdcEntry:
    atc3: str
    ingredient: str
    strength_mg: float


@dataclass(frozen=True)
class MedOrder:
    ndc: str
    quantity: float
    ingredient: str | None = None
    strength_mg_per_unit: float | None = None

    def __post_init__(self):
        if self.quantity < 0:
            raise ValueError(f"negative quantity {self.quantity} for NDC {self.ndc}")
        if self.strength_mg_per_unit is not None and self.strength_mg_per_unit < 0:
            raise ValueError(f"negative strength for NDC {self.ndc}")


@dataclass
class SkippedCodes:
    """Running report of codes that had no mapping. Not fatal."""

    icd9: dict[str, int] = field(default_factory=dict)
    ndc: dict[str, int] = field(default_factory=dict)

    def add(self, kind: str, code: str) -> None:
        bucket = getattr(self, kind)
        if code not in bucket:
            log.debug("unmapped %s code %s", kind, code)
        bucket[code] = bucket.get(code, 0) + 1

    def total(self) -> int:
        return sum(self.icd9.values()) + sum(self.ndc.values())

    def rows(self):
        for kind in ("icd9", "ndc"):
            for code, n in sorted(getattr(self, kind).items()):
                yield kind, code, n


@dataclass(frozen=True)
class CodeTables:
    icd9_to_icd10: Mapping[str, frozenset]
    ndc_to_atc3: Mapping[str, tuple]
    opioid_ingredients: frozenset
    mme_factors: Mapping[str, float]
    oud_codes: tuple
    cancer_codes: tuple

    def __post_init__(self):
        for name, f in self.mme_factors.items():
            if not f > 0:
                raise ConfigurationError(f"MME factor for {name!r} must be > 0, got {f}")
        if "morphine" in self.mme_factors and self.mme_factors["morphine"] != 1.0:
            raise ConfigurationError("morphine is the MME reference; its factor must be 1.0")
        for ndc, entries in self.ndc_to_atc3.items():
            for e in entries:
                if not _ATC3_RE.match(e.atc3):
                    raise ConfigurationError(f"bad ATC3 code {e.atc3!r} for NDC {ndc}")

    @classmethod
    def build(cls, icd9_to_icd10, ndc_to_atc3, opioid_ingredients, mme_factors,
              oud_codes, cancer_codes) -> "CodeTables":
        return cls(
            icd9_to_icd10=MappingProxyType(
                {normalize_icd(k): frozenset(v) for k, v in icd9_to_icd10.items()}),
            ndc_to_atc3=MappingProxyType(
                {normalize_ndc(k): tuple(v) for k, v in ndc_to_atc3.items()}),
            opioid_ingredients=frozenset(s.strip().lower() for s in opioid_ingredients),
            mme_factors=MappingProxyType(
                {k.strip().lower(): float(v) for k, v in mme_factors.items()}),
            oud_codes=tuple(sorted({normalize_icd(c) for c in oud_codes})),
            cancer_codes=tuple(sorted({normalize_icd(c) for c in cancer_codes})),
        )

    def is_oud(self, code: str) -> bool:
        return _matches_prefix(code, self.oud_codes)

    def is_cancer(self, code: str) -> bool:
        return _matches_prefix(code, self.cancer_codes)


def _matches_prefix(code: str, prefixes: tuple) -> bool:
    c = normalize_icd(code)
    return any(c.startswith(p) for p in prefixes)


# ---------------------------------------------------------------- loading

def _tsv_rows(path: Path) -> Iterable[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        next(reader, None)  # header
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            yield [c.strip() for c in row]


def _list_file(path: Path) -> list[str]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line)
    return out


def load_tables(icd9_gem=None, ndc_atc=None, mme_factors=None, oud_codes=None,
                cancer_codes=None, opioid_ingredients=None) -> CodeTables:
    """Load code tables from disk; any path left as None uses the shipped fixture."""
    icd9_gem = Path(icd9_gem or DATA_DIR / "icd9_gem.tsv")
    ndc_atc = Path(ndc_atc or DATA_DIR / "ndc_atc.tsv")
    mme_factors = Path(mme_factors or DATA_DIR / "mme_factors.tsv")
    oud_codes = Path(oud_codes or DATA_DIR / "oud_codes.txt")
    cancer_codes = Path(cancer_codes or DATA_DIR / "cancer_codes.txt")
    opioid_ingredients = Path(opioid_ingredients or DATA_DIR / "opioid_ingredients.txt")

    gem: dict[str, set] = {}
    for icd9, icd10 in _tsv_rows(icd9_gem):
        gem.setdefault(icd9, set()).add(icd10)
    ndc: dict[str, list] = {}
    for row in _tsv_rows(ndc_atc):
        code, atc3, ingredient, strength = row[:4]
        ndc.setdefault(code, []).append(
            NdcEntry(atc3.upper(), ingredient.lower(), float(strength)))
    factors = {ing: float(f) for ing, f in _tsv_rows(mme_factors)}
    return CodeTables.build(gem, ndc, _list_file(opioid_ingredients), factors,
                            _list_file(oud_codes), _list_file(cancer_codes))


def save_tables(tables: CodeTables, directory) -> dict[str, Path]:
    """Write tables in the same on-disk format :func:`load_tables` reads."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / v for k, v in dict(
        icd9_gem="icd9_gem.tsv", ndc_atc="ndc_atc.tsv", mme_factors="mme_factors.tsv",
        oud_codes="oud_codes.txt", cancer_codes="cancer_codes.txt",
        opioid_ingredients="opioid_ingredients.txt").items()}
    with open(paths["icd9_gem"], "w", encoding="utf-8") as fh:
        fh.write("icd9\ticd10\n")
        for k in sorted(tables.icd9_to_icd10):
            for v in sorted(tables.icd9_to_icd10[k]):
                fh.write(f"{k}\t{v}\n")
    with open(paths["ndc_atc"], "w", encoding="utf-8") as fh:
        fh.write("ndc\tatc3\tingredient\tstrength_mg\n")
        for k in sorted(tables.ndc_to_atc3):
            for e in tables.ndc_to_atc3[k]:
                fh.write(f"{k}\t{e.atc3}\t{e.ingredient}\t{e.strength_mg!r}\n")
    with open(paths["mme_factors"], "w", encoding="utf-8") as fh:
        fh.write("ingredient\tfactor\n")
        for k in sorted(tables.mme_factors):
            fh.write(f"{k}\t{tables.mme_factors[k]!r}\n")
    for key, values in (("oud_codes", tables.oud_codes),
                        ("cancer_codes", tables.cancer_codes),
                        ("opioid_ingredients", sorted(tables.opioid_ingredients))):
        paths[key].write_text("".join(f"{v}\n" for v in values), encoding="utf-8")
    return paths


# ---------------------------------------------------------------- ICD

def normalize_icd(code: str) -> str:
    return code.strip().replace(".", "").upper()


def convert_icd9(code: str, tables: CodeTables, skipped: SkippedCodes | None = None) -> set:
    """Map an ICD-9 code to all of its ICD-10 targets.

    A code that is a key of the crosswalk is treated as ICD-9 (this covers V and
    E codes). Other codes starting with a letter are taken to be ICD-10 already
    and returned unchanged. Numeric codes missing from the table are reported
    in ``skipped`` and map to the empty set.
    """
    if not code or not code.strip():
        raise CodeError("empty diagnosis code")
    key = normalize_icd(code)
    if key in tables.icd9_to_icd10:
        return set(tables.icd9_to_icd10[key])
    if key[0].isalpha():
        return {code}
    if skipped is not None:
        skipped.add("icd9", key)
    return set()


def truncate_icd10(code: str) -> str:
    c = normalize_icd(code)
    if len(c) < 3:
        raise CodeError(f"malformed ICD-10 code {code!r}: fewer than 3 characters")
    return c[:3]


# ---------------------------------------------------------------- NDC / MME

def normalize_ndc(ndc: str) -> str:
    """Return the 11-digit 5-4-2 form of an NDC.

    Hyphenated 4-4-2, 5-3-2 and 5-4-1 layouts are zero-padded in the short
    segment. An unhyphenated 10-digit code is read as 4-4-2.
    """
    s = ndc.strip()
    if "-" in s:
        parts = s.split("-")
        if len(parts) != 3:
            raise CodeError(f"malformed NDC {ndc!r}")
        a, b, c = parts
        return a.zfill(5) + b.zfill(4) + c.zfill(2)
    if not s.isdigit():
        raise CodeError(f"malformed NDC {ndc!r}")
    if len(s) == 11:
        return s
    if len(s) == 10:
        return "0" + s
    raise CodeError(f"malformed NDC {ndc!r}: {len(s)} digits")


def ndc_to_atc3(ndc: str, tables: CodeTables, skipped: SkippedCodes | None = None) -> set:
    entries = tables.ndc_to_atc3.get(normalize_ndc(ndc))
    if not entries:
        if skipped is not None:
            skipped.add("ndc", normalize_ndc(ndc))
        return set()
    return {e.atc3 for e in entries}


def resolve_order(order: MedOrder, tables: CodeTables) -> tuple[str | None, float]:
    """Ingredient and per-unit strength of an order, falling back to the NDC table.

    For combination products the opioid component wins.
    """
    ingredient, strength = order.ingredient, order.strength_mg_per_unit
    if ingredient is None or strength is None:
        entries = tables.ndc_to_atc3.get(normalize_ndc(order.ndc), ())
        pick = None
        for e in entries:
            if e.ingredient in tables.opioid_ingredients:
                pick = e
                break
        if pick is None and entries:
            pick = entries[0]
        if pick is not None:
            ingredient = ingredient or pick.ingredient
            if strength is None and pick.ingredient == ingredient:
                strength = pick.strength_mg
    if ingredient is not None:
        ingredient = ingredient.strip().lower()
    return ingredient, (0.0 if strength is None else float(strength))


def is_opioid_order(order: MedOrder, tables: CodeTables) -> bool:
    ingredient, _ = resolve_order(order, tables)
    return ingredient is not None and ingredient in tables.opioid_ingredients


def mme_of_order(order: MedOrder, tables: CodeTables) -> float:
    """Total morphine milligram equivalents of one order (quantity x strength x factor)."""
    ingredient, strength = resolve_order(order, tables)
    if ingredient is None or ingredient not in tables.opioid_ingredients:
        return 0.0
    factor = tables.mme_factors.get(ingredient)
    if factor is None:
        raise ConfigurationError(
            f"opioid ingredient {ingredient!r} has no MME conversion factor")
    return float(order.quantity) * strength * factor
