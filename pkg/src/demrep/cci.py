"""Charlson comorbidity scoring from diagnosis code lists.

A scoring table maps named comorbidity categories to integer weights and
ICD-9-CM code prefixes. A visit's score is the sum of weights over
categories with at least one prefix-matched code; each category counts at
most once no matter how many of its codes appear. Category hierarchies
(severe superseding mild) are deliberately not applied; categories are
independent.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError

# Original 17-category weighting with Deyo-style ICD-9-CM prefixes.
# Loadable replacement tables use the same CSV layout:
#   category,weight,prefixes   (prefixes pipe-separated)
_DEFAULT_TABLE_CSV = """\
category,weight,prefixes
myocardial_infarction,1,410|412
congestive_heart_failure,1,428
peripheral_vascular_disease,1,440|441|443.9|447.1|785.4|V43.4
cerebrovascular_disease,1,430|431|432|433|434|435|436|437|438
dementia,1,290
chronic_pulmonary_disease,1,490|491|492|493|494|495|496|500|501|502|503|504|505|506.4
rheumatic_disease,1,710.0|710.1|710.4|714.0|714.1|714.2|714.81|725
peptic_ulcer_disease,1,531|532|533|534
mild_liver_disease,1,571.2|571.4|571.5|571.6
diabetes_uncomplicated,1,250.0|250.1|250.2|250.3|250.7
diabetes_complicated,2,250.4|250.5|250.6
hemiplegia_paraplegia,2,342|344.1
renal_disease,2,582|583.0|583.1|583.2|583.3|583.4|583.5|583.6|583.7|585|586|588.0
malignancy,2,140|141|142|143|144|145|146|147|148|149|150|151|152|153|154|155|156|157|158|159|160|161|162|163|164|165|170|171|172|174|175|176|179|180|181|182|183|184|185|186|187|188|189|190|191|192|193|194|195|200|201|202|203|204|205|206|207|208
moderate_severe_liver_disease,3,456.0|456.1|456.2|572.2|572.3|572.4|572.8
metastatic_solid_tumor,6,196|197|198|199
aids_hiv,6,042|043|044
"""


@dataclass(frozen=True)
class CciCategory:
    name: str
    weight: int
    code_prefixes: tuple[str, ...]


@dataclass(frozen=True)
class CciTable:
    categories: tuple[CciCategory, ...]

    @property
    def max_score(self) -> int:
        return sum(c.weight for c in self.categories)


def _parse_table(reader: csv.DictReader, source: str) -> CciTable:
    required = {"category", "weight", "prefixes"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise DataError(f"{source}: expected header category,weight,prefixes")
    cats: list[CciCategory] = []
    seen: set[str] = set()
    for row in reader:
        name = row["category"].strip()
        if name in seen:
            raise DataError(f"{source}: duplicate category {name!r}")
        seen.add(name)
        try:
            weight = int(row["weight"])
        except ValueError as exc:
            raise DataError(f"{source}: non-integer weight for {name!r}") from exc
        if weight < 1:
            raise DataError(f"{source}: weight must be >= 1 for {name!r}")
        prefixes = tuple(p.strip() for p in row["prefixes"].split("|") if p.strip())
        if not prefixes:
            raise DataError(f"{source}: empty prefix list for {name!r}")
        cats.append(CciCategory(name, weight, prefixes))
    if not cats:
        raise DataError(f"{source}: table has no categories")
    return CciTable(tuple(cats))


def load_cci_table(path: str | Path) -> CciTable:
    """Load a category,weight,prefixes CSV into a validated scoring table."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"comorbidity table not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return _parse_table(csv.DictReader(fh), str(path))


def default_cci_table() -> CciTable:
    """The bundled 17-category table."""
    return _parse_table(csv.DictReader(io.StringIO(_DEFAULT_TABLE_CSV)), "<bundled>")


def write_default_table(path: str | Path) -> None:
    """Materialize the bundled table as a file (starting point for edits)."""
    Path(path).write_text(_DEFAULT_TABLE_CSV, encoding="utf-8")


def compute_cci(dx_codes: list[str], table: CciTable) -> int:
    """Weighted count of matched categories; unmatched codes contribute 0.

    A code matches a category when it starts with any of the category's
    prefixes (so "410" matches "410.21"). Duplicate or multiple codes in
    one category still contribute that category's weight exactly once.
    """
    score = 0
    for cat in table.categories:
        if any(code.startswith(p) for code in dx_codes for p in cat.code_prefixes):
            score += cat.weight
    return score
