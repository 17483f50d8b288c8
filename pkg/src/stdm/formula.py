"""A small covariate formula language.

Grammar::

    formula := term ('+' term)*
    term    := atom | atom '^2' | atom ':' atom
    atom    := name | 'log(' name ')'

Terms map to design columns; there is no intercept term (intercepts are
added by the model assemblers).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_ATOM = re.compile(rf"^(?:log\(\s*({_NAME})\s*\)|({_NAME}))$")


class FormulaError(ValueError):
    pass


class MissingColumnError(KeyError):
    def __str__(self):
        return f"missing covariate column(s): {', '.join(self.args[0])}"


@dataclass(frozen=True)
class Atom:
    name: str
    log: bool = False

    @property
    def label(self) -> str:
        return f"log({self.name})" if self.log else self.name

    def evaluate(self, table: Mapping[str, np.ndarray]) -> np.ndarray:
        v = np.asarray(table[self.name], dtype=float)
        if self.log:
            if np.any(v <= 0):
                raise FormulaError(f"log of non-positive values in column {self.name!r}")
            v = np.log(v)
        return v


@dataclass(frozen=True)
class Term:
    atoms: tuple[Atom, ...]
    squared: bool = False

    @property
    def label(self) -> str:
        if self.squared:
            return f"{self.atoms[0].label}^2"
        return ":".join(a.label for a in self.atoms)

    def evaluate(self, table) -> np.ndarray:
        out = self.atoms[0].evaluate(table)
        if self.squared:
            return out * out
        for a in self.atoms[1:]:
            out = out * a.evaluate(table)
        return out


def _parse_atom(text: str) -> Atom:
    m = _ATOM.match(text.strip())
    if not m:
        raise FormulaError(f"cannot parse covariate {text!r}")
    return Atom(m.group(1), True) if m.group(1) else Atom(m.group(2))


@dataclass(frozen=True)
class Formula:
    terms: tuple[Term, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "Formula":
        text = text.strip()
        if not text:
            return cls()
        terms = []
        for piece in text.split("+"):
            piece = piece.strip()
            if not piece:
                raise FormulaError(f"empty term in {text!r}")
            if piece.endswith("^2"):
                terms.append(Term((_parse_atom(piece[:-2]),), squared=True))
            elif ":" in piece:
                parts = piece.split(":")
                if len(parts) != 2:
                    raise FormulaError(f"only pairwise products are supported: {piece!r}")
                terms.append(Term(tuple(_parse_atom(p) for p in parts)))
            else:
                terms.append(Term((_parse_atom(piece),)))
        labels = [t.label for t in terms]
        if len(set(labels)) != len(labels):
            raise FormulaError(f"duplicate terms in {text!r}")
        return cls(tuple(terms))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(t.label for t in self.terms)

    @property
    def columns(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for t in self.terms:
            for a in t.atoms:
                seen.setdefault(a.name)
        return tuple(seen)

    def check(self, available) -> None:
        missing = [c for c in self.columns if c not in available]
        if missing:
            raise MissingColumnError(missing)

    def design(self, table: Mapping[str, np.ndarray], n_rows: int | None = None) -> np.ndarray:
        """Design matrix with one column per term."""
        self.check(table)
        if not self.terms:
            return np.zeros((0 if n_rows is None else n_rows, 0))
        cols = [t.evaluate(table) for t in self.terms]
        X = np.column_stack(cols)
        if not np.all(np.isfinite(X)):
            raise FormulaError("non-finite covariate values")
        return X

    def __str__(self) -> str:
        return " + ".join(self.labels)


# Climate predictor presets.  The rain preset uses the raw season indicator:
# a log of a 0/1 indicator is undefined at 0.
CLIMATE_PRESETS = {
    "temperature": "log(elevation) + cool + climate_type",
    "rh": "log(temperature) + log(temperature)^2 + log(elevation) + climate_type",
    "rain": "log(temperature) + log(temperature)^2 + season + climate_type + season:climate_type",
}

HEALTH_PRESETS = {
    "temp_rain": ("temperature + temperature^2 + log(rain) + climate_type + log(rain):climate_type"
                  " + covid + log(pop_density)"),
    "rh": "rh + climate_type + rh:climate_type + covid + log(pop_density)",
}


def resolve(expr: str, presets: Mapping[str, str]) -> Formula:
    """Parse ``expr``, or the preset of that name when one exists."""
    return Formula.parse(presets.get(expr, expr))
