"""Small coefficient-formula vocabulary used in problem definitions.

A formula is JSON data evaluated at a parameter vector ``mu`` and a time ``t``:

* a number: constant
* ``{"param": i}``: the i-th parameter component
* ``{"linear": {"param": i, "coef": a, "offset": b}}``: ``a * mu[i] + b``
* ``{"product": [f, g, ...]}``: product of sub-formulas
* ``{"exp_t": f}``: ``exp(f(mu) * t)``
"""

import math

import numpy as np

_KEYS = ("param", "linear", "product", "exp_t")


class FormulaError(ValueError):
    pass


def validate(formula, n_params=None, where="formula"):
    """Raise :class:`FormulaError` unless ``formula`` belongs to the vocabulary."""
    if isinstance(formula, bool):
        raise FormulaError(f"{where}: booleans are not formulas")
    if isinstance(formula, (int, float)):
        if not math.isfinite(formula):
            raise FormulaError(f"{where}: constant must be finite")
        return
    if not isinstance(formula, dict) or len(formula) != 1:
        raise FormulaError(f"{where}: expected a number or a one-key object, got {formula!r}")
    (key, val), = formula.items()
    if key not in _KEYS:
        raise FormulaError(f"{where}: unknown formula kind {key!r}")
    if key == "param":
        _check_index(val, n_params, where)
    elif key == "linear":
        if not isinstance(val, dict) or "param" not in val:
            raise FormulaError(f"{where}: linear needs a 'param' entry")
        extra = set(val) - {"param", "coef", "offset"}
        if extra:
            raise FormulaError(f"{where}: unknown linear keys {sorted(extra)}")
        _check_index(val["param"], n_params, where)
        for k in ("coef", "offset"):
            if k in val:
                validate(val[k], n_params, f"{where}.linear.{k}")
    elif key == "product":
        if not isinstance(val, list) or not val:
            raise FormulaError(f"{where}: product needs a nonempty list")
        for i, f in enumerate(val):
            validate(f, n_params, f"{where}.product[{i}]")
    else:
        validate(val, n_params, f"{where}.exp_t")


def _check_index(i, n_params, where):
    if not isinstance(i, int) or isinstance(i, bool) or i < 0:
        raise FormulaError(f"{where}: parameter index must be a nonnegative int")
    if n_params is not None and i >= n_params:
        raise FormulaError(f"{where}: parameter index {i} out of range ({n_params} parameters)")


def evaluate(formula, mu, t=0.0):
    """Evaluate ``formula`` at parameter ``mu`` and time ``t``."""
    if isinstance(formula, (int, float)):
        return float(formula)
    (key, val), = formula.items()
    if key == "param":
        return float(mu[val])
    if key == "linear":
        coef = evaluate(val.get("coef", 1.0), mu, t)
        offset = evaluate(val.get("offset", 0.0), mu, t)
        return coef * float(mu[val["param"]]) + offset
    if key == "product":
        out = 1.0
        for f in val:
            out *= evaluate(f, mu, t)
        return out
    return math.exp(evaluate(val, mu, t) * t)


def depends_on_time(formula):
    if isinstance(formula, (int, float)):
        return False
    (key, val), = formula.items()
    if key == "exp_t":
        return True
    if key == "product":
        return any(depends_on_time(f) for f in val)
    if key == "linear":
        return any(depends_on_time(val[k]) for k in ("coef", "offset") if k in val)
    return False


def evaluate_all(formulas, mu, t=0.0):
    return np.array([evaluate(f, mu, t) for f in formulas], dtype=float)
