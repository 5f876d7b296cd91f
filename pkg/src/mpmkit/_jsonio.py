"""Deterministic JSON emission with a fixed float format."""

from __future__ import annotations

import json
import math

import numpy as np


def _float(x: float, digits: int | None) -> str:
    if not math.isfinite(x):
        return "null"
    if digits is None:
        return repr(float(x))
    text = format(float(x), f".{digits}g")
    # keep integral values recognisable as floats
    if "e" not in text and "." not in text and "n" not in text:
        text += ".0"
    return text


def dumps(obj, *, digits: int | None = None, indent: int = 2) -> str:
    """Serialize ``obj`` with insertion-ordered keys.

    Floats use ``repr`` (shortest round-trip) or ``digits`` significant
    digits; non-finite floats become ``null``.
    """

    def enc(o, level):
        pad = " " * (indent * (level + 1))
        end = " " * (indent * level)
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if o is None:
            return "null"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _float(float(o), digits)
        if isinstance(o, str):
            return json.dumps(o, ensure_ascii=False)
        if isinstance(o, np.ndarray):
            return enc(o.tolist(), level)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {enc(v, level + 1)}" for k, v in o.items()]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in o):
                return "[" + ", ".join(enc(v, level + 1) for v in o) + "]"
            return "[\n" + ",\n".join(pad + enc(v, level + 1) for v in o) + "\n" + end + "]"
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj, 0) + "\n"
