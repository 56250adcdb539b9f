"""Report serialization: canonical JSON with 17-significant-digit floats,
non-finite values nulled with reason codes, and atomic writes."""

from __future__ import annotations

import math
import os
import tempfile

SCHEMA_VERSION = "1.0.0"


def report_schema_version() -> str:
    return SCHEMA_VERSION


def sanitize(obj):
    """Replace non-finite numbers with None; returns (cleaned, reasons_by_path)."""
    nulls: dict[str, str] = {}
    return _sanitize(obj, "", nulls), nulls


def _sanitize(value, path, nulls):
    if isinstance(value, dict):
        return {k: _sanitize(v, f"{path}/{k}", nulls) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v, f"{path}/{i}", nulls) for i, v in enumerate(value)]
    if isinstance(value, bool) or value is None or isinstance(value, (str, int)):
        return value
    if hasattr(value, "item"):  # numpy scalar
        return _sanitize(value.item(), path, nulls)
    if isinstance(value, float):
        if math.isnan(value):
            nulls[path] = "nan"
            return None
        if math.isinf(value):
            nulls[path] = "inf" if value > 0 else "-inf"
            return None
        return value
    return value


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, LF, floats at 17 significant digits."""
    pieces: list[str] = []
    _encode(obj, pieces)
    return "".join(pieces)


def _encode(obj, out: list[str]):
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format(obj, ".17g"))
    elif isinstance(obj, str):
        out.append(_encode_str(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if i:
                out.append(",")
            out.append(_encode_str(str(key)))
            out.append(":")
            _encode(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


_ESCAPES = {"\\": "\\\\", '"': '\\"', "\n": "\\n", "\r": "\\r", "\t": "\\t"}


def _encode_str(s: str) -> str:
    chunks = ['"']
    for ch in s:
        if ch in _ESCAPES:
            chunks.append(_ESCAPES[ch])
        elif ord(ch) < 0x20:
            chunks.append(f"\\u{ord(ch):04x}")
        else:
            chunks.append(ch)
    chunks.append('"')
    return "".join(chunks)


def write_report(path: str, payload: dict) -> dict:
    """Sanitize, serialize, and atomically write a report. Returns the payload."""
    cleaned, nulls = sanitize(payload)
    if nulls:
        cleaned["nulls"] = {k: v for k, v in sorted(nulls.items())}
    cleaned.setdefault("schema_version", SCHEMA_VERSION)
    text = dumps(cleaned) + "\n"
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return cleaned
