import datetime

import numpy as np


def compact_mapping(obj):
    """Compact a dict/mapping by removing all None values."""

    return {k: v for k, v in obj.items() if v is not None}


def to_iso8601(dt):
    """Convert a datetime object to an
    `ISO 8601 <https://www.iso.org/iso-8601-date-and-time-format.html>`_ string.
    """

    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def utc_now():
    return datetime.datetime.now(datetime.timezone.utc)


def flatten_mapping(obj, prefix=""):
    """Flatten nested mappings into dotted keys: ``{"a": {"b": 1}}`` -> ``{"a.b": 1}``."""

    flat = {}
    for key, value in obj.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_mapping(value, prefix=f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def nest_mapping(flat):
    """Inverse of :func:`flatten_mapping`."""

    nested = {}
    for dotted, value in flat.items():
        *parents, leaf = dotted.split(".")
        node = nested
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def loglog_slope(sizes, errors):
    """Least-squares slope of ``-log(error)`` against ``log(size)``.

    A first-order method gives a slope close to 1.
    """

    sizes = np.asarray(sizes, dtype=float)
    errors = np.asarray(errors, dtype=float)
    slope, _ = np.polyfit(np.log(sizes), np.log(errors), 1)
    return -float(slope)
