"""Shared helpers: deterministic reduction, document IO, hashing."""

import base64
import hashlib
import json
import math

import numpy as np

# When True, scalar reductions use math.fsum (exactly rounded, hence
# independent of summation order); bit-identical outputs across runs.
_DETERMINISTIC_REDUCE = False


def set_deterministic_reduce(flag):
    global _DETERMINISTIC_REDUCE
    _DETERMINISTIC_REDUCE = bool(flag)


def deterministic_reduce_enabled():
    return _DETERMINISTIC_REDUCE


def reduce_sum(arr):
    """Sum of an array; exactly-rounded fsum when deterministic mode is on."""
    if _DETERMINISTIC_REDUCE:
        return math.fsum(np.asarray(arr, dtype=float).ravel())
    return float(np.sum(arr))


def encode_array(arr):
    """Base64 of the little-endian float64 byte stream, C order."""
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(a.shape),
        "dtype": "<f8",
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(doc):
    if doc.get("dtype", "<f8") != "<f8":
        raise ValueError("unsupported array dtype %r" % doc.get("dtype"))
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).copy()


def canonical_json(obj):
    """Stable serialization used for hashing and round-trip checks."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def document_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
