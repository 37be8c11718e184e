"""Checkpoint container: an ``.npz`` archive of little-endian parameter
arrays plus the full config text and a format tag."""
from __future__ import annotations

import numpy as np

from .numerics import ParamStore

FORMAT = "hybrid-attn-ckpt/1"


class CheckpointError(ValueError):
    pass


def save(path, params: ParamStore, config_text: str):
    arrays = {"__format__": np.array(FORMAT), "__config__": np.array(config_text)}
    for name, val in params.values.items():
        arrays["p:" + name] = np.ascontiguousarray(val, dtype=val.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load(path):
    """Returns (ParamStore, config_text)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__format__" not in z.files or str(z["__format__"]) != FORMAT:
                raise CheckpointError(f"{path}: not a {FORMAT} checkpoint")
            text = str(z["__config__"])
            P = ParamStore()
            for key in z.files:
                if key.startswith("p:"):
                    P.add(key[2:], z[key].astype(z[key].dtype.newbyteorder("=")))
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return P, text


def check_compatible(P: ParamStore, expected: ParamStore):
    missing = sorted(set(expected.names()) - set(P.names()))
    extra = sorted(set(P.names()) - set(expected.names()))
    bad = [n for n in expected.names() if n in P and P[n].shape != expected[n].shape]
    if missing or extra or bad:
        raise CheckpointError(f"checkpoint does not match config: missing={missing[:5]} "
                              f"extra={extra[:5]} shape_mismatch={bad[:5]}")
