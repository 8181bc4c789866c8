"""``CKPL-PARAMS-v1`` parameter files.

Line 1 is the header. Every following line is one tensor::

    <module path>\t<frozen|trainable>\t<comma-separated shape>\t<space-separated values>

Values use Python's shortest round-tripping float repr, so load(save(x)) == x bitwise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .training import TrainState

PARAMS_HEADER = "CKPL-PARAMS-v1"


class ParamsFormatError(ValueError):
    pass


def collect(state: TrainState) -> dict[str, tuple[bool, np.ndarray]]:
    """Every tensor of a trained model, keyed by module path; flag is True for trainables."""
    out: dict[str, tuple[bool, np.ndarray]] = {}
    for name, t in state.base.named_parameters().items():
        out[f"base.{name}"] = (False, t.values)
    out["prompt_set.keys"] = (False, state.prompt_set.keys.values)
    for name, t in state.named_trainables().items():
        out[name] = (True, t.values)
    return out


def save_params(path, tensors: dict[str, tuple[bool, np.ndarray]]) -> None:
    lines = [PARAMS_HEADER]
    for name, (trainable, values) in tensors.items():
        if any(c in name for c in "\t\n"):
            raise ParamsFormatError(f"bad tensor name {name!r}")
        shape = ",".join(str(n) for n in values.shape)
        vals = " ".join(repr(float(x)) for x in np.ravel(values))
        lines.append(f"{name}\t{'trainable' if trainable else 'frozen'}\t{shape}\t{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path) -> dict[str, tuple[bool, np.ndarray]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != PARAMS_HEADER:
        raise ParamsFormatError(f"{path}: missing {PARAMS_HEADER} header")
    out = {}
    for n, ln in enumerate(lines[1:], start=2):
        parts = ln.split("\t")
        if len(parts) != 4 or parts[1] not in ("frozen", "trainable"):
            raise ParamsFormatError(f"{path}:{n}: malformed record")
        name, kind, shape_s, vals_s = parts
        shape = tuple(int(x) for x in shape_s.split(",")) if shape_s else ()
        vals = np.array([float(x) for x in vals_s.split()], dtype=np.float64)
        if vals.size != int(np.prod(shape)):
            raise ParamsFormatError(f"{path}:{n}: {vals.size} values for shape {shape}")
        out[name] = (kind == "trainable", vals.reshape(shape))
    return out


def save_state(path, state: TrainState) -> None:
    save_params(path, collect(state))


def restore_state(state: TrainState, tensors: dict[str, tuple[bool, np.ndarray]]) -> None:
    """Load trainables into ``state``; frozen tensors must already match exactly."""
    current = collect(state)
    missing = set(current) - set(tensors)
    if missing:
        raise ParamsFormatError(f"parameter file lacks {sorted(missing)}")
    for name, (trainable, values) in current.items():
        _, stored = tensors[name]
        if stored.shape != values.shape:
            raise ParamsFormatError(f"{name}: shape {stored.shape} != {values.shape}")
        if not trainable and not np.array_equal(stored, values):
            raise ParamsFormatError(f"frozen tensor {name} differs from the configured model")
    for name, t in state.named_trainables().items():
        t.values[...] = tensors[name][1]
