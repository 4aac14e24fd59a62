"""Plain-text checkpoints: a versioned header, the model config, then one line per parameter.

Layout::

    # mmlatch-checkpoint 1
    config {"dims": {"A": 8, ...}, "hidden": 16, ...}
    param encoders.A.fwd.w_ih 8x64 0.01,-0.2,...

Values are written with ``repr`` so float64 parameters round-trip bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import MMLatchModel, ModelConfig

TAG = "mmlatch-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint, or one that does not fit the requested model/data."""


def save_checkpoint(model: MMLatchModel, path: str | Path, extra: dict | None = None) -> None:
    lines = [f"# {TAG} {VERSION}", "config " + json.dumps(model.config.to_dict(), sort_keys=True)]
    if extra:
        lines.append("meta " + json.dumps(extra, sort_keys=True))
    for name, p in model.named_parameters():
        shape = "x".join(str(s) for s in p.shape) or "scalar"
        values = ",".join(repr(float(v)) for v in p.data.ravel())
        lines.append(f"param {name} {shape} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].split()[:2] != ["#", TAG]:
        raise CheckpointError(f"{path}: not an {TAG} file")
    version = int(lines[0].split()[2])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config, meta, state = None, {}, {}
    for lineno, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config = ModelConfig(**json.loads(rest))
        elif kind == "meta":
            meta = json.loads(rest)
        elif kind == "param":
            try:
                name, shape_text, values = rest.split(" ")
                shape = () if shape_text == "scalar" else tuple(int(s) for s in shape_text.split("x"))
                data = np.array([float(v) for v in values.split(",")], dtype=np.float64)
                state[name] = data.reshape(shape)
            except ValueError as exc:
                raise CheckpointError(f"{path}:{lineno}: bad parameter line ({exc})") from None
        elif line.strip():
            raise CheckpointError(f"{path}:{lineno}: unknown record {kind!r}")
    if config is None:
        raise CheckpointError(f"{path}: missing config line")
    return config, state, meta


def load_checkpoint(path: str | Path) -> MMLatchModel:
    config, state, _ = read_checkpoint(path)
    model = MMLatchModel(config)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from None
    return model
