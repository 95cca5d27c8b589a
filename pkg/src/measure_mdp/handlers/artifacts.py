"""Input loading and write-once output artifacts for the CLI commands."""
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .. import __version__
from ..core.errors import InputError, ParseError
from ..core.json_encoder import dumps
from ..core.mdp import FiniteMdp

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"


def _reject_constant(name: str) -> float:
    raise ValueError(f"non-finite literal {name} is not allowed")


def load_json(path: str) -> Any:
    """Parse a JSON file; decode problems surface as ParseError with line and column."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ParseError(f"cannot read '{path}': {e.strerror}")
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e.msg} at line {e.lineno}, column {e.colno}", e.lineno, e.colno)
    except ValueError as e:
        raise ParseError(f"{path}: {e}")


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_problem(path: str) -> Tuple[FiniteMdp, Dict[str, Any]]:
    """Problem file -> (MDP, raw document); shape problems are input errors, not parse errors."""
    data = load_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top-level value must be an object")
    try:
        return FiniteMdp.from_dict(data), data
    except InputError:
        raise
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: malformed arrays ({e})")


def load_metric(path: Optional[str]) -> Optional[np.ndarray]:
    if path is None:
        return None
    data = load_json(path)
    if isinstance(data, dict):
        data = data.get("metric")
    try:
        return np.array(data, dtype=float)
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: ground metric must be a numeric matrix ({e})")


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    seed: Optional[int] = None
    tool_version: str = __version__
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: Optional[str] = None

    def add_input(self, path: Optional[str]) -> None:
        if path is not None and os.path.isfile(path):
            self.inputs[path] = file_digest(path)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tool_version": self.tool_version,
            "command": self.command,
            "argv": self.argv,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
        }


class ArtifactWriter:
    """Writes every output through temp-file-then-rename and records it in the manifest."""

    def __init__(self, out_dir: str, manifest: RunManifest):
        self.out_dir = out_dir
        self.manifest = manifest
        os.makedirs(out_dir, exist_ok=True)

    def _write_bytes(self, name: str, data: bytes) -> str:
        target = os.path.join(self.out_dir, name)
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        logger.info(f"wrote {target}")
        return target

    def write_json(self, name: str, payload: Any) -> str:
        data = dumps(payload).encode("utf-8")
        self.manifest.outputs[name] = hashlib.sha256(data).hexdigest()
        return self._write_bytes(name, data)

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        data = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n").encode("utf-8")
        self.manifest.outputs[name] = hashlib.sha256(data).hexdigest()
        return self._write_bytes(name, data)

    def finalize(self) -> str:
        self.manifest.finished = datetime.now(timezone.utc).isoformat()
        return self._write_bytes("manifest.json", dumps(self.manifest).encode("utf-8"))
