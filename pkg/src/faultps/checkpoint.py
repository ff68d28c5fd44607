"""Durable checkpoints on the local filesystem: atomic writes, latest-wins restore."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

from . import nn

log = logging.getLogger(__name__)

_CKPT_RE = re.compile(r"^ckpt-(\d{12})\.fps$")


@dataclass(frozen=True)
class Checkpoint:
    step: int
    path: Path
    wall_time: float = 0.0
    run_id: str = ""


def save_checkpoint(ckpt_dir, params: nn.ParamVector,
                    wall_time: float = 0.0, run_id: str = "") -> Checkpoint:
    """Write `ckpt-<step>.fps` atomically: temp file, fsync, rename."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    final = ckpt_dir / f"ckpt-{params.step:012d}.fps"
    tmp = ckpt_dir / f".tmp-ckpt-{params.step:012d}-{os.getpid()}"
    payload = nn.serialize_params(params)
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, final)
    return Checkpoint(params.step, final, wall_time, run_id)


def list_checkpoints(ckpt_dir) -> List[Tuple[int, Path]]:
    ckpt_dir = Path(ckpt_dir)
    if not ckpt_dir.is_dir():
        return []
    found = []
    for entry in ckpt_dir.iterdir():
        m = _CKPT_RE.match(entry.name)
        if m:
            found.append((int(m.group(1)), entry))
    return sorted(found)


def restore_latest(ckpt_dir, spec: nn.ModelSpec) -> Optional[nn.ParamVector]:
    """Highest-step valid checkpoint, or None; corrupt files are skipped with a warning."""
    for step, path in reversed(list_checkpoints(ckpt_dir)):
        try:
            params = nn.deserialize_params(path.read_bytes(), spec)
        except (nn.CorruptPayloadError, nn.LayoutMismatchError, OSError) as exc:
            log.warning("skipping corrupt checkpoint %s: %s", path, exc)
            continue
        if params.step != step:
            log.warning("skipping %s: embedded step %d != filename", path, params.step)
            continue
        return params
    return None
