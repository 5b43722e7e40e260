"""Artifact file helpers: atomic JSON/text writes and checkpoint I/O.

Every artifact embeds a `run` block (command, seed, resolved parameters) so
outputs are reproducible from their own metadata alone.
"""

from __future__ import annotations

import json
import os


class ArtifactError(ValueError):
    """Artifact file missing, malformed, or inconsistent with the request."""


def atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def atomic_write_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ArtifactError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None


def save_checkpoint(path: str, kind: str, config: dict, state: dict, run: dict | None = None) -> None:
    atomic_write_json(path, {
        "format": f"{kind}-checkpoint/v1",
        "run": run or {},
        "config": config,
        "params": state,
    })


def load_checkpoint(path: str, kind: str, expected_config: dict | None = None) -> tuple[dict, dict]:
    """Returns (config, params); rejects wrong kinds and mismatched configs."""
    doc = read_json(path)
    fmt = doc.get("format")
    if fmt != f"{kind}-checkpoint/v1":
        raise ArtifactError(f"{path}: expected {kind} checkpoint, found {fmt!r}")
    config = doc.get("config")
    params = doc.get("params")
    if not isinstance(config, dict) or not isinstance(params, dict):
        raise ArtifactError(f"{path}: checkpoint missing config or params")
    if expected_config is not None and config != expected_config:
        diff = sorted(k for k in set(config) | set(expected_config)
                      if config.get(k) != expected_config.get(k))
        raise ArtifactError(f"{path}: checkpoint config mismatch on {diff}")
    return config, params


def write_csv(path: str, header: list[str], rows: list[list], run: dict | None = None) -> None:
    """CSV with a leading `# run: {...}` comment carrying the config echo."""
    lines = []
    if run is not None:
        lines.append("# run: " + json.dumps(run))
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
