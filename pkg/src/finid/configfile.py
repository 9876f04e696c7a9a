"""Flat key-value config files for CLI runs.

Grammar: one `key = value` pair per line; blank lines and `#` comments are
ignored. Keys are the long option names of the subcommand with underscores
(e.g. `batches = 2000`, `per_id = 12`). Values are parsed as bool
(true/false), int, float, or left as strings.
"""

from __future__ import annotations

from .errors import CliError


def parse_value(raw: str):
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def load_config(path: str) -> dict:
    values: dict[str, object] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise CliError(f"cli: {path} line {lineno}: expected 'key = value'")
                key, _, raw = stripped.partition("=")
                key = key.strip().replace("-", "_").replace(".", "_")
                if not key:
                    raise CliError(f"cli: {path} line {lineno}: empty key")
                values[key] = parse_value(raw)
    except FileNotFoundError:
        raise CliError(f"cli: config file not found: {path}") from None
    return values
