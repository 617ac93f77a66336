"""
Plain key=value run configuration files.

  # comment
  n_queries = 15
  lr_other_milestones = 30,50

Blank lines and `#` comments are ignored. Every other line must hold one
`=`; keys are unique. Values stay strings here; apps.core.forms casts and
validates them.
"""
from pathlib import Path

from apps.core.exceptions import ConfigError, InputError


def parse_config_text(text: str) -> dict:
    """Returns {key: (value, line_no)}."""
    entries = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"expected key=value, got {raw!r}", line=line_no)
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigError("empty key", line=line_no)
        if key in entries:
            raise ConfigError(f"duplicate key '{key}' (first set on line {entries[key][1]})", line=line_no)
        entries[key] = (value, line_no)
    return entries


def parse_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def merge_overrides(entries: dict, **overrides) -> dict:
    """Command-line flags win over file values; None means 'not given'."""
    merged = dict(entries)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = (str(value), None)
    return merged
