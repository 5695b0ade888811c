"""Flat ``key = value`` configuration files and override layering.

Format: one pair per line, ``#`` starts a comment, blank lines ignored.
Values are plain strings; the consumer converts them with the typed ``take_*``
helpers below.  List-valued keys accept comma and/or whitespace separated
items.  Precedence is handled by :func:`layer_configs`: built-in defaults are
overridden by the config file, which is overridden by command-line pairs.
"""

from __future__ import annotations

import re

from .errors import ConfigError

_KV_RE = re.compile(r"^([A-Za-z0-9_.]+)\s*=\s*(.*)$")


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse flat key=value text into an ordered dict of raw string values."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _KV_RE.match(line)
        if m is None:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = m.group(1), m.group(2).strip()
        if key in pairs:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def parse_kv_file(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    return parse_kv_text(text, origin=path)


def layer_configs(*layers: dict[str, str]) -> dict[str, str]:
    """Merge config dicts; later layers win.  Layer order: defaults, file, CLI."""
    merged: dict[str, str] = {}
    for layer in layers:
        merged.update(layer)
    return merged


def split_list(value: str) -> list[str]:
    return [item for item in re.split(r"[,\s]+", value.strip()) if item]


class KeyReader:
    """Typed, typo-checked access to a parsed key=value dict."""

    def __init__(self, pairs: dict[str, str], origin: str = "<config>"):
        self.pairs = dict(pairs)
        self.origin = origin
        self._seen: set[str] = set()

    def _raw(self, key: str):
        self._seen.add(key)
        return self.pairs.get(key)

    def take_str(self, key: str, default: str | None = None) -> str | None:
        raw = self._raw(key)
        return default if raw is None else raw

    def take_int(self, key: str, default: int | None = None) -> int | None:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{self.origin}: key {key!r} expects an integer, got {raw!r}") from exc

    def take_float(self, key: str, default: float | None = None) -> float | None:
        raw = self._raw(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{self.origin}: key {key!r} expects a number, got {raw!r}") from exc

    def take_list(self, key: str, default: list[str] | None = None) -> list[str] | None:
        raw = self._raw(key)
        if raw is None:
            return default
        return split_list(raw)

    def take_int_list(self, key: str, default: list[int] | None = None) -> list[int] | None:
        items = self.take_list(key)
        if items is None:
            return default
        try:
            return [int(item) for item in items]
        except ValueError as exc:
            raise ConfigError(f"{self.origin}: key {key!r} expects integers, got {items!r}") from exc

    def reject_unknown(self, known_prefixes: tuple[str, ...] = ()) -> None:
        """Raise if any key was never consumed and matches no known prefix."""
        leftover = [
            key for key in self.pairs
            if key not in self._seen and not any(key.startswith(p) for p in known_prefixes)
        ]
        if leftover:
            raise ConfigError(f"{self.origin}: unknown key(s): {', '.join(sorted(leftover))}")


def render_kv(pairs: dict[str, str]) -> str:
    """Canonical key=value rendering (sorted keys) for --show-config output."""
    return "".join(f"{key} = {pairs[key]}\n" for key in sorted(pairs))
