"""Machine constants (p, g, l) and the text file that persists them.

File layout::

    p=4
    w=8 g=2.5e-09 l=1.2e-05
    w=64 g=...

Lines that do not parse are ignored. Floats are written with ``repr`` so a
write/read cycle is bit-exact.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

WORD_SIZES = (8, 64, 1024, 1048576)
PARAMS_ENV = "LPF_MACHINE_PARAMS"

# Fallback constants; deliberately pessimistic, one word = 8 bytes.
DEFAULT_G_PER_BYTE = 1.0e-9
DEFAULT_L = 1.0e-4


@dataclass(frozen=True)
class WordParams:
    g: float
    l: float
    measured: bool = False


@dataclass(frozen=True)
class MachineParams:
    p: int
    table: dict[int, WordParams] = field(default_factory=dict)
    source: str = "default"
    path: str | None = None

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        for w, entry in self.table.items():
            if not entry.g > 0 or not entry.l >= 0:
                raise ValueError(f"invalid constants for w={w}: {entry}")

    def entry(self, w: int = 8) -> WordParams:
        try:
            return self.table[w]
        except KeyError:
            return default_word_params(w)

    def g(self, w: int = 8) -> float:
        return self.entry(w).g

    def l(self, w: int = 8) -> float:
        return self.entry(w).l


def default_word_params(w: int) -> WordParams:
    return WordParams(g=DEFAULT_G_PER_BYTE * w, l=DEFAULT_L, measured=False)


def default_params(p: int) -> MachineParams:
    return MachineParams(p=p, table={w: default_word_params(w) for w in WORD_SIZES})


def format_params(p: int, table: dict[int, tuple[float, float]]) -> str:
    lines = [f"p={int(p)}"]
    for w in sorted(table):
        g, l = table[w]
        lines.append(f"w={int(w)} g={float(g)!r} l={float(l)!r}")
    return "\n".join(lines) + "\n"


def write_params_file(path, p: int, table: dict[int, tuple[float, float]]) -> None:
    """Write ``table`` (word size -> (g, l)) to ``path``; I/O errors propagate."""
    Path(path).write_text(format_params(p, table))


def parse_params(text: str, path: str | None = None) -> MachineParams:
    p = None
    table: dict[int, WordParams] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("p=") and " " not in line:
            try:
                p = int(line[2:])
            except ValueError:
                pass
            continue
        fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
        if set(fields) != {"w", "g", "l"}:
            continue
        try:
            w, g, l = int(fields["w"]), float(fields["g"]), float(fields["l"])
        except ValueError:
            continue
        if g > 0 and l >= 0:
            table[w] = WordParams(g=g, l=l, measured=True)
    if p is None or p < 1:
        raise ValueError(f"machine parameters file {path!r} lacks a valid p= header")
    return MachineParams(p=p, table=table, source="measured", path=path)


def read_params_file(path) -> MachineParams:
    return parse_params(Path(path).read_text(), path=str(path))


_cache: dict[str, MachineParams | None] = {}
_cache_lock = threading.Lock()


def lookup(p_default: int, path: str | None = None) -> MachineParams:
    """Table lookup behind probe: the file is parsed once per path."""
    if path is None:
        path = os.environ.get(PARAMS_ENV)
    if not path:
        return default_params(p_default)
    try:
        found = _cache[path]
    except KeyError:
        with _cache_lock:
            try:
                found = read_params_file(path)
            except (OSError, ValueError):
                found = None
            _cache[path] = found
    return found if found is not None else default_params(p_default)


def clear_cache() -> None:
    with _cache_lock:
        _cache.clear()
