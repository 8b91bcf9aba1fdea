"""The frozen bank of 50 instruction templates and the band vocabulary."""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from importlib import resources

from .errors import ConfigurationError
from .scene import BANDS

PLACEHOLDER = "<type>"
BANK_VERSION = "instructions-v1"
BANK_SIZE = 50
_BAND_WORD = re.compile(r"\b(near|mid|long)\b", re.IGNORECASE)


@dataclass(frozen=True)
class InstructionTemplate:
    template_id: int
    text: str

    def render(self, band: str) -> str:
        if band not in BANDS:
            raise ValueError(f"unknown band {band!r}")
        return self.text.replace(PLACEHOLDER, band)


@functools.lru_cache(maxsize=None)
def _load_bank() -> tuple:
    try:
        raw = resources.files("vis2ir").joinpath("data/instructions_v1.txt").read_text("utf-8")
    except (FileNotFoundError, OSError) as exc:
        raise ConfigurationError(f"instruction bank data file unavailable: {exc}") from exc
    lines = raw.splitlines()
    if len(lines) != BANK_SIZE:
        raise ConfigurationError(f"instruction bank has {len(lines)} lines, expected {BANK_SIZE}")
    if len(set(lines)) != BANK_SIZE:
        raise ConfigurationError("instruction bank contains duplicate templates")
    for i, line in enumerate(lines):
        if line.count(PLACEHOLDER) != 1:
            raise ConfigurationError(f"template {i} must contain exactly one {PLACEHOLDER}")
        if _BAND_WORD.search(line):
            raise ConfigurationError(f"template {i} contains a literal band word")
    return tuple(InstructionTemplate(i, t) for i, t in enumerate(lines))


def build_bank() -> list:
    return list(_load_bank())


def render_instruction(template_id: int, band: str) -> str:
    if not 0 <= template_id < BANK_SIZE:
        raise ValueError(f"template_id {template_id} outside [0, {BANK_SIZE - 1}]")
    return _load_bank()[template_id].render(band)


def parse_band(text: str) -> str | None:
    """The single band word mentioned in ``text``; None if absent or ambiguous."""
    found = {m.lower() for m in _BAND_WORD.findall(text)}
    return found.pop() if len(found) == 1 else None
