"""Plain ``key = value`` config files, read with the stdlib ``configparser``.

The files have no section header; blank lines and ``#`` comments are
ignored. Keys are case-sensitive; values are returned as stripped strings
and converted by the caller.
"""
from __future__ import annotations

import configparser
from pathlib import Path

from .errors import ParseError

_SECTION = "config"


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(
        delimiters=("=", ":"),
        comment_prefixes=("#",),
        inline_comment_prefixes=("#",),
        interpolation=None,
    )
    parser.optionxform = str  # keep key case
    return parser


def parse_kv(text: str) -> dict[str, str]:
    parser = _parser()
    try:
        # the synthetic header shifts every line number by one
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.ParsingError as exc:
        line_no, raw = exc.errors[0]
        raise ParseError(line_no - 1, f"expected 'key = value', got {raw}") from None
    except configparser.DuplicateOptionError as exc:
        raise ParseError((exc.lineno or 1) - 1, f"duplicate key {exc.option!r}") from None
    except configparser.Error as exc:
        raise ParseError(0, str(exc)) from None
    if parser.sections() != [_SECTION]:
        raise ParseError(0, "section headers are not allowed")
    return dict(parser[_SECTION])


def load_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def to_bool(value: str) -> bool:
    try:
        return configparser.ConfigParser.BOOLEAN_STATES[value.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {value!r}") from None
