import copy
import re
from typing import Iterable

import yaml

from lib.errors import ConfigError


def _parse_selector(selector: str):
    # Supports consecutive indices, e.g. scene.planes[1].half_size[0]
    parts = selector.split('.') if selector else []
    tokens = []  # list of (name: str, indices: List[int])
    for part in parts:
        m = re.match(r"^(\w+)((\[\d+])*)$", part)
        if not m:
            raise ConfigError(f"Malformed selector segment '{part}' in '{selector}'")
        idxs = [int(mm.group(1)) for mm in re.finditer(r"\[(\d+)]", m.group(2) or "")]
        tokens.append((m.group(1), idxs))
    return tokens


def set_by_selector(root: dict, selector: str, value) -> None:
    """Set the value at `selector` in a YAML tree.

    The final mapping key may be new (to override a defaulted scenario field);
    every other segment and every index must already exist.
    """
    tokens = _parse_selector(selector)
    if not tokens:
        raise ConfigError("Empty override selector")
    cur = root
    parent = None
    key_or_index = None
    for pos, (name, idxs) in enumerate(tokens):
        if not isinstance(cur, dict):
            raise ConfigError(f"'{selector}': '{name}' is not inside a mapping")
        last = pos == len(tokens) - 1 and not idxs
        if name not in cur and not last:
            raise ConfigError(f"'{selector}': no field '{name}'")
        parent, key_or_index = cur, name
        cur = cur.get(name)
        for idx in idxs:
            if not isinstance(cur, list) or idx >= len(cur):
                raise ConfigError(f"'{selector}': index [{idx}] out of range for '{name}'")
            parent, key_or_index = cur, idx
            cur = cur[idx]
    parent[key_or_index] = value


def parse_override(text: str):
    """'key.path[idx]=value' -> (selector, value); the value is read as a YAML scalar."""
    selector, sep, raw = text.partition('=')
    if not sep or not selector.strip():
        raise ConfigError(f"Override '{text}' must look like key.path=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"Override '{text}': unreadable value ({e})") from e
    return selector.strip(), value


def apply_overrides(tree: dict, overrides: Iterable[str]) -> dict:
    result = copy.deepcopy(tree)
    for text in overrides:
        selector, value = parse_override(text)
        set_by_selector(result, selector, value)
    return result
