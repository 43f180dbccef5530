"""Nested frozen-dataclass configs from JSON-style dicts."""

from dataclasses import fields, is_dataclass

from ..errors import ConfigurationError


def from_dict(cls, doc: dict):
    """Build ``cls`` from ``doc``; nested dataclass fields accept dicts, lists become tuples."""
    names = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = names[name].default
        if is_dataclass(default) and isinstance(value, dict):
            value = from_dict(type(default), value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)
