"""INI-style run configuration.

Sections map onto the config dataclasses; keys are the dataclass field
names.  Tuples are written comma separated, booleans as true/false::

    [model]
    channels = 2, 4, 8, 16

    [train]
    epochs = 500
    lr = 1e-2

    [pipeline]
    target_size = 24, 24

Unknown sections or keys are rejected so typos do not silently fall back
to defaults.
"""
import configparser
import dataclasses
import math

from .augment import AugmentConfig
from .errors import ConfigurationError
from .model import VfcnnConfig
from .phantom import PhantomConfig
from .preprocess import PipelineConfig
from .train import SynthConfig, TrainConfig

SECTIONS = {
    "model": VfcnnConfig,
    "train": TrainConfig,
    "pipeline": PipelineConfig,
    "augment": AugmentConfig,
    "phantom": PhantomConfig,
    "synth": SynthConfig,
}


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_number(text):
    text = text.strip()
    if text.lower() in ("inf", "infinity"):
        return math.inf
    try:
        return int(text)
    except ValueError:
        return float(text)


def _convert(text, default):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(_parse_number(text))
    if isinstance(default, str):
        return text.strip()
    # tuples and None-valued optional geometry
    return tuple(_parse_number(part) for part in text.split(",") if part.strip())


def section_overrides(cls, items):
    defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else None)
                for f in dataclasses.fields(cls)}
    out = {}
    for key, text in items:
        if key not in defaults:
            raise ConfigurationError(f"unknown key {key!r} for [{cls.__name__}]")
        try:
            out[key] = _convert(text, defaults[key])
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key!r}: {exc}") from None
    return out


def load_config(path=None, text=None):
    """Return ``{section: overrides}`` parsed from an INI file or string."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    elif text is not None:
        parser.read_string(text)
    result = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        result[section] = section_overrides(SECTIONS[section], parser.items(section))
    return result


def build(section, overrides, **extra):
    values = dict(overrides.get(section, {}))
    values.update({k: v for k, v in extra.items() if v is not None})
    return SECTIONS[section](**values)
