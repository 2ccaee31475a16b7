""" Extensions to the click library that convert input to `Settings` blocks. """

import typing as t

import click

from diffmesh.errors import errorhandler
from diffmesh.expression import evaluate_value
from diffmesh.parsers import Settings


class OverrideType(click.ParamType):
    """
    A `click.ParamType` that converts `key=value` input to a one-entry
    `Settings` block. The value is evaluated once here so that syntax errors
    are reported against the flag rather than later.

    Examples:

        >>> list(OverrideType().convert("epochs = 2 * 3", None, None).items())
        [('epochs', '2 * 3')]
    """

    name = "KEY=VALUE"

    @errorhandler
    def convert(self, value: t.Any, param: t.Any = None, ctx: t.Any = None) -> Settings:
        if isinstance(value, Settings):
            return value
        if "=" not in value:
            self.fail(f"expected KEY=VALUE, got {value!r}", param, ctx)
        key, raw = (part.strip() for part in value.split("=", 1))
        if not key.isidentifier():
            self.fail(f"invalid key {key!r}", param, ctx)
        evaluate_value(raw)
        settings = Settings([(key, raw)], source="--set")
        settings.origins[key] = f"--set {key}"
        return settings


class SettingsFile(click.Path):
    """
    A `click.Path` that reads a `key = value` config file into a `Settings`
    block.
    """

    name = "CONFIG_FILE"

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("exists", True)
        kwargs.setdefault("dir_okay", False)
        super().__init__(*args, **kwargs)

    @errorhandler
    def convert(self, value: t.Any, *args) -> Settings:
        if isinstance(value, Settings):
            return value
        path = super().convert(value, *args)
        return Settings.read(path)
