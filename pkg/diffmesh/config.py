""" Typed config sections read from `Settings` blocks. """

import dataclasses
import typing as t

from diffmesh.errors import ConfigError
from diffmesh.expression import evaluate_value
from diffmesh.parsers import Settings
from diffmesh.util import register_decorator


class register_check(register_decorator):
    """
    Decorator for validation methods of a `ConfigSection`. Every registered
    check runs after construction and raises `ConfigError` on failure.
    """

    pass


def to_bool(value: t.Any) -> bool:
    """
    Convert an evaluated config value to a bool.

    Examples:

        >>> to_bool(True), to_bool(0), to_bool("yes")
        (True, False, True)
    """
    if isinstance(value, str):
        if value.lower() in ("true", "yes", "on", "1"):
            return True
        if value.lower() in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(value, (bool, int)):
        return bool(value)
    raise ValueError(f"not a boolean: {value!r}")


def to_int(value: t.Any) -> int:
    """
    Convert an evaluated config value to an int, refusing fractions.

    Examples:

        >>> to_int(64), to_int(64.0)
        (64, 64)
    """
    if isinstance(value, bool):
        raise ValueError(f"not an integer: {value!r}")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"not an integer: {value!r}")
    return int(value)


def to_tuple(value: t.Any) -> t.Tuple[float, ...]:
    if not isinstance(value, (tuple, list)):
        value = (value,)
    return tuple(float(item) for item in value)


def format_value(value: t.Any) -> str:
    """
    Format a config value so that `evaluate_value` reads it back unchanged.

    Examples:

        >>> format_value(True), format_value(1e-4), format_value((0.9, 0.999))
        ('true', '0.0001', '0.9, 0.999')

        >>> format_value("cosine"), format_value("two words")
        ('cosine', "'two words'")
    """
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(format_value(item) for item in value)
    if isinstance(value, str) and value.isidentifier():
        return value
    return repr(value)


class ConfigSection:
    """
    Base class for dataclass config sections. Subclasses are registered under
    a section name with `ConfigSection.register_section`, and their fields
    are filled from a `Settings` block by `from_settings`, converting each
    value according to the field type in `conversion_table`.

    Examples:

        >>> @ConfigSection.register_section("example")
        ... @dataclasses.dataclass
        ... class Example(ConfigSection):
        ...     width: int = 8
        ...     rate: float = 0.5
        ...     @register_check
        ...     def width_positive(self):
        ...         if self.width <= 0:
        ...             raise ConfigError("width must be positive")

        >>> Example.from_settings(Settings.loads("width = 4 * 4")).width
        16

        >>> Example.from_settings(Settings.loads("width = 0"))
        Traceback (most recent call last):
          ...
        diffmesh.errors.ConfigError: width must be positive

        >>> print(Example(width=2).to_settings().dumps(), end="")
        width = 2
        rate = 0.5

        >>> del ConfigSection.registered_sections["example"]
    """

    conversion_table: t.ClassVar[t.Mapping[t.Any, t.Callable]] = {
        bool: to_bool,
        int: to_int,
        float: float,
        str: str,
        tuple: to_tuple,
    }
    registered_sections: t.ClassVar[t.Dict[str, t.Type["ConfigSection"]]] = {}
    section: t.ClassVar[str] = ""

    def __post_init__(self):
        for check in register_check.get_registered(self.__class__).values():
            check(self)

    @classmethod
    def register_section(cls, name: str) -> t.Callable:
        """
        Class decorator registering a config section under `name`.
        """

        def decorator(decorated):
            cls.registered_sections[name] = decorated
            decorated.section = name
            return decorated

        return decorator

    @classmethod
    def keys(cls) -> t.List[str]:
        """Return the setting names this section reads."""
        return [field.name for field in dataclasses.fields(cls) if field.init]

    @classmethod
    def from_settings(cls, settings: Settings, **overrides) -> "ConfigSection":
        """
        Create a section from the keys in `settings` that it declares. Keyword
        `overrides` take precedence and are converted the same way.
        """
        values = {}
        for field in dataclasses.fields(cls):
            if not field.init:
                continue
            if field.name in overrides and overrides[field.name] is not None:
                value = overrides[field.name]
                where = "override"
            elif field.name in settings:
                raw = settings[field.name]
                where = settings.location(field.name) or "settings"
                try:
                    value = evaluate_value(raw)
                except Exception as exc:
                    raise ConfigError(
                        f"Invalid value for {field.name!r} at {where}: {exc}"
                    )
            else:
                continue
            values[field.name] = cls.convert(field, value, where)
        return cls(**values)

    @classmethod
    def convert(cls, field: dataclasses.Field, value: t.Any, where: str) -> t.Any:
        converter = cls.conversion_table.get(field.type, lambda value: value)
        try:
            return converter(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid value for {field.name!r} at {where}: {exc}")

    def to_settings(self) -> Settings:
        """Return this section as a `Settings` block."""
        return Settings(
            (name, format_value(getattr(self, name))) for name in self.keys()
        )

    def replace(self, **changes) -> "ConfigSection":
        """Return a copy with the given fields changed and checks re-run."""
        return dataclasses.replace(self, **changes)


def check_known_keys(settings: Settings):
    """
    Raise `ConfigError` for any key in `settings` that no registered section
    declares.
    """
    known = {
        key
        for section_cls in ConfigSection.registered_sections.values()
        for key in section_cls.keys()
    }
    for key in settings:
        if key not in known:
            where = settings.location(key)
            suffix = f" at {where}" if where else ""
            raise ConfigError(f"Unknown config key {key!r}{suffix}")


def merge_settings(*blocks: t.Optional[Settings]) -> Settings:
    """
    Merge `Settings` blocks left to right, later values winning while the
    remembered locations follow the winning value.

    Examples:

        >>> merged = merge_settings(Settings.loads("a = 1\\nb = 2"), Settings({"a": "3"}))
        >>> list(merged.items())
        [('a', '3'), ('b', '2')]
    """
    merged = Settings()
    for block in blocks:
        if not block:
            continue
        for key, value in block.items():
            merged[key] = value
            merged.origins[key] = block.location(key)
    return merged
