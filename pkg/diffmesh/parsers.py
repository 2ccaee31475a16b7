""" Line-oriented `key = value` text blocks and transactional file writes. """

import collections
import contextlib
import io
import os
import tempfile
import typing as t

from diffmesh.errors import ConfigError
from diffmesh.typing import Lines


TRANSACTION_SUFFIX = ".dmnew"


class Settings(collections.OrderedDict):
    """
    Ordered mapping of setting names to raw string values, as read from a
    line-oriented `key = value` text block. The line number each key was read
    from is remembered for error messages.

    Examples:

        >>> settings = Settings.loads("seed = 7\\n# comment\\nlr = 1e-4  # inline")
        >>> list(settings.items())
        [('seed', '7'), ('lr', '1e-4')]

        >>> settings.location("lr")
        'line 3'

        >>> print(settings.dumps(), end="")
        seed = 7
        lr = 1e-4
    """

    def __init__(self, *args, source: str = "", **kwargs):
        super().__init__(*args, **kwargs)
        self.source = source
        self.origins: t.Dict[str, str] = {}

    @classmethod
    def load(cls, lines: Lines, source: str = "") -> "Settings":
        """
        Parse all `key = value` lines from the enumerated `lines`. Comments
        start with `#` and run to the end of the line; blank lines are
        skipped. A repeated key is an error.
        """
        settings = cls(source=source)
        for linenum, line in lines:
            if "#" in line:
                line, _ = line.split("#", 1)
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"Unsupported syntax at {settings._where(linenum)}: "
                    f"expected 'key = value'"
                )
            key, value = (part.strip() for part in line.split("=", 1))
            if not key.isidentifier():
                raise ConfigError(
                    f"Invalid key {key!r} at {settings._where(linenum)}"
                )
            if key in settings:
                raise ConfigError(
                    f"Duplicate key {key!r} at {settings._where(linenum)}"
                )
            settings[key] = value
            settings.origins[key] = settings._where(linenum)
        return settings

    @classmethod
    def loads(cls, source: str, name: str = "") -> "Settings":
        """Parse a `Settings` block from a string."""
        return cls.load(enumerate(source.splitlines(), 1), source=name)

    @classmethod
    def read(cls, path: str, encoding: str = "utf-8") -> "Settings":
        """Parse a `Settings` block from the file at `path`."""
        with open(path, mode="r", encoding=encoding) as stream:
            return cls.load(enumerate(stream, 1), source=str(path))

    def dump(self, stream: t.TextIO):
        """Write the settings to `stream` as `key = value` lines."""
        for key, value in self.items():
            stream.write(f"{key} = {value}\n")

    def dumps(self) -> str:
        """Return the settings as a string of `key = value` lines."""
        stream = io.StringIO()
        self.dump(stream)
        return stream.getvalue()

    def location(self, key: str) -> str:
        """
        Return a reference to where `key` was read from.

        Examples:

            >>> Settings({"a": "1"}).location("a")
            ''

            >>> Settings.loads("a = 1", name="train.cfg").location("a")
            'train.cfg line 1'
        """
        return self.origins.get(key, "")

    def _where(self, linenum: int) -> str:
        if self.source:
            return f"{self.source} line {linenum}"
        return f"line {linenum}"


@contextlib.contextmanager
def transaction(path: str, mode: str = "wb") -> t.Iterator[t.IO]:
    """
    Open a temporary sibling of `path` for writing and move it over `path`
    only when the `with` block completes without an exception. On failure
    the temporary file is removed and `path` is left untouched.

    Examples:

        >>> import os, tempfile
        >>> folder = tempfile.mkdtemp()
        >>> target = os.path.join(folder, "out.txt")
        >>> with transaction(target, "w") as fh:
        ...     _ = fh.write("done")
        >>> open(target).read()
        'done'

        >>> try:
        ...     with transaction(target, "w") as fh:
        ...         _ = fh.write("partial")
        ...         raise ValueError("interrupted")
        ... except ValueError:
        ...     pass
        >>> open(target).read()
        'done'
        >>> sorted(os.listdir(folder))
        ['out.txt']
    """
    folder = os.path.dirname(os.path.abspath(path))
    handle = tempfile.NamedTemporaryFile(
        mode=mode,
        dir=folder,
        prefix=f".{os.path.basename(path)}.",
        suffix=TRANSACTION_SUFFIX,
        delete=False,
    )
    try:
        with handle:
            yield handle
        os.replace(handle.name, path)
    except BaseException:
        try:
            os.remove(handle.name)
        except FileNotFoundError:
            pass
        raise
