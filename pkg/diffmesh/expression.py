""" Sandboxed evaluation of config values with the simpleeval library. """

import ast
import collections
import math
import typing as t

import simpleeval

from diffmesh.util import register_decorator


class register_function(register_decorator):
    """
    Decorator for registering additional functions to `Expression` objects.
    """

    pass


class Expression(simpleeval.EvalWithCompoundTypes):
    """
    Parsed expression that can be evaluated repeatedly.

    Functions decorated with `register_function` on a subclass become
    callable from within the expression, and the class variable `constants`
    supplies names that are always defined.

    Examples:

        >>> Expression("1 + 1").eval()
        2

        >>> expr = Expression("width * heads")
        >>> expr.eval({"width": 16, "heads": 4})
        64

        >>> class TwiceExpression(Expression):
        ...     @register_function
        ...     def twice(arg):
        ...         return 2 * arg
        >>> TwiceExpression("twice(width)").eval({"width": 3})
        6
    """

    constants: t.Mapping[str, t.Any] = {}

    def __init__(self, expr: str):
        functions = {
            name: function
            for name, function in simpleeval.DEFAULT_FUNCTIONS.items()
            if name not in ("rand", "randint")
        }
        functions.update(register_function.get_registered(self.__class__))
        super().__init__(functions=functions)
        self.expr = expr
        self.tree = ast.parse(expr.strip())

    def eval(self, names: t.Mapping = None) -> t.Any:
        """
        Evaluate the expression with the named values in `names` and return
        the value of its last statement.
        """
        self.names = collections.ChainMap(dict(names or {}), dict(self.constants))
        self._max_count = 0
        value = None
        for node in self.tree.body:
            value = self._eval(node)
        return value


class ValueExpression(Expression):
    """
    An `Expression` for config values. Numbers, strings, tuples and a handful
    of math names and functions are available; nothing else is.

    Examples:

        >>> ValueExpression("1e-4").eval()
        0.0001

        >>> ValueExpression("0.9, 0.999").eval()
        (0.9, 0.999)

        >>> round(ValueExpression("radians(90)").eval(), 6)
        1.570796

        >>> ValueExpression("true").eval()
        True
    """

    constants = {
        "pi": math.pi,
        "e": math.e,
        "true": True,
        "false": False,
        "none": None,
    }

    @register_function
    def radians(value: float) -> float:
        return math.radians(value)

    @register_function
    def degrees(value: float) -> float:
        return math.degrees(value)

    @register_function
    def sqrt(value: float) -> float:
        return math.sqrt(value)


def evaluate_value(raw: str) -> t.Any:
    """
    Evaluate a raw config value. Bare words that are not known names are
    taken as plain strings, so `objective = x0` needs no quoting.

    Examples:

        >>> evaluate_value("64")
        64

        >>> evaluate_value("cosine")
        'cosine'

        >>> evaluate_value("'quoted'")
        'quoted'
    """
    raw = raw.strip()
    if raw.isidentifier() and raw not in ValueExpression.constants:
        return raw
    return ValueExpression(raw).eval()
