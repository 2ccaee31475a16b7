""" Utility functions. """

import inspect
import typing as t


class register_decorator:
    """
    Decorator class that collects decorated methods into a dict.

    Subclass `register_decorator` once per kind of registry; the registry of
    a class is then every attribute, along its whole MRO, that is an
    instance of that subclass. Subclasses override earlier definitions with
    the same key.

    Examples:

        >>> class check(register_decorator):
        ...     pass

        >>> class Section:
        ...     @check
        ...     def positive(self):
        ...         return "positive"
        ...     def helper(self):
        ...         return "helper"

        >>> sorted(check.get_registered(Section))
        ['positive']

        >>> class Derived(Section):
        ...     @check(key="even")
        ...     def is_even(self):
        ...         return "even"

        >>> sorted(check.get_registered(Derived))
        ['even', 'positive']

        >>> Derived().is_even()
        'even'
    """

    def __init__(self, decorated: t.Callable = None, key: t.Any = None):
        self.decorated = decorated
        self.key = key

    def __call__(self, *args, **kwargs):
        """
        Call the decorated function. Without one, this is the decorating call
        of a parametrized decorator, so return a new decorator instance
        wrapping the function and carrying our `key`.
        """
        if self.decorated:
            return self.decorated(*args, **kwargs)
        return self.__class__(*args, key=self.key)

    def __get__(self, instance: t.Any, owner: t.Type) -> t.Callable:
        """Bind the decorated function like a plain method would be bound."""
        if instance is None:
            return self
        return self.decorated.__get__(instance, owner)

    @classmethod
    def get_registered(cls, parent_cls: t.Type) -> t.Dict[t.Any, t.Callable]:
        """
        Return a dict of all functions on `parent_cls` and its base classes
        that were decorated by this class, keyed by the decorator `key` or
        else the attribute name.
        """
        return {
            (value.key or key): value.decorated
            for owner_cls in reversed(inspect.getmro(parent_cls))
            for key, value in vars(owner_cls).items()
            if isinstance(value, cls)
        }
