"""
Approximate memory footprints, used to profile stopping sets.
"""
from collections import deque
from itertools import chain
from sys import getsizeof

import numpy as np

CONTAINERS = {
    tuple: iter,
    list: iter,
    deque: iter,
    set: iter,
    frozenset: iter,
    dict: lambda d: chain.from_iterable(d.items()),
}


def _own_size(o) -> int:
    if isinstance(o, np.ndarray):
        # a view's getsizeof covers only its header
        return getsizeof(o) + (o.nbytes if o.base is not None else 0)
    return getsizeof(o, getsizeof(0))


def total_size(o, handlers: dict = None) -> int:
    """
    Bytes held by o and everything reachable through the builtin containers.

    Objects shared between containers are counted once. Extra handlers map a
    type to a function yielding its contents and take precedence.
    """
    all_handlers = dict(handlers or {})
    for typ, contents in CONTAINERS.items():
        all_handlers.setdefault(typ, contents)
    seen = set()
    pending = [o]
    total = 0
    while pending:
        item = pending.pop()
        if id(item) in seen:
            continue
        seen.add(id(item))
        total += _own_size(item)
        for typ, contents in all_handlers.items():
            if isinstance(item, typ):
                pending.extend(contents(item))
                break
    return total


def breakdown(obj, fields: list) -> dict:
    """total_size of each named attribute of obj, plus their sum under 'total'."""
    res = {name: total_size(getattr(obj, name)) for name in fields}
    res['total'] = sum(res.values())
    return res
