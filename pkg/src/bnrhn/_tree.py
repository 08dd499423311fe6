"""Walk nested parameter dataclasses as flat ``{path: ndarray}`` mappings.

Array fields whose dataclass metadata has ``buffer=True`` are running
statistics, not trainable parameters; ``trainable`` skips them.
"""

import dataclasses

import numpy as np


def _walk(obj, prefix, include_buffers):
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                continue
            if f.metadata.get("buffer") and not include_buffers:
                continue
            if f.metadata.get("static"):
                continue
            yield from _walk(value, f"{prefix}.{f.name}" if prefix else f.name, include_buffers)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from _walk(value, f"{prefix}.{i}" if prefix else str(i), include_buffers)


def trainable(obj):
    """Ordered mapping of path -> trainable array (shared references)."""
    return dict(_walk(obj, "", include_buffers=False))


def all_arrays(obj):
    """Ordered mapping of path -> array including running-statistic buffers."""
    return dict(_walk(obj, "", include_buffers=True))


def buffer_names(obj):
    every = all_arrays(obj)
    train = trainable(obj)
    return [k for k in every if k not in train]


def replace(obj, mapping, prefix=""):
    """Return a copy of ``obj`` with arrays at the given paths substituted."""
    if isinstance(obj, np.ndarray):
        return mapping.get(prefix, obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        changes = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None or f.metadata.get("static"):
                continue
            path = f"{prefix}.{f.name}" if prefix else f.name
            new = replace(value, mapping, path)
            if new is not value:
                changes[f.name] = new
        return dataclasses.replace(obj, **changes) if changes else obj
    if isinstance(obj, (list, tuple)):
        items = [replace(v, mapping, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(obj)]
        if all(a is b for a, b in zip(items, obj)):
            return obj
        return type(obj)(items)
    return obj
