"""Plain ``key = value`` configuration files.

Grammar, one entry per line::

    # comment
    key = value        # trailing comments are allowed

Blank lines are ignored. Keys are unique. Values are parsed according to
the field they configure; every problem is collected with its line number
before a single :class:`ConfigError` is raised.
"""

from dataclasses import fields
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, UnknownScenario
from .sim.scenarios import SCENARIOS, ScenarioConfig, scenario

NONE_WORDS = ("none", "null", "")
TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


def parse_lines(text):
    """Split ``text`` into ``{key: (line_no, raw_value)}`` plus ``[(line, field, message)]``."""
    entries = {}
    issues = []
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            issues.append((no, None, f"expected 'key = value', got {body!r}"))
            continue
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            issues.append((no, None, "missing key"))
        elif key in entries:
            issues.append((no, key, f"duplicate key (first set on line {entries[key][0]})"))
        else:
            entries[key] = (no, value)
    return entries, issues


def format_issues(issues, source="<config>"):
    out = []
    for line, name, msg in issues:
        where = f"{source}:{line}" if line else source
        out.append(f"{where}: {name}: {msg}" if name else f"{where}: {msg}")
    return "\n".join(out)


def _raise(issues, source):
    raise ConfigError(format_issues(issues, source), issues)


def parse_bool(raw):
    v = raw.lower()
    if v in TRUE_WORDS:
        return True
    if v in FALSE_WORDS:
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def parse_int(raw):
    try:
        return int(raw)
    except ValueError:
        try:
            f = float(raw)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
        if not f.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}") from None
        return int(f)


def parse_vector(raw):
    """Comma or whitespace separated numbers."""
    parts = raw.replace(",", " ").split()
    if not parts:
        raise ValueError("expected at least one number")
    return np.array([float(p) for p in parts])


def parse_matrix(raw):
    """Rows separated by ``;``, entries by commas or whitespace."""
    rows = [parse_vector(r) for r in raw.split(";") if r.strip()]
    if not rows:
        raise ValueError("expected at least one row")
    if len({r.size for r in rows}) != 1:
        raise ValueError("rows differ in length")
    return np.vstack(rows)


def parse_closures(raw):
    """Directed edges as ``u-v`` pairs separated by commas."""
    out = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        u, sep, v = item.partition("-")
        if not sep:
            raise ValueError(f"closure {item!r} is not of the form u-v")
        out.append((int(u), int(v)))
    return tuple(out)


def format_closures(closures):
    return ", ".join(f"{u}-{v}" for u, v in closures)


def _scenario_field_parser(name, ftype):
    if name == "closures":
        return parse_closures
    if name == "channel_success":
        return lambda raw: None if raw.lower() in NONE_WORDS else float(raw)
    if ftype in (bool, "bool"):
        return parse_bool
    if ftype in (int, "int"):
        return parse_int
    if ftype in (float, "float"):
        return float
    return str


SCENARIO_FIELDS = {f.name: _scenario_field_parser(f.name, f.type) for f in fields(ScenarioConfig)}


def format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return format_closures(v)
    return str(v)


def format_config(cfg):
    """Serialize a ScenarioConfig; ``load_config`` of the result gives it back."""
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in fields(ScenarioConfig))


def load_config(text, source="<config>", scenario_name=None, scale="desk", seed=None):
    """Parse and fully validate a scenario config.

    The preset is ``scenario_name`` if given, else the file's ``name`` key,
    else S1. File entries override the preset and ``seed`` (when not None)
    overrides the file. Raises ConfigError listing every problem.
    """
    entries, issues = parse_lines(text)
    values = {}
    for key, (no, raw) in entries.items():
        parse = SCENARIO_FIELDS.get(key)
        if parse is None:
            issues.append((no, key, "unknown key"))
            continue
        try:
            values[key] = parse(raw)
        except ValueError as exc:
            issues.append((no, key, str(exc)))

    name = scenario_name or values.get("name", "S1")
    if name not in SCENARIOS:
        line = entries["name"][0] if "name" in entries and not scenario_name else None
        msg = f"unknown scenario {name!r}; valid options: {', '.join(SCENARIOS)}"
        raise UnknownScenario(format_issues(issues + [(line, "name", msg)], source), issues + [(line, "name", msg)])
    if seed is not None:
        values["seed"] = int(seed)
    values["name"] = name
    seed_v = values.get("seed", 0)
    if not 0 <= seed_v < 2**64:
        issues.append((entries.get("seed", (None,))[0], "seed", "must lie in [0, 2**64)"))
        values.pop("seed")

    # Range checks run on whatever parsed, so one pass reports everything.
    cfg = scenario(name, scale).replace(**values)
    issues += [(entries.get(f, (None,))[0], f, m) for f, m in cfg.validate()]
    if issues:
        _raise(sorted(issues, key=lambda i: (i[0] or 0)), source)
    return cfg


def validate_config(path, scenario_name=None, scale="desk", seed=None):
    """Read ``path`` and return the validated ScenarioConfig."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return load_config(text, str(path), scenario_name, scale, seed)


def _typed(entries, spec, source):
    """Parse entries against ``spec = {key: parser}``; unknown keys are errors."""
    values = {}
    issues = []
    for key, (no, raw) in entries.items():
        parse = spec.get(key)
        if parse is None:
            issues.append((no, key, "unknown key"))
            continue
        try:
            values[key] = parse(raw)
        except ValueError as exc:
            issues.append((no, key, str(exc)))
    return values, issues


def _weights(raw):
    out = {}
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        k, sep, v = item.partition(":")
        if not sep:
            raise ValueError(f"weight {item!r} is not of the form name:value")
        out[k.strip()] = float(v)
    return out


def _ints(raw):
    return tuple(int(p) for p in raw.replace(",", " ").split())


OPTIMIZE_KEYS = {
    "caps": parse_vector,
    "forbidden": _ints,
    "weights": _weights,
    "eta": float,
    "rho": float,
    "beta": float,
    "T0": float,
    "max_iters": parse_int,
    "tol_energy": float,
    "seed": parse_int,
    "project": parse_bool,
}

TRANSPORT_KEYS = {
    "cost": parse_matrix,
    "mu": parse_vector,
    "nu": parse_vector,
    "epsilon": float,
    "method": str,
    "max_iters": parse_int,
    "tol": float,
}


def load_optimize_problem(text, source="<problem>"):
    """Plan-selection problem.

    ``cost.<objective> = c1, c2, ...`` gives one cost vector per objective
    (at least one). Optional: ``weights = L:0.4, R:0.6``, ``caps``,
    ``forbidden`` (plan indices) and optimizer settings ``eta``, ``rho``,
    ``beta``, ``T0``, ``max_iters``, ``tol_energy``, ``seed``, ``project``.
    """
    entries, issues = parse_lines(text)
    costs = {}
    rest = {}
    for key, (no, raw) in entries.items():
        if key.startswith("cost."):
            try:
                costs[key[5:]] = parse_vector(raw)
            except ValueError as exc:
                issues.append((no, key, str(exc)))
        else:
            rest[key] = (no, raw)
    values, more = _typed(rest, OPTIMIZE_KEYS, source)
    issues += more
    if not costs and not any(k.startswith("cost.") for k in entries):
        issues.append((None, "cost", "at least one 'cost.<objective>' line is required"))
    sizes = {c.size for c in costs.values()}
    if len(sizes) > 1:
        issues.append((None, "cost", "cost vectors differ in length"))
    K = sizes.pop() if len(sizes) == 1 else None
    if K is not None:
        if "caps" in values and values["caps"].size != K:
            issues.append((entries["caps"][0], "caps", f"expected {K} entries"))
        for k in values.get("forbidden", ()):
            if not 0 <= k < K:
                issues.append((entries["forbidden"][0], "forbidden", f"plan {k} out of range [0, {K})"))
    if "weights" in values:
        unknown = set(values["weights"]) - set(costs)
        if unknown:
            issues.append((entries["weights"][0], "weights", f"no cost vector for {sorted(unknown)}"))
    if issues:
        _raise(issues, source)
    values["costs"] = costs
    return values


def load_transport_problem(text, source="<problem>"):
    """Transport problem: ``cost`` (rows split by ';'), ``mu``, ``nu`` and optional
    ``epsilon``, ``method`` (sinkhorn or greedy), ``max_iters``, ``tol``."""
    entries, issues = parse_lines(text)
    values, more = _typed(entries, TRANSPORT_KEYS, source)
    issues += more
    for key in ("cost", "mu", "nu"):
        if key not in entries:
            issues.append((None, key, "required"))
    if "method" in values and values["method"] not in ("sinkhorn", "greedy"):
        issues.append((entries["method"][0], "method", "must be sinkhorn or greedy"))
    if "epsilon" in values and not values["epsilon"] > 0:
        issues.append((entries["epsilon"][0], "epsilon", "must be > 0"))
    D = values.get("cost")
    if D is not None:
        for key, n in (("mu", D.shape[0]), ("nu", D.shape[1])):
            if key in values and values[key].size != n:
                issues.append((entries[key][0], key, f"expected {n} entries to match cost"))
    if issues:
        _raise(issues, source)
    return values
