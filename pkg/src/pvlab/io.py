"""Configuration files, field persistence, JSON reports and run manifests.

Configuration grammar (TOML)::

    [grid]            dim, nx, nt, T, domain = [[lo, hi], ...]
    [problem]         diffusion, y0, yQ, ua, ub   expression string, number
                                                  or {file = "path"}
                      nonlinearity = "sine_plus_identity" | "zero"
                                     | {kind = "linear", alpha = 1.0}
    [optimize]        method, max_iter, gap_tol, multistart, seed,
                      line_search_tol, armijo_c
    [verify]          experiments = ["E1", ...], seed, refine
    [verify.E3]       sample_count, perturbation_scales

Expressions use the variables ``t, x, y``, the functions ``sin, cos, exp,
abs`` and the constant ``pi``.  ``t`` is not available for ``diffusion``
and ``y0``.  An omitted ``[problem]`` gives the default instance.
"""

from __future__ import annotations

import ast
import csv
import hashlib
import json
import math
import operator
import re
import struct
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import partial
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .core import (Field, Grid, InvalidArgument, Nonlinearity, ProblemSpec, PvlabError,
                   SpatialField, build_default)
from .optim import OptimizeOptions
from .verify import VERIFY_OPTIONS, ExperimentConfig, ExperimentReport, resolve_id


class ConfigError(PvlabError, ValueError):
    """Malformed or invalid configuration; ``line`` when it can be located."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class FormatError(PvlabError, ValueError):
    """Corrupt, truncated or mismatched field file."""


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}
_CONSTS = {"pi": math.pi}
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}


def evaluate_expression(text: str, variables: dict):
    """Evaluate an arithmetic expression over numpy arrays.

    Only numbers, the names in ``variables``, ``pi``, the four arithmetic
    operators, ``**`` and calls of ``sin, cos, exp, abs`` are accepted.
    """
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise InvalidArgument(f"cannot parse expression {text!r}: {exc.msg}") from None

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in variables:
                return variables[node.id]
            if node.id in _CONSTS:
                return _CONSTS[node.id]
            raise InvalidArgument(f"unknown name {node.id!r} in {text!r}")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](ev(node.operand))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords:
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise InvalidArgument(f"unsupported construct {type(node).__name__} in {text!r}")

    return ev(tree)


def _space_vars(grid: Grid) -> dict:
    names = ("x", "y")[:grid.dim]
    return dict(zip(names, grid.coords))


def expression_spatial(grid: Grid, text: str) -> SpatialField:
    vals = evaluate_expression(text, _space_vars(grid))
    return SpatialField(grid, np.broadcast_to(np.asarray(vals, dtype=float),
                                              (grid.n_nodes,)).copy())


def expression_field(grid: Grid, text: str) -> Field:
    vars_ = {k: v[None, :] for k, v in _space_vars(grid).items()}
    vars_["t"] = grid.times[:, None]
    vals = evaluate_expression(text, vars_)
    return Field(grid, np.broadcast_to(np.asarray(vals, dtype=float),
                                       (grid.nt + 1, grid.n_nodes)).copy())


# --------------------------------------------------------------------------
# Field files
# --------------------------------------------------------------------------

MAGIC = b"PVLF"
_HEADER = struct.Struct("<4sIII")


def _shape(f: Field | SpatialField) -> tuple[int, int]:
    g = f.grid
    return (0, g.n_nodes) if isinstance(f, SpatialField) else (g.nt, g.n_nodes)


def save_field(f: Field | SpatialField, path, format: str | None = None) -> Path:
    """Write ``f`` as binary (``.pvlf``) or CSV with 17 significant digits.

    The format defaults from the suffix: ``.csv`` is CSV, anything else binary.
    """
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "binary")
    g = f.grid
    nt, _ = _shape(f)
    rows = np.atleast_2d(np.asarray(f.values, dtype="<f8"))
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, g.dim, g.nx, nt))
            fh.write(rows.tobytes(order="C"))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(f"# PVLF dim={g.dim} nx={g.nx} nt={nt}\n")
            w = csv.writer(fh)
            w.writerow(["row"] + [f"node{i}" for i in range(g.n_nodes)])
            for i, r in enumerate(rows):
                w.writerow([i] + [repr(float(v)) for v in r])
    else:
        raise InvalidArgument(f"unknown field format {fmt!r}")
    return path


def _grid_for(dim: int, nx: int, nt: int, grid: Grid | None) -> Grid:
    if grid is None:
        return Grid(dim=dim, nx=nx, nt=max(nt, 1))
    if (grid.dim, grid.nx) != (dim, nx) or (nt and grid.nt != nt):
        raise FormatError(f"file holds dim={dim}, nx={nx}, nt={nt}; expected dim={grid.dim}, "
                          f"nx={grid.nx}, nt={grid.nt}")
    return grid


def _build(dim, nx, nt, values, grid):
    g = _grid_for(dim, nx, nt, grid)
    if nt == 0:
        return SpatialField(g, values[0])
    return Field(g, values)


def load_field(path, grid: Grid | None = None) -> Field | SpatialField:
    """Read a field written by :func:`save_field`.

    ``nt = 0`` in the header marks a :class:`SpatialField`.  When ``grid``
    is given the stored sizes must match it and the field is attached to
    it; otherwise a unit-box grid of the stored sizes is used.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        data = path.read_bytes()
        if len(data) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        _, dim, nx, nt = _HEADER.unpack_from(data)
        if dim not in (1, 2) or nx < 1:
            raise FormatError(f"{path}: invalid header dim={dim}, nx={nx}")
        n = nx**dim
        rows = 1 if nt == 0 else nt + 1
        expected = _HEADER.size + 8 * rows * n
        if len(data) != expected:
            kind = "truncated" if len(data) < expected else "trailing bytes in"
            raise FormatError(f"{path}: {kind} data, expected {expected} bytes, "
                              f"found {len(data)}")
        vals = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, n)
        return _build(dim, nx, nt, vals.astype(float), grid)
    try:
        return _load_csv(path, grid)
    except UnicodeDecodeError:
        raise FormatError(f"{path}: neither a binary PVLF file nor CSV text") from None


def _load_csv(path: Path, grid: Grid | None):
    with open(path, newline="") as fh:
        first = fh.readline()
        m = re.match(r"#\s*PVLF\s+dim=(\d+)\s+nx=(\d+)\s+nt=(\d+)\s*$", first)
        if not m:
            raise FormatError(f"{path}: missing PVLF header line")
        dim, nx, nt = (int(v) for v in m.groups())
        reader = csv.reader(fh)
        header = next(reader, None)
        n = nx**dim
        if header is None or len(header) != n + 1:
            raise FormatError(f"{path}: header row does not list {n} nodes")
        rows = []
        for lineno, r in enumerate(reader, start=3):
            if len(r) != n + 1:
                raise FormatError(f"{path}: line {lineno} has {len(r)} columns, expected {n + 1}")
            try:
                rows.append([float(v) for v in r[1:]])
            except ValueError:
                raise FormatError(f"{path}: line {lineno} is not numeric") from None
    expected = 1 if nt == 0 else nt + 1
    if len(rows) != expected:
        raise FormatError(f"{path}: expected {expected} rows, found {len(rows)}")
    return _build(dim, nx, nt, np.array(rows, dtype=float), grid)


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

_SECTIONS = {
    "grid": {"dim", "nx", "nt", "T", "domain"},
    "problem": {"diffusion", "nonlinearity", "y0", "yQ", "ua", "ub"},
    "optimize": {"method", "max_iter", "gap_tol", "multistart", "seed", "line_search_tol",
                 "armijo_c"},
    "verify": {"experiments", "seed", "refine"},
}
_EXPERIMENT_KEYS = {"sample_count", "perturbation_scales"}
_DEFAULT_EXPRS = {"diffusion": "0.1", "y0": "sin(pi*x)",
                  "yQ": "(1 - t)*sin(pi*x) + 0.5*sin(3*pi*x)", "ua": "-1", "ub": "1"}


def _line_of(text: str, key: str, section: str | None = None) -> int | None:
    """First line assigning ``key`` (inside ``section`` when given)."""
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        hm = re.match(r"\[\s*([^\]]+?)\s*\]", s)
        if hm:
            current = hm.group(1)
            if key == current and section is None:
                return i
            continue
        if (section is None or current == section) and re.match(rf"{re.escape(key)}\s*=", s):
            return i
    return None


@dataclass(frozen=True, eq=False)
class Config:
    """Parsed configuration with its source text and canonical hash."""

    spec: ProblemSpec
    optimize: OptimizeOptions
    experiments: list
    raw: dict
    path: Path | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _nonlinearity(value, text) -> Nonlinearity:
    if isinstance(value, str):
        value = {"kind": value}
    if not isinstance(value, dict):
        raise ConfigError("nonlinearity must be a name or a table", _line_of(text, "nonlinearity"))
    extra = set(value) - {"kind", "alpha"}
    if extra:
        raise ConfigError(f"unknown nonlinearity keys {sorted(extra)}",
                          _line_of(text, "nonlinearity"))
    kind = value.get("kind")
    try:
        if kind == "zero":
            return Nonlinearity.zero()
        if kind == "linear":
            return Nonlinearity.linear(float(value.get("alpha", 1.0)))
        if kind == "sine_plus_identity":
            return Nonlinearity.sine_plus_identity()
    except InvalidArgument as exc:
        raise ConfigError(f"nonlinearity: {exc}", _line_of(text, "nonlinearity")) from None
    raise ConfigError(f"nonlinearity kind must be zero, linear or sine_plus_identity, "
                      f"got {kind!r}", _line_of(text, "nonlinearity"))


def _entry_kind(value):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return "expr", repr(float(value))
    if isinstance(value, str):
        return "expr", value
    if isinstance(value, dict) and set(value) == {"file"}:
        return "file", value["file"]
    raise InvalidArgument("must be an expression, a number or {file = ...}")


def build_from_expressions(grid: Grid, nonlinearity: Nonlinearity, exprs: dict) -> ProblemSpec:
    """Problem whose data are closed-form expressions; refinable."""
    return ProblemSpec(
        grid=grid, diffusion=expression_spatial(grid, exprs["diffusion"]),
        nonlinearity=nonlinearity, y0=expression_spatial(grid, exprs["y0"]),
        yQ=expression_field(grid, exprs["yQ"]), ua=expression_field(grid, exprs["ua"]),
        ub=expression_field(grid, exprs["ub"]),
        builder=partial(build_from_expressions, nonlinearity=nonlinearity, exprs=dict(exprs)))


def _problem(grid: Grid, sec: dict, text: str, base: Path) -> ProblemSpec:
    nl = _nonlinearity(sec.get("nonlinearity", "sine_plus_identity"), text)
    if not any(k in sec for k in _DEFAULT_EXPRS):
        return build_default(grid, nl)
    entries = {}
    for name, default in _DEFAULT_EXPRS.items():
        try:
            entries[name] = _entry_kind(sec.get(name, default))
        except InvalidArgument as exc:
            raise ConfigError(f"problem.{name} {exc}", _line_of(text, name, "problem")) from None
    values = {}
    try:
        for name, (kind, val) in entries.items():
            line = _line_of(text, name, "problem")
            try:
                if kind == "file":
                    f = load_field(base / val, grid)
                    want = SpatialField if name in ("diffusion", "y0") else Field
                    if not isinstance(f, want):
                        raise ConfigError(f"problem.{name}: {val} holds the wrong field type", line)
                    values[name] = f
                elif name in ("diffusion", "y0"):
                    values[name] = expression_spatial(grid, val)
                else:
                    values[name] = expression_field(grid, val)
            except (InvalidArgument, FormatError, FileNotFoundError) as exc:
                raise ConfigError(f"problem.{name}: {exc}", line) from None
        builder = None
        if all(kind == "expr" for kind, _ in entries.values()):
            builder = partial(build_from_expressions, nonlinearity=nl,
                              exprs={k: v for k, (_, v) in entries.items()})
        return ProblemSpec(grid, values["diffusion"], nl, values["y0"], values["yQ"],
                           values["ua"], values["ub"], builder=builder)
    except InvalidArgument as exc:
        msg = str(exc)
        field_name = "ua" if "ua" in msg else "diffusion" if "diffusion" in msg else None
        line = _line_of(text, field_name, "problem") if field_name else None
        raise ConfigError(f"problem: {msg}", line) from None


def parse_config_text(text: str, base: Path | None = None, path: Path | None = None) -> Config:
    """Parse configuration text; see the module docstring for the grammar."""
    base = base or Path(".")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", int(m.group(1)) if m else None) from None
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown section or key {key!r}", _line_of(text, key))
    for name, allowed in _SECTIONS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{name} must be a table", _line_of(text, name))
        extra = set(sec) - allowed
        if name == "verify":
            extra = {k for k in extra if not isinstance(sec[k], dict)}
        if extra:
            key = sorted(extra)[0]
            raise ConfigError(f"unknown key {name}.{key}", _line_of(text, key, name))

    g = raw.get("grid", {})
    try:
        dom = g.get("domain", [[0.0, 1.0]] * int(g.get("dim", 1)))
        grid = Grid(dim=int(g.get("dim", 1)), nx=g.get("nx", 49), nt=g.get("nt", 100),
                    domain=tuple(tuple(d) for d in dom), T=g.get("T", 1.0))
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise ConfigError(f"grid: {exc}", _line_of(text, "grid")) from None

    spec = _problem(grid, raw.get("problem", {}), text, base)

    o = dict(raw.get("optimize", {}))
    try:
        optimize = OptimizeOptions(**o) if o else OptimizeOptions()
    except (InvalidArgument, TypeError) as exc:
        raise ConfigError(f"optimize: {exc}", _line_of(text, "optimize")) from None

    v = raw.get("verify", {})
    experiments = []
    seed = int(v.get("seed", 0))
    names = v.get("experiments", [])
    overrides = {k: val for k, val in v.items() if isinstance(val, dict)}
    for k, val in overrides.items():
        extra = set(val) - _EXPERIMENT_KEYS
        if extra:
            raise ConfigError(f"unknown key verify.{k}.{sorted(extra)[0]}",
                              _line_of(text, sorted(extra)[0], f"verify.{k}"))
    try:
        for k in overrides:
            resolve_id(k)
        for name in names:
            eid = resolve_id(name)
            ov = overrides.get(name, overrides.get(eid.split("_")[0], {}))
            scales = ov.get("perturbation_scales")
            experiments.append(ExperimentConfig(
                eid, spec, sample_count=ov.get("sample_count"),
                perturbation_scales=tuple(scales) if scales is not None else None,
                seed=seed, optimize=VERIFY_OPTIONS.with_(seed=seed),
                refine=bool(v.get("refine", True))))
    except InvalidArgument as exc:
        raise ConfigError(f"verify: {exc}", _line_of(text, "verify")) from None
    return Config(spec, optimize, experiments, raw, path)


def parse_config(path) -> tuple[ProblemSpec, OptimizeOptions, list]:
    """Parse a configuration file into problem, optimizer options and experiments."""
    cfg = load_config(path)
    return cfg.spec, cfg.optimize, cfg.experiments


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text, base=path.parent, path=path)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + "}"
    raise TypeError(f"cannot write {type(v).__name__} to a config file")


def save_spec(spec: ProblemSpec, directory, name: str = "problem") -> Path:
    """Write ``spec`` as a config file plus binary data files.

    Parsing the written config restores bit-identical fields.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = spec.grid
    if g.tau0 != 0.0:
        raise InvalidArgument("only problems starting at t = 0 can be saved")
    lines = ["[grid]", f"dim = {g.dim}", f"nx = {g.nx}", f"nt = {g.nt}", f"T = {g.T!r}",
             f"domain = {_toml_value([list(s) for s in g.domain])}", "", "[problem]",
             f"nonlinearity = {_toml_value(spec.nonlinearity.to_dict())}"]
    for field_name in ("diffusion", "y0", "yQ", "ua", "ub"):
        fname = f"{name}_{field_name}.pvlf"
        save_field(getattr(spec, field_name), d / fname)
        lines.append(f"{field_name} = {{file = {json.dumps(fname)}}}")
    path = d / f"{name}.toml"
    path.write_text("\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------------
# Reports and manifests
# --------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, non-finite numbers as null."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(dumps(obj))
    return path


def save_report(rep: ExperimentReport, directory) -> tuple[Path, Path]:
    """Write ``<id>.json`` and the table as ``<id>.csv``."""
    d = Path(directory)
    if not np.all(np.isfinite(np.asarray(rep.table, dtype=float))):
        raise InvalidArgument(f"{rep.experiment_id}: table has non-finite entries")
    jp = write_json(rep.to_dict(), d / f"{rep.experiment_id}.json")
    cp = d / f"{rep.experiment_id}.csv"
    with open(cp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(rep.columns)
        for row in rep.table:
            w.writerow([repr(float(v)) for v in row])
    return jp, cp


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Provenance of one run; the only place timestamps are recorded."""

    config_hash: str
    seed: int
    command: str
    tool_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    artifacts: list = field(default_factory=list)

    def add(self, path) -> Path:
        p = Path(path)
        name = p.name
        if name not in self.artifacts:
            self.artifacts.append(name)
        return p

    def write(self, directory) -> Path:
        d = Path(directory)
        missing = [a for a in self.artifacts if not (d / a).exists()]
        if missing:
            raise InvalidArgument(f"manifest lists missing files {missing}")
        self.finished = _now()
        return write_json({"config_hash": self.config_hash, "seed": self.seed,
                           "command": self.command, "tool_version": self.tool_version,
                           "started": self.started, "finished": self.finished,
                           "artifacts": sorted(self.artifacts)}, d / "manifest.json")
