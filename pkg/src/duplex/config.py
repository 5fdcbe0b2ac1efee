"""Run configuration: flat ``key = value`` sections, parsed with configparser.

Every problem found while validating is collected and reported together.
Field data (boundary and initial concentrations) are given as
``kind: p1, p2, ...`` with kinds

* ``const: c``
* ``step: left, right, x_split`` (``left`` for ``x1 < x_split``)
* ``gauss: amp, x1, x2, width``
* ``decay: c, rate`` (boundary data only, ``c exp(-rate t)``)
"""
import configparser
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import radius_field_from_config
from .macroflow import SIDES
from .twoscale import TransportConfig

SECTIONS = ("geometry", "cell", "macro", "transport", "reference", "output")


@dataclass
class FieldSpec:
    """A parsed data field; callable with the signature its role needs."""

    kind: str
    params: tuple
    role: str

    def __call__(self, *args):
        k, p = self.kind, self.params
        pts, t = args if self.role == "boundary" else (args[0], 0.0)
        pts = np.asarray(pts, dtype=float)
        shape = pts.shape[:-1]
        if k == "const":
            out = np.full(shape, p[0])
        elif k == "step":
            out = np.where(pts[..., 0] < p[2], p[0], p[1]).astype(float)
        elif k == "gauss":
            d2 = (pts[..., 0] - p[1]) ** 2 + (pts[..., 1] - p[2]) ** 2
            out = p[0] * np.exp(-d2 / p[3] ** 2)
        else:  # decay
            out = np.full(shape, p[0] * math.exp(-p[1] * t))
        if self.role == "micro":
            # v_I(x, y) is constant in y; broadcast over the cell points
            out = np.broadcast_to(out[..., None], np.asarray(args[1]).shape[:-1])
        return out

    def bounds(self):
        """Range of the field (used for the non-negativity and M1 checks)."""
        k, p = self.kind, self.params
        if k == "const":
            return p[0], p[0]
        if k == "step":
            return min(p[0], p[1]), max(p[0], p[1])
        return min(0.0, p[0]), max(0.0, p[0])

    def nonincreasing(self):
        return self.kind != "decay" or self.params[0] * self.params[1] >= 0


_ARITY = {"const": 1, "step": 3, "gauss": 4, "decay": 2}


def parse_field(text, role):
    m = re.fullmatch(r"\s*(\w+)\s*:\s*(.*)", text)
    if not m:
        try:
            return FieldSpec("const", (float(text),), role)
        except ValueError:
            raise ValueError(f"cannot read field {text!r}; expected 'kind: values'") from None
    kind = m.group(1).lower()
    if kind not in _ARITY or (kind == "decay" and role != "boundary"):
        raise ValueError(f"unknown field kind {kind!r} for {role} data")
    params = tuple(float(v) for v in m.group(2).split(","))
    if len(params) != _ARITY[kind]:
        raise ValueError(f"field kind {kind!r} takes {_ARITY[kind]} values, got {len(params)}")
    if kind == "gauss" and params[3] <= 0:
        raise ValueError("gauss width must be positive")
    return FieldSpec(kind, params, role)


@dataclass
class RunConfig:
    radius: object
    family: str
    geometry_params: dict
    check_eps: tuple
    N: int
    r_grid: tuple
    macro_shape: tuple
    extents: tuple
    kappa: float
    flow_bc: dict
    transport: TransportConfig
    ref_eps: tuple
    cells_per_period: int
    ref_r0: float
    ref_T: float
    ref_dt: float
    ref_epochs: tuple
    ref_shape: tuple
    ref_n_radial: int
    out_dir: Path
    path: Path = None
    warnings: list = field(default_factory=list)

    def with_threads(self, n):
        return replace(self, transport=replace(self.transport, threads=int(n)))

    def reference_transport(self):
        """Transport data for the fine-vs-two-scale study (diffusion only)."""
        return replace(self.transport, T=self.ref_T, dt=self.ref_dt, epochs=self.ref_epochs,
                       n_radial=self.ref_n_radial)


class _Reader:
    """Typed access to a configparser section with line-numbered violations."""

    def __init__(self, cp, lines, violations):
        self.cp, self.lines, self.violations = cp, lines, violations

    def where(self, section, key):
        line = self.lines.get((section, key))
        return f"line {line}: " if line else ""

    def get(self, section, key, conv, default=None, required=False):
        if not self.cp.has_option(section, key):
            if required:
                self.violations.append(f"[{section}] missing required key {key!r}")
            return default
        raw = self.cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            self.violations.append(f"{self.where(section, key)}[{section}] {key}: {exc}")
            return default

    def check(self, ok, section, key, message):
        if not ok:
            self.violations.append(f"{self.where(section, key)}[{section}] {key}: {message}")


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").replace("x", " ").split())


def _key_lines(text):
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and s and not s.startswith(("#", ";")) and "=" in s:
            lines[(section, s.split("=", 1)[0].strip().lower())] = no
    return lines


def parse_config(path):
    """Read and validate a run configuration.

    Raises :class:`ParseError` on malformed syntax and :class:`ValidationError`
    carrying every violated range or sign condition.
    """
    path = Path(path)
    text = path.read_text()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(exc.lineno, "key outside any [section]") from None
    except configparser.DuplicateSectionError as exc:
        raise ParseError(exc.lineno, f"duplicate section [{exc.section}]") from None
    except configparser.DuplicateOptionError as exc:
        raise ParseError(exc.lineno, f"duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ParseError(lineno, f"cannot parse {line.strip()!r}") from None
    lines = _key_lines(text)
    violations = []
    for sec in cp.sections():
        if sec not in SECTIONS:
            violations.append(f"unknown section [{sec}]")
    for sec in SECTIONS:
        if not cp.has_section(sec):
            cp.add_section(sec)
    rd = _Reader(cp, lines, violations)
    warnings = []

    # macro block first: its extents are the domain of the radius field
    extents = rd.get("macro", "extents", _floats, (0.0, 1.0, 0.0, 1.0))
    rd.check(len(extents) == 4 and extents[1] > extents[0] and extents[3] > extents[2],
             "macro", "extents", "need x0 < x1 and y0 < y1")
    shape = rd.get("macro", "shape", _ints, (64, 64))
    rd.check(len(shape) == 2 and min(shape) >= 1, "macro", "shape", "need two positive integers")
    kappa = rd.get("macro", "kappa", float, 1.0)
    rd.check(kappa is not None and kappa > 0, "macro", "kappa", "permeability scale must be positive (positivity assumption on the data)")
    flow_bc = {}
    for side in SIDES:
        raw = cp.get("macro", f"flow_{side}", fallback="flux 0")
        parts = raw.replace(":", " ").split()
        try:
            kind, value = parts[0], float(parts[1])
            if kind not in ("flux", "pressure") or len(parts) != 2:
                raise ValueError
            flow_bc[side] = (kind, value)
        except (ValueError, IndexError):
            rd.check(False, "macro", f"flow_{side}", f"expected 'flux <value>' or 'pressure <value>', got {raw!r}")

    # geometry
    family = rd.get("geometry", "family", str.strip, "constant")
    r_max = rd.get("geometry", "r_max", float, 0.49)
    params = {}
    for key in ("r0", "amp", "freq", "g1", "g2"):
        if cp.has_option("geometry", key):
            params[key] = rd.get("geometry", key, float)
    radius = None
    if len(extents) == 4:
        try:
            radius = radius_field_from_config(family, params, tuple(extents), r_max)
        except ValidationError as exc:
            violations.extend(f"[geometry] {v}" for v in exc.violations)
        except TypeError as exc:
            violations.append(f"[geometry] parameters {sorted(params)} do not fit family {family!r}: {exc}")
    check_eps = rd.get("geometry", "check_eps", _floats, (1 / 8, 1 / 16, 1 / 32, 1 / 64))
    rd.check(len(check_eps) >= 2 and all(e > 0 for e in check_eps), "geometry", "check_eps",
             "need at least two positive periods")

    # cell
    N = rd.get("cell", "n", int, 128)
    rd.check(N is not None and N >= 8, "cell", "n", "cell resolution must be at least 8")
    r_grid = rd.get("cell", "r_grid", _floats, tuple(np.round(np.arange(0, 0.46, 0.05), 12)))
    rd.check(len(r_grid) >= 1 and all(0 <= r < 0.5 for r in r_grid), "cell", "r_grid",
             "radii must lie in [0, 1/2)")
    rd.check(all(b > a for a, b in zip(r_grid, r_grid[1:])), "cell", "r_grid", "radii must increase strictly")
    if radius is not None and len(r_grid) and not violations:
        lo, hi = radius.bounds
        if lo < r_grid[0] or hi > r_grid[-1]:
            violations.append(f"[cell] r_grid [{r_grid[0]}, {r_grid[-1]}] does not cover the radius "
                              f"range [{lo:g}, {hi:g}]")

    # transport
    tr = {}
    for key, default in (("d_h", 1.0), ("d_l", 1.0), ("dt", 1e-3), ("t", 1.0), ("coupling_tol", 1e-11)):
        tr[key] = rd.get("transport", key, float, default)
    for key, label in (("d_h", "D_h"), ("d_l", "D_l")):
        rd.check(tr[key] is not None and tr[key] > 0, "transport", key,
                 f"{label} must be positive (positivity assumption on the data)")
    rd.check(tr["dt"] is not None and tr["dt"] > 0, "transport", "dt", "time step must be positive")
    rd.check(tr["t"] is not None and tr["t"] >= 0, "transport", "t", "final time must be non-negative")
    rd.check(tr["coupling_tol"] is not None and tr["coupling_tol"] > 0, "transport", "coupling_tol",
             "must be positive")
    if tr["dt"] and tr["t"] is not None and tr["dt"] > 0:
        n = tr["t"] / tr["dt"]
        rd.check(abs(n - round(n)) <= 1e-9 * max(n, 1), "transport", "t", "must be a whole number of steps")
    n_radial = rd.get("transport", "n_radial", int, 32)
    rd.check(n_radial is not None and n_radial >= 2, "transport", "n_radial", "need at least 2 radial cells")
    max_iter = rd.get("transport", "max_coupling_iter", int, 200)
    rd.check(max_iter is not None and max_iter >= 1, "transport", "max_coupling_iter", "must be positive")
    epochs = rd.get("transport", "epochs", _floats, ())
    rd.check(all(0 < e <= (tr["t"] or 0) + 1e-12 for e in epochs), "transport", "epochs",
             "epochs must lie in (0, T]")
    fields = {}
    for key, role, default in (("u_b", "boundary", "const: 0"), ("u_i", "initial", "const: 0"),
                               ("v_i", "micro", "const: 0")):
        fields[key] = rd.get("transport", key, lambda s, role=role: parse_field(s, role),
                             parse_field(default, role))
        if fields[key] is not None:
            lo, hi = fields[key].bounds()
            rd.check(lo >= 0 and math.isfinite(hi), "transport", key,
                     "data must be non-negative and bounded (positivity assumption on the data)")
    if fields["u_b"] is not None and not fields["u_b"].nonincreasing():
        warnings.append("u_b increases in time; the maximum-principle audit is advisory only")
    boundary = {}
    for side in SIDES:
        kind = cp.get("transport", f"bc_{side}", fallback="dirichlet").strip()
        rd.check(kind in ("dirichlet", "noflux"), "transport", f"bc_{side}",
                 f"expected 'dirichlet' or 'noflux', got {kind!r}")
        boundary[side] = kind
    transport = TransportConfig(D_h=tr["d_h"], D_l=tr["d_l"], kappa=kappa, u_b=fields["u_b"],
                                u_I=fields["u_i"], v_I=fields["v_i"], T=tr["t"], dt=tr["dt"],
                                n_radial=n_radial, boundary=boundary, coupling_tol=tr["coupling_tol"],
                                max_coupling_iter=max_iter, epochs=tuple(epochs))

    # reference
    ref_eps = rd.get("reference", "eps", _floats, (0.25, 0.125, 0.0625))
    rd.check(all(e > 0 and abs(1 / e - round(1 / e)) < 1e-9 for e in ref_eps), "reference", "eps",
             "every eps must be 1/integer")
    cpp = rd.get("reference", "cells_per_period", int, 128)
    rd.check(cpp is not None and cpp >= 16, "reference", "cells_per_period", "need at least 16")
    ref_r0 = rd.get("reference", "r0", float, 0.3)
    rd.check(ref_r0 is not None and 0 <= ref_r0 < 0.5, "reference", "r0", "radius exceeds 1/2")
    ref_T = rd.get("reference", "t", float, 0.1)
    ref_dt = rd.get("reference", "dt", float, 2e-3)
    rd.check(ref_dt is not None and ref_dt > 0, "reference", "dt", "time step must be positive")
    ref_epochs = rd.get("reference", "epochs", _floats, (ref_T,))
    ref_n_radial = rd.get("reference", "n_radial", int, 256)
    rd.check(ref_n_radial is not None and ref_n_radial >= 2, "reference", "n_radial",
             "need at least 2 radial cells")
    ref_shape = rd.get("reference", "shape", _ints, (128, 16))
    rd.check(len(ref_shape) == 2 and all(
        s % round(1 / e) == 0 for s in ref_shape for e in ref_eps if e > 0), "reference", "shape",
        "two-scale grid must refine every period grid")

    out_dir = Path(cp.get("output", "dir", fallback="out"))
    if not out_dir.is_absolute():
        out_dir = path.parent / out_dir

    if violations:
        raise ValidationError(violations)
    return RunConfig(radius, family, params, tuple(check_eps), N, tuple(r_grid), tuple(shape), tuple(extents),
                     kappa, flow_bc, transport, tuple(ref_eps), cpp, ref_r0, ref_T, ref_dt, tuple(ref_epochs),
                     tuple(ref_shape), ref_n_radial, out_dir, path, warnings)
