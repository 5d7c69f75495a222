"""Line-oriented text formats for problem descriptions and certificates.

Problem file::

    # comment
    [variables]
    x1, x2
    [f]                 one polynomial per state
    [G]                 one row per state, entries separated by ';'
    [allowable]         one polynomial w_i per line
    [operating_region]  a single polynomial r
    [centers]           one line per w_i:  c1, c2, ... ; value
    [l] [equilibrium] [eps_s1]      optional
    [degrees] [algorithm] [initial] optional key = value sections

Certificate file: a header, then ``poly`` and ``gram`` records terminated by
``end``. Floats are written with ``repr`` so that reading back is exact.
"""

from __future__ import annotations

import hashlib
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from . import __version__
from .certs import CertificateSet, DegreeSpec, InitController, ProblemSpec
from .poly import Monomial, Polynomial, PolySyntaxError, parse

FORMAT_VERSION = 1

_SECTIONS = {
    "variables",
    "f",
    "G",
    "allowable",
    "operating_region",
    "centers",
    "l",
    "equilibrium",
    "eps_s1",
    "degrees",
    "algorithm",
    "initial",
}
_REQUIRED = ("variables", "f", "G", "operating_region")
_ALGORITHM_KEYS = {"max_outer": int, "threshold": float, "seed": int, "eps_floor": float, "cap_factor": float}
_DEGREE_KEYS = {"V", "B", "s1", "s2", "s3", "s4", "p", "pm1"}


class ParseError(ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


def text_hash(text: str) -> str:
    data = text.replace("\r\n", "\n").encode("utf-8")
    return "sha256:" + hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# problem files


def _sections(text: str) -> Dict[str, List[Tuple[int, str]]]:
    out: Dict[str, List[Tuple[int, str]]] = {}
    current: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError("unterminated section header", lineno, len(raw))
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ParseError(f"unknown section [{name}]", lineno, raw.index("[") + 2)
            if name in out:
                raise ParseError(f"duplicate section [{name}]", lineno)
            out[name] = []
            current = name
            continue
        if current is None:
            raise ParseError("content before the first section header", lineno)
        out[current].append((lineno, raw))
    for name in _REQUIRED:
        if name not in out:
            raise ParseError(f"missing required section [{name}]", max(1, len(text.splitlines())))
    return out


def _poly(text: str, varnames: Sequence[str], lineno: int, raw: str) -> Polynomial:
    try:
        return parse(text, varnames)
    except PolySyntaxError as exc:
        offset = raw.find(text.strip()) if text.strip() else 0
        raise ParseError(str(exc), lineno, max(offset, 0) + exc.pos + 1) from None


def _numbers(text: str, lineno: int) -> List[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ParseError(f"expected numbers, got {text.strip()!r}", lineno) from None


def _keyvalues(lines: List[Tuple[int, str]], allowed, section: str) -> Dict[str, Tuple[int, str, str]]:
    out = {}
    for lineno, raw in lines:
        line = raw.split("#", 1)[0]
        if "=" not in line:
            raise ParseError(f"expected key = value in [{section}]", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise ParseError(f"unknown key {key!r} in [{section}]", lineno, raw.find(key) + 1)
        out[key] = (lineno, value, raw)
    return out


def parse_problem(text: str) -> ProblemSpec:
    sec = _sections(text)
    var_lines = sec["variables"]
    varnames = [v for _, raw in var_lines for v in raw.split("#", 1)[0].replace(",", " ").split()]
    if not varnames:
        raise ParseError("no variables declared", var_lines[0][0] if var_lines else 1)
    n = len(varnames)

    def polys(name):
        return [_poly(raw.split("#", 1)[0], varnames, ln, raw) for ln, raw in sec.get(name, [])]

    f = polys("f")
    if len(f) != n:
        raise ParseError(f"[f] needs {n} polynomials, found {len(f)}", sec["f"][-1][0] if sec["f"] else 1)
    G = []
    for ln, raw in sec["G"]:
        G.append([_poly(part, varnames, ln, raw) for part in raw.split("#", 1)[0].split(";")])
    if len(G) != n or len({len(row) for row in G}) != 1:
        raise ParseError(f"[G] needs {n} rows of equal length", sec["G"][-1][0] if sec["G"] else 1)
    w = polys("allowable")
    r_list = polys("operating_region")
    if len(r_list) != 1:
        raise ParseError("[operating_region] needs exactly one polynomial", sec["operating_region"][0][0] if r_list else 1)

    centers = []
    for ln, raw in sec.get("centers", []):
        body = raw.split("#", 1)[0]
        if ";" not in body:
            raise ParseError("center line must read 'c1, c2, ... ; value'", ln)
        pt, val = body.split(";", 1)
        coords = _numbers(pt, ln)
        vals = _numbers(val, ln)
        if len(coords) != n or len(vals) != 1:
            raise ParseError(f"center needs {n} coordinates and one value", ln)
        centers.append((np.array(coords), vals[0]))
    if len(centers) != len(w):
        ln = sec["centers"][-1][0] if sec.get("centers") else 1
        raise ParseError(f"{len(w)} allowable polynomials but {len(centers)} centers", ln)

    kwargs = {}
    if "l" in sec:
        ls = polys("l")
        if len(ls) != 1:
            raise ParseError("[l] needs exactly one polynomial", sec["l"][0][0] if sec["l"] else 1)
        kwargs["l"] = ls[0]
    if "equilibrium" in sec:
        ln, raw = sec["equilibrium"][0]
        xs = _numbers(raw.split("#", 1)[0], ln)
        if len(xs) != n:
            raise ParseError(f"equilibrium needs {n} coordinates", ln)
        kwargs["xstar"] = np.array(xs)
    if "eps_s1" in sec:
        ln, raw = sec["eps_s1"][0]
        vals = _numbers(raw.split("#", 1)[0], ln)
        if len(vals) != 1 or vals[0] <= 0:
            raise ParseError("eps_s1 must be one positive number", ln)
        kwargs["eps_s1"] = vals[0]
    if "degrees" in sec:
        degs = {}
        for key, (ln, value, raw) in _keyvalues(sec["degrees"], _DEGREE_KEYS, "degrees").items():
            try:
                degs[key] = DegreeSpec.parse(value)
            except ValueError as exc:
                raise ParseError(str(exc), ln) from None
        kwargs["degrees"] = degs
    if "algorithm" in sec:
        for key, (ln, value, raw) in _keyvalues(sec["algorithm"], _ALGORITHM_KEYS, "algorithm").items():
            try:
                kwargs[key] = _ALGORITHM_KEYS[key](value)
            except ValueError:
                raise ParseError(f"bad value for {key}: {value!r}", ln) from None
    if "initial" in sec:
        kwargs["init"] = _parse_initial(sec["initial"], varnames, len(G[0]), len(w))

    spec = ProblemSpec(varnames=varnames, f=f, G=G, w=w, r=r_list[0], centers=centers, **kwargs)
    return spec


def _parse_initial(lines, varnames, m: int, t: int) -> InitController:
    allowed = {"rho", "pm1", "s1", "p"}
    init = InitController()
    for key, (ln, value, raw) in _keyvalues(lines, allowed, "initial").items():
        if key == "rho":
            init.rho = _numbers(value, ln)[0]
        elif key == "s1":
            init.s1 = _poly(value, varnames, ln, raw)
        elif key == "p":
            parts = value.split(";")
            if len(parts) != m:
                raise ParseError(f"initial p needs {m} entries separated by ';'", ln)
            init.p = [_poly(part, varnames, ln, raw) for part in parts]
        elif key == "pm1":
            parts = value.split(";")
            if len(parts) == 1:
                try:
                    init.pm1_const = float(parts[0])
                    continue
                except ValueError:
                    pass
            if len(parts) != t:
                raise ParseError(f"initial pm1 needs one constant or {t} entries", ln)
            init.pm1 = [_poly(part, varnames, ln, raw) for part in parts]
    return init


def load_problem(path: str) -> Tuple[ProblemSpec, str]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_problem(text), text_hash(text)


# ---------------------------------------------------------------------------
# certificates


def _write_poly(out: List[str], name: str, p: Polynomial) -> None:
    out.append(f"poly {name}")
    for mono in p.monomials():
        out.append("  " + " ".join(str(e) for e in mono) + " " + repr(float(p.terms[mono])))
    out.append("end")


def format_certificate(cert: CertificateSet, problem_hash: str, nvars: int) -> str:
    out = [
        f"clfcbf-certificate {FORMAT_VERSION}",
        f"tool {__version__}",
        f"problem {problem_hash}",
        f"nvars {nvars}",
        f"iteration {cert.iteration}",
        f"cost {'none' if cert.cost is None else repr(float(cert.cost))}",
        "eps " + " ".join(repr(float(e)) for e in cert.eps),
    ]
    _write_poly(out, "V", cert.V)
    for i, b in enumerate(cert.B):
        _write_poly(out, f"B{i + 1}", b)
    _write_poly(out, "s1", cert.s1)
    _write_poly(out, "s2", cert.s2)
    for i, s in enumerate(cert.s3):
        _write_poly(out, f"s3_{i + 1}", s)
    for i, s in enumerate(cert.s4):
        _write_poly(out, f"s4_{i + 1}", s)
    for j, q in enumerate(cert.p):
        _write_poly(out, f"p{j + 1}", q)
    for i, q in enumerate(cert.pm1):
        _write_poly(out, f"pm1_{i + 1}", q)
    for label in sorted(cert.grams):
        basis, Q = cert.grams[label]
        out.append(f"gram {label} {len(basis)}")
        for mono in basis:
            out.append("  z " + " ".join(str(e) for e in mono))
        for row in np.asarray(Q):
            out.append("  q " + " ".join(repr(float(v)) for v in row))
        out.append("end")
    return "\n".join(out) + "\n"


def write_certificate(path: str, cert: CertificateSet, problem_hash: str, nvars: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_certificate(cert, problem_hash, nvars))


def parse_certificate(text: str) -> Tuple[CertificateSet, str]:
    """Return the certificate and the problem hash it is bound to."""
    lines = text.splitlines()
    header: Dict[str, str] = {}
    polys: Dict[str, Polynomial] = {}
    grams: Dict[str, Tuple[List[Monomial], np.ndarray]] = {}
    i = 0
    nvars = None
    while i < len(lines):
        ln = i + 1
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        key, _, rest = line.partition(" ")
        if key == "poly":
            terms = {}
            while i < len(lines) and lines[i].strip() != "end":
                parts = lines[i].split()
                try:
                    terms[tuple(int(e) for e in parts[:-1])] = float(parts[-1])
                except (ValueError, IndexError):
                    raise ParseError("bad polynomial term", i + 1) from None
                i += 1
            if i >= len(lines):
                raise ParseError(f"unterminated poly {rest}", ln)
            i += 1
            if nvars is None:
                raise ParseError("nvars must precede polynomial records", ln)
            polys[rest] = Polynomial(nvars, terms)
        elif key == "gram":
            label, _, size = rest.rpartition(" ")
            basis, rows = [], []
            while i < len(lines) and lines[i].strip() != "end":
                parts = lines[i].split()
                try:
                    if parts[0] == "z":
                        basis.append(tuple(int(e) for e in parts[1:]))
                    elif parts[0] == "q":
                        rows.append([float(v) for v in parts[1:]])
                    else:
                        raise ValueError
                except (ValueError, IndexError):
                    raise ParseError("bad gram record", i + 1) from None
                i += 1
            if i >= len(lines):
                raise ParseError(f"unterminated gram {label}", ln)
            i += 1
            Q = np.array(rows, dtype=float).reshape(len(basis), len(basis)) if basis else np.zeros((0, 0))
            if len(basis) != int(size):
                raise ParseError(f"gram {label} declares size {size} but lists {len(basis)} monomials", ln)
            grams[label] = (basis, Q)
        else:
            header[key] = rest
            if key == "nvars":
                nvars = int(rest)
    if header.get("clfcbf-certificate") != str(FORMAT_VERSION):
        raise ParseError("not a version-1 certificate file", 1)

    def group(prefix):
        out = []
        k = 1
        while f"{prefix}{k}" in polys:
            out.append(polys[f"{prefix}{k}"])
            k += 1
        return out

    cost = header.get("cost", "none")
    cert = CertificateSet(
        V=polys["V"],
        B=group("B"),
        s1=polys["s1"],
        s2=polys["s2"],
        s3=group("s3_"),
        s4=group("s4_"),
        p=group("p"),
        pm1=group("pm1_"),
        grams=grams,
        iteration=int(header.get("iteration", "0")),
        cost=None if cost == "none" else float(cost),
        eps=[float(v) for v in header.get("eps", "").split()],
    )
    return cert, header.get("problem", "")


def read_certificate(path: str) -> Tuple[CertificateSet, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_certificate(fh.read())
