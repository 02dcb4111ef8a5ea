"""Signal temporal logic: textual DSL, offline robustness, online monitors.

Formulas are evaluated over uniformly sampled traces (step dt) with discrete
semantics on the sample grid: no interpolation between samples. Robustness
follows the usual quantitative rules (atom s > c gives s - c, G is a windowed
minimum, F a maximum, U the sup/inf form). Windows are intersected with the
trace horizon; a window left empty by that intersection yields +inf under G
and -inf under F/U. A robustness of exactly zero counts as satisfied.

Grammar:
    formula  := 'G' interval formula | 'F' interval formula
              | formula 'U' interval formula | '!' formula
              | formula '&&' formula | formula '||' formula
              | formula '->' formula | '(' formula ')' | atom
    atom     := name op number         op := '<' | '<=' | '>' | '>='
    interval := '[' number ',' (number | 'inf') ']'
Precedence: unary > U > && > || > '->', binary operators left-associative.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

INF = math.inf


class StlError(ValueError):
    """Base class for formula and evaluation errors."""


class StlSyntaxError(StlError):
    def __init__(self, message: str, position: int):
        super().__init__(f"syntax error at position {position}: {message}")
        self.position = position


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Atom:
    signal: str
    op: str
    const: float

    def __post_init__(self) -> None:
        if self.op not in ("<", "<=", ">", ">="):
            raise StlError(f"unknown comparator {self.op!r}")

    def to_dsl(self) -> str:
        return f"{self.signal} {self.op} {_fmt(self.const)}"


@dataclass(frozen=True)
class Not:
    child: "Formula"

    def to_dsl(self) -> str:
        return f"!({self.child.to_dsl()})"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"

    def to_dsl(self) -> str:
        return f"({self.left.to_dsl()}) && ({self.right.to_dsl()})"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"

    def to_dsl(self) -> str:
        return f"({self.left.to_dsl()}) || ({self.right.to_dsl()})"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"

    def to_dsl(self) -> str:
        return f"({self.left.to_dsl()}) -> ({self.right.to_dsl()})"


def _check_interval(lo: float, hi: float) -> None:
    if lo < 0.0 or hi < lo:
        raise StlError(f"invalid interval [{lo}, {hi}]")


@dataclass(frozen=True)
class Globally:
    lo: float
    hi: float
    child: "Formula"

    def __post_init__(self) -> None:
        _check_interval(self.lo, self.hi)

    def to_dsl(self) -> str:
        return f"G[{_fmt(self.lo)},{_fmt(self.hi)}] ({self.child.to_dsl()})"


@dataclass(frozen=True)
class Eventually:
    lo: float
    hi: float
    child: "Formula"

    def __post_init__(self) -> None:
        _check_interval(self.lo, self.hi)

    def to_dsl(self) -> str:
        return f"F[{_fmt(self.lo)},{_fmt(self.hi)}] ({self.child.to_dsl()})"


@dataclass(frozen=True)
class Until:
    lo: float
    hi: float
    left: "Formula"
    right: "Formula"

    def __post_init__(self) -> None:
        _check_interval(self.lo, self.hi)

    def to_dsl(self) -> str:
        return f"({self.left.to_dsl()}) U[{_fmt(self.lo)},{_fmt(self.hi)}] ({self.right.to_dsl()})"


Formula = Atom | Not | And | Or | Implies | Globally | Eventually | Until


def _fmt(x: float) -> str:
    return "inf" if x == INF else format(x, "g")


def signal_names(f: Formula) -> set[str]:
    if isinstance(f, Atom):
        return {f.signal}
    if isinstance(f, Not):
        return signal_names(f.child)
    if isinstance(f, (And, Or, Implies)):
        return signal_names(f.left) | signal_names(f.right)
    if isinstance(f, (Globally, Eventually)):
        return signal_names(f.child)
    return signal_names(f.left) | signal_names(f.right)


def is_temporal_free(f: Formula) -> bool:
    if isinstance(f, Atom):
        return True
    if isinstance(f, Not):
        return is_temporal_free(f.child)
    if isinstance(f, (And, Or, Implies)):
        return is_temporal_free(f.left) and is_temporal_free(f.right)
    return False


# ---------------------------------------------------------------------------
# Parser

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<op2>&&|\|\||->|<=|>=)
      | (?P<num>-?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
      | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
      | (?P<op1>[!<>()\[\],])
    )""",
    re.VERBOSE,
)


def _tokenize(text: str) -> Iterator[tuple[str, str, int]]:
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            raise StlSyntaxError(f"unexpected character {stripped[0]!r}", pos)
        pos = match.end()
        for kind in ("op2", "num", "name", "op1"):
            value = match.group(kind)
            if value is not None:
                yield (kind, value, match.start(kind))
                break
    yield ("end", "", len(text))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = list(_tokenize(text))
        self.index = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.index]

    def advance(self) -> tuple[str, str, int]:
        tok = self.tokens[self.index]
        self.index += 1
        return tok

    def expect(self, value: str) -> None:
        kind, got, pos = self.advance()
        if got != value:
            where = "end" if kind == "end" else repr(got)
            raise StlSyntaxError(f"expected {value!r}, found {where}", pos)

    def parse(self) -> Formula:
        formula = self.parse_implies()
        kind, value, pos = self.peek()
        if kind != "end":
            raise StlSyntaxError(f"unexpected trailing input {value!r}", pos)
        return formula

    def parse_implies(self) -> Formula:
        left = self.parse_or()
        while self.peek()[1] == "->":
            self.advance()
            left = Implies(left, self.parse_or())
        return left

    def parse_or(self) -> Formula:
        left = self.parse_and()
        while self.peek()[1] == "||":
            self.advance()
            left = Or(left, self.parse_and())
        return left

    def parse_and(self) -> Formula:
        left = self.parse_until()
        while self.peek()[1] == "&&":
            self.advance()
            left = And(left, self.parse_until())
        return left

    def parse_until(self) -> Formula:
        left = self.parse_unary()
        while self.peek()[1] == "U":
            self.advance()
            lo, hi = self.parse_interval()
            left = Until(lo, hi, left, self.parse_unary())
        return left

    def parse_unary(self) -> Formula:
        kind, value, pos = self.peek()
        if value == "!":
            self.advance()
            return Not(self.parse_unary())
        if value in ("G", "F"):
            self.advance()
            lo, hi = self.parse_interval()
            child = self.parse_unary()
            return Globally(lo, hi, child) if value == "G" else Eventually(lo, hi, child)
        if value == "(":
            self.advance()
            inner = self.parse_implies()
            self.expect(")")
            return inner
        if kind == "name":
            return self.parse_atom()
        where = "end of input" if kind == "end" else repr(value)
        raise StlSyntaxError(f"expected a formula, found {where}", pos)

    def parse_atom(self) -> Formula:
        _, name, _ = self.advance()
        kind, op, pos = self.advance()
        if op not in ("<", "<=", ">", ">="):
            where = "end" if kind == "end" else repr(op)
            raise StlSyntaxError(f"expected a comparator after {name!r}, found {where}", pos)
        kind, num, pos = self.advance()
        if kind != "num":
            where = "end" if kind == "end" else repr(num)
            raise StlSyntaxError(f"expected a number, found {where}", pos)
        return Atom(name, op, float(num))

    def parse_interval(self) -> tuple[float, float]:
        self.expect("[")
        lo = self._interval_bound(allow_inf=False)
        self.expect(",")
        hi = self._interval_bound(allow_inf=True)
        self.expect("]")
        if lo < 0.0 or hi < lo:
            raise StlSyntaxError(f"invalid interval [{_fmt(lo)},{_fmt(hi)}]", self.peek()[2])
        return lo, hi

    def _interval_bound(self, allow_inf: bool) -> float:
        kind, value, pos = self.advance()
        if kind == "name" and value == "inf" and allow_inf:
            return INF
        if kind != "num":
            where = "end" if kind == "end" else repr(value)
            raise StlSyntaxError(f"expected an interval bound, found {where}", pos)
        return float(value)


def parse_stl(text: str) -> Formula:
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Offline robustness


def _signal(signals: Mapping[str, Sequence[float]], name: str) -> np.ndarray:
    try:
        return np.asarray(signals[name], dtype=float)
    except KeyError:
        raise StlError(f"unknown signal {name!r}") from None


def _window_indices(lo: float, hi: float, dt: float) -> tuple[int, int | None]:
    ia = int(math.ceil(lo / dt - 1e-9))
    ib = None if hi == INF else int(math.floor(hi / dt + 1e-9))
    return ia, ib


def _sliding_min(values: np.ndarray, ia: int, ib: int | None, empty: float) -> np.ndarray:
    """out[k] = min(values[k+ia : k+ib+1] intersected with the horizon).

    ib None means an unbounded window. Windows with no samples yield `empty`.
    """
    n = len(values)
    out = np.full(n, empty)
    if ib is None:
        suffix = np.minimum.accumulate(values[::-1])[::-1]
        if ia < n:
            out[: n - ia] = suffix[ia:]
        return out
    # Monotonic deque over the shifted bounded window.
    dq: deque[int] = deque()
    for k in range(n - 1, -1, -1):
        j_new = k + ia
        if j_new < n:
            while dq and values[dq[-1]] >= values[j_new]:
                dq.pop()
            dq.append(j_new)
        while dq and dq[0] > k + ib:
            dq.popleft()
        if dq:
            out[k] = values[dq[0]]
    return out


def robustness_series(f: Formula, signals: Mapping[str, Sequence[float]], dt: float) -> np.ndarray:
    """Robustness of f at every sample time of the trace."""
    if dt <= 0.0:
        raise StlError("dt must be positive")
    n = _trace_length(signals)
    return _series(f, signals, n, dt)


def _trace_length(signals: Mapping[str, Sequence[float]]) -> int:
    lengths = {len(v) for v in signals.values()}
    if not lengths:
        raise StlError("trace has no signals")
    if len(lengths) != 1:
        raise StlError(f"signals have inconsistent lengths {sorted(lengths)}")
    n = lengths.pop()
    if n == 0:
        raise StlError("trace has no samples")
    return n


def _series(f: Formula, signals: Mapping[str, Sequence[float]], n: int, dt: float) -> np.ndarray:
    if isinstance(f, Atom):
        s = _signal(signals, f.signal)
        return s - f.const if f.op in (">", ">=") else f.const - s
    if isinstance(f, Not):
        return -_series(f.child, signals, n, dt)
    if isinstance(f, And):
        return np.minimum(_series(f.left, signals, n, dt), _series(f.right, signals, n, dt))
    if isinstance(f, Or):
        return np.maximum(_series(f.left, signals, n, dt), _series(f.right, signals, n, dt))
    if isinstance(f, Implies):
        return np.maximum(-_series(f.left, signals, n, dt), _series(f.right, signals, n, dt))
    if isinstance(f, Globally):
        ia, ib = _window_indices(f.lo, f.hi, dt)
        return _sliding_min(_series(f.child, signals, n, dt), ia, ib, INF)
    if isinstance(f, Eventually):
        ia, ib = _window_indices(f.lo, f.hi, dt)
        return -_sliding_min(-_series(f.child, signals, n, dt), ia, ib, INF)
    if isinstance(f, Until):
        return _until_series(f, signals, n, dt)
    raise StlError(f"unknown node {f!r}")


def _until_series(f: Until, signals: Mapping[str, Sequence[float]], n: int, dt: float) -> np.ndarray:
    phi = _series(f.left, signals, n, dt)
    psi = _series(f.right, signals, n, dt)
    ia, ib = _window_indices(f.lo, f.hi, dt)
    if ia == 0 and ib is None:
        out = np.empty(n)
        acc = -INF
        for k in range(n - 1, -1, -1):
            acc = max(psi[k], min(phi[k], acc))
            out[k] = acc
        return out
    out = np.full(n, -INF)
    for k in range(n):
        t_lo = k + ia
        t_hi = n - 1 if ib is None else min(k + ib, n - 1)
        if t_lo > t_hi:
            continue
        # prefix[j] = min(phi[k : k+j]); prefix[0] = +inf (empty).
        window = phi[k:t_hi]
        prefix = np.concatenate(([INF], np.minimum.accumulate(window))) if len(window) else np.array([INF])
        best = -INF
        for tau in range(t_lo, t_hi + 1):
            best = max(best, min(psi[tau], prefix[tau - k]))
        out[k] = best
    return out


def robustness_offline(
    f: Formula, signals: Mapping[str, Sequence[float]], dt: float, t: float = 0.0
) -> float:
    """Robustness of f evaluated at trace time t."""
    n = _trace_length(signals)
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-6 or not 0 <= k < n:
        raise StlError(f"time {t} is not a sample instant of the trace")
    return float(robustness_series(f, signals, dt)[k])


# ---------------------------------------------------------------------------
# Online monitoring

SATISFIED = "satisfied"
VIOLATED = "violated"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class RobustnessValue:
    """Monitor output: verdict plus the robustness interval it is based on.

    value is the exact robustness once the verdict is final (or the deciding
    bound while the trace is still running); interval is [lo, hi] over all
    possible completions of the prefix seen so far.
    """

    verdict: str
    value: float | None
    interval: tuple[float, float]


def _verdict_from_interval(lo: float, hi: float) -> RobustnessValue:
    if hi < 0.0:
        return RobustnessValue(VIOLATED, hi, (lo, hi))
    if lo >= 0.0:
        return RobustnessValue(SATISFIED, lo, (lo, hi))
    return RobustnessValue(INCONCLUSIVE, None, (lo, hi))


class OnlineMonitor:
    """Base class: samples arrive in order at fixed dt; verdicts only harden.

    update() returns the verdict over all completions of the prefix;
    finalize() treats the prefix as the complete trace.
    """

    def __init__(self, formula: Formula, dt: float):
        if dt <= 0.0:
            raise StlError("dt must be positive")
        self.formula = formula
        self.dt = dt
        self.names = sorted(signal_names(formula))
        self.n = 0
        self.first_violation_t: float | None = None
        self._last = RobustnessValue(INCONCLUSIVE, None, (-INF, INF))

    def update(self, sample: Mapping[str, float], t: float | None = None) -> RobustnessValue:
        if t is not None:
            expected = self.n * self.dt
            if abs(t - expected) > 1e-6:
                raise StlError(f"out-of-order sample: got t={t}, expected t={expected}")
        row = {}
        for name in self.names:
            if name not in sample:
                raise StlError(f"unknown signal {name!r}")
            row[name] = float(sample[name])
        self._ingest(row)
        self.n += 1
        result = self._evaluate()
        self._note(result)
        return result

    def finalize(self) -> RobustnessValue:
        result = self._finalize()
        self._note(result)
        return result

    def _note(self, result: RobustnessValue) -> None:
        if result.verdict == VIOLATED and self.first_violation_t is None:
            self.first_violation_t = (self.n - 1) * self.dt
        self._last = result

    def _ingest(self, row: Mapping[str, float]) -> None:
        raise NotImplementedError

    def _evaluate(self) -> RobustnessValue:
        raise NotImplementedError

    def _finalize(self) -> RobustnessValue:
        raise NotImplementedError


class GenericOnlineMonitor(OnlineMonitor):
    """Reference monitor: re-evaluates the robustness interval on each update.

    Exact for every formula the parser accepts; cost grows with the prefix, so
    it suits conformance testing and short traces rather than long episodes.
    """

    def __init__(self, formula: Formula, dt: float):
        super().__init__(formula, dt)
        self._columns: dict[str, list[float]] = {name: [] for name in self.names}

    def _ingest(self, row: Mapping[str, float]) -> None:
        for name in self.names:
            self._columns[name].append(row[name])

    def _arrays(self) -> dict[str, np.ndarray]:
        return {name: np.asarray(col) for name, col in self._columns.items()}

    def _evaluate(self) -> RobustnessValue:
        lo, hi = _interval_eval(self.formula, self._arrays(), self.n, self.dt)
        return _verdict_from_interval(lo[0], hi[0])

    def _finalize(self) -> RobustnessValue:
        value = robustness_offline(self.formula, self._arrays(), self.dt)
        verdict = SATISFIED if value >= 0.0 else VIOLATED
        return RobustnessValue(verdict, value, (value, value))


def _interval_eval(
    f: Formula, signals: Mapping[str, np.ndarray], n: int, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample [lo, hi] robustness bounds over all completions of the prefix."""
    if isinstance(f, Atom):
        exact = _series(f, signals, n, dt)
        return exact, exact.copy()
    if isinstance(f, Not):
        lo, hi = _interval_eval(f.child, signals, n, dt)
        return -hi, -lo
    if isinstance(f, (And, Or, Implies)):
        llo, lhi = _interval_eval(f.left, signals, n, dt)
        rlo, rhi = _interval_eval(f.right, signals, n, dt)
        if isinstance(f, And):
            return np.minimum(llo, rlo), np.minimum(lhi, rhi)
        if isinstance(f, Or):
            return np.maximum(llo, rlo), np.maximum(lhi, rhi)
        return np.maximum(-lhi, rlo), np.maximum(-llo, rhi)
    if isinstance(f, Globally):
        clo, chi = _interval_eval(f.child, signals, n, dt)
        ia, ib = _window_indices(f.lo, f.hi, dt)
        hi = _sliding_min(chi, ia, ib, INF)
        lo = _sliding_min(clo, ia, ib, INF)
        # Windows reaching past the prefix may still see arbitrarily bad samples.
        open_end = np.arange(n) + (ib if ib is not None else INF) > n - 1
        lo[open_end] = -INF
        return lo, hi
    if isinstance(f, Eventually):
        inner = Globally(f.lo, f.hi, Not(f.child))
        lo, hi = _interval_eval(inner, signals, n, dt)
        return -hi, -lo
    if isinstance(f, Until):
        return _interval_until(f, signals, n, dt)
    raise StlError(f"unknown node {f!r}")


def _interval_until(
    f: Until, signals: Mapping[str, np.ndarray], n: int, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    phi_lo, phi_hi = _interval_eval(f.left, signals, n, dt)
    psi_lo, psi_hi = _interval_eval(f.right, signals, n, dt)
    ia, ib = _window_indices(f.lo, f.hi, dt)
    lo = np.full(n, -INF)
    hi = np.full(n, -INF)
    for k in range(n):
        t_lo = k + ia
        t_hi = n - 1 if ib is None else min(k + ib, n - 1)
        if t_lo <= t_hi:
            window = slice(t_lo, t_hi + 1)
            count = t_hi - t_lo + 1
            pref_lo = np.concatenate(([INF], np.minimum.accumulate(phi_lo[k:t_hi])))
            pref_hi = np.concatenate(([INF], np.minimum.accumulate(phi_hi[k:t_hi])))
            idx = np.arange(t_lo - k, t_hi - k + 1)
            lo[k] = np.max(np.minimum(psi_lo[window], pref_lo[idx])) if count else -INF
            hi[k] = np.max(np.minimum(psi_hi[window], pref_hi[idx])) if count else -INF
        if ib is None or k + ib > n - 1:
            # A future tau can still realize min(psi, prefix-min of phi).
            hi[k] = max(hi[k], float(np.min(phi_hi[k:])))
    return lo, hi


class _GloballyLocalMonitor(OnlineMonitor):
    """Incremental monitor for G[a,inf] chi with a temporal-free chi."""

    def __init__(self, formula: Globally, dt: float):
        super().__init__(formula, dt)
        self.ia = _window_indices(formula.lo, formula.hi, dt)[0]
        self.child = formula.child
        self.running_min = INF

    def _ingest(self, row: Mapping[str, float]) -> None:
        if self.n >= self.ia:
            value = _eval_local(self.child, row)
            if value < self.running_min:
                self.running_min = value

    def _evaluate(self) -> RobustnessValue:
        return _verdict_from_interval(-INF, self.running_min)

    def _finalize(self) -> RobustnessValue:
        value = self.running_min
        verdict = SATISFIED if value >= 0.0 else VIOLATED
        return RobustnessValue(verdict, value, (value, value))


class _ResponseMonitor(OnlineMonitor):
    """Incremental monitor for G[a,inf] (phi || F[0,w] psi), phi/psi temporal-free.

    Each sample k >= a opens an obligation that is discharged once its psi
    window [k, k+w] is fully seen (or the trace ends and truncates it).
    """

    def __init__(self, formula: Globally, dt: float, phi: Formula, psi_f: Eventually):
        super().__init__(formula, dt)
        self.ia = _window_indices(formula.lo, formula.hi, dt)[0]
        self.iw = _window_indices(psi_f.lo, psi_f.hi, dt)[1]
        self.phi = phi
        self.psi = psi_f.child
        self.pending: list[tuple[int, float]] = []  # (k, phi_k), k ascending
        self.psi_buffer: list[float] = []  # psi values for samples >= pending[0][0]
        self.buffer_start = 0
        self.running_min = INF

    def _ingest(self, row: Mapping[str, float]) -> None:
        k = self.n
        psi_val = _eval_local(self.psi, row)
        if not self.pending:
            self.buffer_start = k
            self.psi_buffer = []
        self.psi_buffer.append(psi_val)
        if k >= self.ia:
            self.pending.append((k, _eval_local(self.phi, row)))
        self._discharge(last_index=k)

    def _discharge(self, last_index: int) -> None:
        while self.pending and self.pending[0][0] + self.iw <= last_index:
            k, phi_k = self.pending.pop(0)
            start = k - self.buffer_start
            window = self.psi_buffer[start : start + self.iw + 1]
            self._fold(max(phi_k, max(window)))
        if self.pending:
            drop = self.pending[0][0] - self.buffer_start
            if drop > 0:
                del self.psi_buffer[:drop]
                self.buffer_start = self.pending[0][0]

    def _fold(self, value: float) -> None:
        if value < self.running_min:
            self.running_min = value

    def _evaluate(self) -> RobustnessValue:
        return _verdict_from_interval(-INF, self.running_min)

    def _finalize(self) -> RobustnessValue:
        for k, phi_k in self.pending:
            start = k - self.buffer_start
            window = self.psi_buffer[start : start + self.iw + 1]
            best = max(window) if window else -INF
            self._fold(max(phi_k, best))
        self.pending = []
        value = self.running_min
        verdict = SATISFIED if value >= 0.0 else VIOLATED
        return RobustnessValue(verdict, value, (value, value))


def _eval_local(f: Formula, row: Mapping[str, float]) -> float:
    if isinstance(f, Atom):
        s = row[f.signal]
        return s - f.const if f.op in (">", ">=") else f.const - s
    if isinstance(f, Not):
        return -_eval_local(f.child, row)
    if isinstance(f, And):
        return min(_eval_local(f.left, row), _eval_local(f.right, row))
    if isinstance(f, Or):
        return max(_eval_local(f.left, row), _eval_local(f.right, row))
    if isinstance(f, Implies):
        return max(-_eval_local(f.left, row), _eval_local(f.right, row))
    raise StlError(f"formula {f!r} is not sample-local")


def make_online_monitor(f: Formula, dt: float) -> OnlineMonitor:
    """Monitor factory: picks an incremental implementation when the formula
    shape allows, falling back to the generic re-evaluating monitor."""
    if isinstance(f, Globally) and f.hi == INF:
        if is_temporal_free(f.child):
            return _GloballyLocalMonitor(f, dt)
        child = f.child
        if isinstance(child, Or):
            for phi, psi in ((child.left, child.right), (child.right, child.left)):
                if (
                    isinstance(psi, Eventually)
                    and psi.lo == 0.0
                    and psi.hi != INF
                    and is_temporal_free(psi.child)
                    and is_temporal_free(phi)
                ):
                    return _ResponseMonitor(f, dt, phi, psi)
    return GenericOnlineMonitor(f, dt)


def first_violation_time(
    f: Formula, signals: Mapping[str, Sequence[float]], dt: float
) -> float | None:
    """Earliest sample time at which every completion of the prefix violates f.

    None if the completed trace satisfies the formula. A violation that only
    becomes certain when the trace ends reports the final sample time.
    """
    n = _trace_length(signals)
    monitor = make_online_monitor(f, dt)
    if isinstance(monitor, (_GloballyLocalMonitor, _ResponseMonitor)):
        for k in range(n):
            row = {name: float(signals[name][k]) for name in monitor.names}
            if monitor.update(row).verdict == VIOLATED:
                return monitor.first_violation_t
        final = monitor.finalize()
        return (n - 1) * dt if final.verdict == VIOLATED else None
    if robustness_offline(f, signals, dt) >= 0.0:
        return None
    # The violated-bound hi[0] is non-increasing in the prefix length, so the
    # first violating prefix can be found by bisection.
    arrays = {name: np.asarray(col, dtype=float) for name, col in signals.items()}
    lo_n, hi_n = 1, n

    def violated_at(m: int) -> bool:
        prefix = {name: col[:m] for name, col in arrays.items()}
        _, hi = _interval_eval(f, prefix, m, dt)
        return bool(hi[0] < 0.0)

    if not violated_at(n):
        return (n - 1) * dt
    while lo_n < hi_n:
        mid = (lo_n + hi_n) // 2
        if violated_at(mid):
            hi_n = mid
        else:
            lo_n = mid + 1
    return (lo_n - 1) * dt


# ---------------------------------------------------------------------------
# Requirement library


@dataclass(frozen=True)
class Requirement:
    name: str
    text: str
    formula: Formula


# Trace signals the library formulas refer to (see world.Trace for sources):
#   min_ped_dist   signed distance ego footprint <-> nearest pedestrian disc
#   ego_v          signed longitudinal speed
#   loc_error      localization error magnitude
#   cross_track    distance to the reference path
#   aeb_due        1.0 while the emergency-brake trigger condition holds
#   cmd_a          commanded acceleration
#   cycle_time     measured sense-plan-act duration
#   uc01_margin    detection-quality margin (e_detect minus worst match error)
#   path_clearance_margin   planned-path clearance minus required clearance
EPSILON_V = 1e-6


def requirement_library(params, epsilon_v: float = EPSILON_V) -> dict[str, Requirement]:
    """The shipped formalization of the safety goal and use-case requirements."""
    texts = {
        "SAFETY-GOAL": (
            f"G[0,inf] (min_ped_dist > 0.0 || (ego_v <= {epsilon_v:g} && ego_v >= {-epsilon_v:g}))"
        ),
        "UC-AVP-01": "G[0,inf] (uc01_margin >= 0.0)",
        "UC-AVP-02": f"G[0,inf] (loc_error <= {params.e_local:g})",
        "UC-AVP-03": "G[0,inf] (path_clearance_margin >= 0.0)",
        "UC-AVP-04": f"G[2,inf] (cross_track <= {params.e_track:g})",
        "UC-AVP-05": f"G[0,inf] ((aeb_due <= 0.5) || F[0,{params.t_cycle:g}] (cmd_a <= -7.0))",
        "UC-AVP-06": f"G[0,inf] (cycle_time <= {params.t_cycle:g})",
    }
    return {name: Requirement(name, text, parse_stl(text)) for name, text in texts.items()}


def load_requirements(path) -> list[Requirement]:
    """Requirement file: one `NAME: <dsl>` per line; # starts a comment line."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            name, sep, dsl = stripped.partition(":")
            if not sep or not name.strip() or not dsl.strip():
                raise StlError(f"{path}:{lineno}: expected 'NAME: <formula>'")
            try:
                formula = parse_stl(dsl.strip())
            except StlSyntaxError as exc:
                raise StlError(f"{path}:{lineno}: {exc}") from exc
            out.append(Requirement(name.strip(), dsl.strip(), formula))
    return out


def store_requirements(requirements: Sequence[Requirement], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for req in requirements:
            fh.write(f"{req.name}: {req.text}\n")
