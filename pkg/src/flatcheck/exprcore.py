"""Hash-consed expression DAG with exact differentiation and batched evaluation.

All expressions live in one append-only node table (``GRAPH``). A node is
identified by its integer id; structurally identical nodes share the same id.
:class:`Expr` is a thin handle around an id with the usual arithmetic
operators, so model and geometry code can be written naturally::

    x, y = symbols("x y")
    e = sin(x) * y
    differentiate(e, x)        # cos(x)*y
    evaluate(e, {"x": 0.3, "y": 2.0})

Simplification is limited to constant folding and the 0/1 identities.
Numeric evaluation is vectorised over a batch of points and memoised over
shared subgraphs by :class:`Evaluator`.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from fractions import Fraction
from numbers import Real

import numpy as np

from .errors import DivisionByZero, FlatcheckError, SingularSolve

CONST, SYM, ADD, MUL, DIV, POW, SIN, COS, TAN, NEG, SOLVE, INDEX = range(12)
OP_NAMES = ("const", "symbol", "sum", "product", "quotient", "power",
            "sin", "cos", "tan", "neg", "solve", "index")

# LAPACK does not flag near-singular systems; anything worse is treated as singular.
SOLVE_COND_LIMIT = 1e13


class Graph:
    """Append-only node table with hash-consing.

    Per node: opcode, child ids, payload and a bitmask of the free symbols
    (bit ``k`` stands for the ``k``-th registered symbol name).
    """

    def __init__(self):
        self.ops: list[int] = []
        self.args: list[tuple] = []
        self.data: list = []
        self.masks: list[int] = []
        self.fvals: list = []          # float value of constants, None otherwise
        self._index: dict = {}
        self._bits: dict[str, int] = {}
        self._names: list[str] = []
        self._dcache: dict = {}
        self._lock = threading.RLock()

    def __len__(self):
        return len(self.ops)

    def _node(self, op, args, data, mask):
        key = (op, args, data)
        nid = self._index.get(key)
        if nid is not None:
            return nid
        with self._lock:
            nid = self._index.get(key)
            if nid is not None:
                return nid
            nid = len(self.ops)
            self.ops.append(op)
            self.args.append(args)
            self.data.append(data)
            self.masks.append(mask)
            self.fvals.append(float(data[1]) if op == CONST else None)
            self._index[key] = nid
            return nid

    def truncate(self, mark: int) -> None:
        """Drop every node with id >= ``mark`` along with cached derivatives."""
        with self._lock:
            if mark >= len(self.ops):
                return
            for lst in (self.ops, self.args, self.data, self.masks, self.fvals):
                del lst[mark:]
            self._index = {k: v for k, v in self._index.items() if v < mark}
            self._dcache = {k: v for k, v in self._dcache.items()
                            if k[0] < mark and k[1] < mark and v < mark}
            for hook in _RELEASE_HOOKS:
                hook(mark)

    def symbol_bit(self, name: str) -> int:
        bit = self._bits.get(name)
        if bit is None:
            with self._lock:
                bit = self._bits.get(name)
                if bit is None:
                    bit = len(self._names)
                    self._names.append(name)
                    self._bits[name] = bit
        return bit

    def symbol_names(self, mask: int) -> list[str]:
        out = []
        k = 0
        while mask:
            if mask & 1:
                out.append(self._names[k])
            mask >>= 1
            k += 1
        return out


_RELEASE_HOOKS: list = []

GRAPH = Graph()
_ops = GRAPH.ops
_args = GRAPH.args
_data = GRAPH.data
_masks = GRAPH.masks


# --------------------------------------------------------------------------
# node builders working on ids

def _normalize_const(value):
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, int):
        return ("q", Fraction(value))
    if isinstance(value, Fraction):
        return ("q", value)
    value = float(value)
    if not math.isfinite(value):
        raise FlatcheckError(f"non-finite constant {value!r}")
    if value == 0.0:
        return ("q", Fraction(0))
    return ("f", value)


def const_id(value) -> int:
    return GRAPH._node(CONST, (), _normalize_const(value), 0)


ZERO = const_id(0)
ONE = const_id(1)
MINUS_ONE = const_id(-1)


def _cval(nid):
    """Payload value of a constant node, or ``None``."""
    if _ops[nid] == CONST:
        return _data[nid][1]
    return None


def sym_id(name: str) -> int:
    bit = GRAPH.symbol_bit(name)
    return GRAPH._node(SYM, (), name, 1 << bit)


def add_id(a: int, b: int) -> int:
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    ca, cb = _cval(a), _cval(b)
    if ca is not None and cb is not None:
        return const_id(ca + cb)
    return GRAPH._node(ADD, (a, b), None, _masks[a] | _masks[b])


def neg_id(a: int) -> int:
    if a == ZERO:
        return a
    ca = _cval(a)
    if ca is not None:
        return const_id(-ca)
    if _ops[a] == NEG:
        return _args[a][0]
    return GRAPH._node(NEG, (a,), None, _masks[a])


def sub_id(a: int, b: int) -> int:
    if b == ZERO:
        return a
    if a == b:
        return ZERO
    return add_id(a, neg_id(b))


def mul_id(a: int, b: int) -> int:
    if a == ZERO or b == ZERO:
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if a == MINUS_ONE:
        return neg_id(b)
    if b == MINUS_ONE:
        return neg_id(a)
    ca, cb = _cval(a), _cval(b)
    if ca is not None and cb is not None:
        return const_id(ca * cb)
    return GRAPH._node(MUL, (a, b), None, _masks[a] | _masks[b])


def div_id(a: int, b: int) -> int:
    cb = _cval(b)
    if cb is not None and cb == 0:
        raise DivisionByZero("division by the constant zero", node=a)
    if a == ZERO or b == ONE:
        return a
    if b == MINUS_ONE:
        return neg_id(a)
    ca = _cval(a)
    if ca is not None and cb is not None:
        if isinstance(ca, Fraction) and isinstance(cb, Fraction):
            return const_id(ca / cb)
        return const_id(float(ca) / float(cb))
    return GRAPH._node(DIV, (a, b), None, _masks[a] | _masks[b])


def pow_id(a: int, k: int) -> int:
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return a
    ca = _cval(a)
    if ca is not None:
        if ca == 0 and k < 0:
            raise DivisionByZero("zero raised to a negative power", node=a)
        return const_id(ca ** k)
    return GRAPH._node(POW, (a,), k, _masks[a])


def _fun_id(op, a, fold):
    ca = _cval(a)
    if ca is not None:
        if ca == 0:
            return ONE if op == COS else ZERO
        return const_id(fold(float(ca)))
    return GRAPH._node(op, (a,), None, _masks[a])


def sin_id(a: int) -> int:
    return _fun_id(SIN, a, math.sin)


def cos_id(a: int) -> int:
    return _fun_id(COS, a, math.cos)


def tan_id(a: int) -> int:
    return _fun_id(TAN, a, math.tan)


def solve_id(matrix, rhs) -> int:
    """Vector node ``matrix^{-1} rhs``; ``matrix`` is a k x k nested list of ids."""
    k = len(rhs)
    if k == 0 or len(matrix) != k or any(len(row) != k for row in matrix):
        raise FlatcheckError("solve node needs a square k x k matrix and a length-k vector")
    flat = tuple(int(e) for row in matrix for e in row) + tuple(int(e) for e in rhs)
    mask = 0
    for c in flat:
        mask |= _masks[c]
    return GRAPH._node(SOLVE, flat, k, mask)


def index_id(s: int, i: int) -> int:
    if _ops[s] != SOLVE:
        raise FlatcheckError("index node must reference a solve node")
    k = _data[s]
    if not 0 <= i < k:
        raise IndexError(i)
    rhs = _args[s][k * k:]
    if all(r == ZERO for r in rhs):
        return ZERO
    return GRAPH._node(INDEX, (s,), i, _masks[s])


# --------------------------------------------------------------------------
# handle class

class Expr:
    """Handle on a DAG node. Equality and hashing are by node identity."""

    __slots__ = ("id",)

    def __init__(self, nid: int):
        self.id = nid

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return Expr(add_id(self.id, _as_id(other)))

    def __radd__(self, other):
        return Expr(add_id(_as_id(other), self.id))

    def __sub__(self, other):
        return Expr(sub_id(self.id, _as_id(other)))

    def __rsub__(self, other):
        return Expr(sub_id(_as_id(other), self.id))

    def __mul__(self, other):
        return Expr(mul_id(self.id, _as_id(other)))

    def __rmul__(self, other):
        return Expr(mul_id(_as_id(other), self.id))

    def __truediv__(self, other):
        return Expr(div_id(self.id, _as_id(other)))

    def __rtruediv__(self, other):
        return Expr(div_id(_as_id(other), self.id))

    def __pow__(self, k):
        if isinstance(k, Expr):
            c = _cval(k.id)
            if c is None or c != int(c):
                raise FlatcheckError("only integer exponents are supported")
            k = int(c)
        if int(k) != k:
            raise FlatcheckError("only integer exponents are supported")
        return Expr(pow_id(self.id, int(k)))

    def __neg__(self):
        return Expr(neg_id(self.id))

    def __pos__(self):
        return self

    # identity ---------------------------------------------------------
    def __eq__(self, other):
        return isinstance(other, Expr) and other.id == self.id

    def __hash__(self):
        return hash(("Expr", self.id))

    # inspection -------------------------------------------------------
    @property
    def op(self) -> str:
        return OP_NAMES[_ops[self.id]]

    @property
    def children(self) -> tuple:
        return tuple(Expr(c) for c in _args[self.id])

    @property
    def is_const(self) -> bool:
        return _ops[self.id] == CONST

    @property
    def is_zero(self) -> bool:
        return self.id == ZERO

    @property
    def value(self):
        """Exact constant payload; raises for non-constant nodes."""
        c = _cval(self.id)
        if c is None:
            raise FlatcheckError(f"node {self.id} is not a constant")
        return c

    @property
    def name(self) -> str:
        if _ops[self.id] != SYM:
            raise FlatcheckError(f"node {self.id} is not a symbol")
        return _data[self.id]

    def free_symbols(self) -> set[str]:
        return set(GRAPH.symbol_names(_masks[self.id]))

    def depends_on(self, *names: str) -> bool:
        m = _masks[self.id]
        for name in names:
            if m & (1 << GRAPH.symbol_bit(name)):
                return True
        return False

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        try:
            text = to_text(self, limit=200)
        except FlatcheckError:
            text = f"<{self.op} node {self.id}>"
        return f"Expr({text})"

    __str__ = lambda self: to_text(self, limit=2000)  # noqa: E731


def _as_id(x) -> int:
    if isinstance(x, Expr):
        return x.id
    if isinstance(x, (Real, Fraction)):
        return const_id(x)
    raise TypeError(f"cannot use {type(x).__name__} in an expression")


def as_expr(x) -> Expr:
    return x if isinstance(x, Expr) else Expr(_as_id(x))


def const(value) -> Expr:
    return Expr(const_id(value))


def symbol(name: str) -> Expr:
    return Expr(sym_id(name))


def symbols(names) -> list[Expr]:
    if isinstance(names, str):
        names = names.replace(",", " ").split()
    return [symbol(n) for n in names]


def sin(e) -> Expr:
    return Expr(sin_id(_as_id(e)))


def cos(e) -> Expr:
    return Expr(cos_id(_as_id(e)))


def tan(e) -> Expr:
    return Expr(tan_id(_as_id(e)))


def solve(matrix, rhs) -> list[Expr]:
    """Components of ``matrix^{-1} rhs`` as expressions sharing one solve node."""
    s = solve_id([[_as_id(e) for e in row] for row in matrix], [_as_id(e) for e in rhs])
    return [Expr(index_id(s, i)) for i in range(len(rhs))]


def solve_node(matrix, rhs) -> Expr:
    """The raw (vector-valued) solve node; mostly useful for inspection."""
    return Expr(solve_id([[_as_id(e) for e in row] for row in matrix], [_as_id(e) for e in rhs]))


def on_release(hook) -> None:
    """Register ``hook(mark)``, called when nodes from ``mark`` on are dropped."""
    _RELEASE_HOOKS.append(hook)


@contextmanager
def scope():
    """Release every node created inside the block when it exits.

    Meant for batch work over unrelated systems, where the node table would
    otherwise keep growing. Any ``Expr`` built inside is invalid afterwards,
    so only plain data (labels, numbers, indices) should leave the block.
    """
    mark = len(GRAPH)
    try:
        yield
    finally:
        GRAPH.truncate(mark)


def node_count() -> int:
    return len(GRAPH)


# --------------------------------------------------------------------------
# differentiation

def _diff_nodes(root: int, var: int) -> int:
    """Derivative of node ``root`` w.r.t. symbol node ``var`` (ids)."""
    bit = _masks[var]
    if not _masks[root] & bit:
        return ZERO
    cache = GRAPH._dcache
    hit = cache.get((root, var))
    if hit is not None:
        return hit
    # collect the dependent, not yet differentiated part of the subgraph
    todo = set()
    stack = [root]
    while stack:
        n = stack.pop()
        if n in todo or (n, var) in cache:
            continue
        todo.add(n)
        for c in _args[n]:
            if _masks[c] & bit and c not in todo:
                stack.append(c)

    def d(c):
        if not _masks[c] & bit:
            return ZERO
        return cache[(c, var)]

    for n in sorted(todo):
        op = _ops[n]
        a = _args[n]
        if op == SYM:
            r = ONE if n == var else ZERO
        elif op == ADD:
            r = add_id(d(a[0]), d(a[1]))
        elif op == NEG:
            r = neg_id(d(a[0]))
        elif op == MUL:
            r = add_id(mul_id(d(a[0]), a[1]), mul_id(a[0], d(a[1])))
        elif op == DIV:
            # (a/b)' = (a' - (a/b) b') / b
            r = div_id(sub_id(d(a[0]), mul_id(n, d(a[1]))), a[1])
        elif op == POW:
            k = _data[n]
            r = mul_id(mul_id(const_id(k), pow_id(a[0], k - 1)), d(a[0]))
        elif op == SIN:
            r = mul_id(cos_id(a[0]), d(a[0]))
        elif op == COS:
            r = neg_id(mul_id(sin_id(a[0]), d(a[0])))
        elif op == TAN:
            r = mul_id(add_id(ONE, pow_id(n, 2)), d(a[0]))
        elif op == SOLVE:
            # M s = b  =>  M s' = b' - M' s
            k = _data[n]
            mat = a[:k * k]
            rhs = a[k * k:]
            comps = [None] * k
            new_rhs = []
            for i in range(k):
                acc = d(rhs[i])
                for j in range(k):
                    dm = d(mat[i * k + j])
                    if dm != ZERO:
                        if comps[j] is None:
                            comps[j] = index_id(n, j)
                        acc = sub_id(acc, mul_id(dm, comps[j]))
                new_rhs.append(acc)
            r = solve_id([mat[i * k:(i + 1) * k] for i in range(k)], new_rhs)
        elif op == INDEX:
            r = index_id(d(a[0]), _data[n])
        else:  # CONST never depends on anything
            r = ZERO
        cache[(n, var)] = r
    return cache[(root, var)]


def differentiate(e, x) -> Expr:
    """Exact partial derivative of ``e`` with respect to the symbol ``x``."""
    if isinstance(x, str):
        x = symbol(x)
    x = as_expr(x)
    if _ops[x.id] != SYM:
        raise FlatcheckError("can only differentiate with respect to a symbol")
    return Expr(_diff_nodes(as_expr(e).id, x.id))


def gradient(e, xs) -> list[Expr]:
    return [differentiate(e, x) for x in xs]


# --------------------------------------------------------------------------
# substitution

def substitute(exprs, mapping: dict):
    """Replace symbols by expressions. ``exprs`` may be one Expr or a list."""
    single = isinstance(exprs, Expr) or not isinstance(exprs, (list, tuple))
    roots = [as_expr(exprs).id] if single else [as_expr(e).id for e in exprs]
    repl = {}
    mask = 0
    for k, v in mapping.items():
        kid = sym_id(k) if isinstance(k, str) else as_expr(k).id
        repl[kid] = as_expr(v).id
        mask |= _masks[kid]
    memo: dict[int, int] = {}
    todo = set()
    stack = list(roots)
    while stack:
        n = stack.pop()
        if n in todo or not _masks[n] & mask:
            continue
        todo.add(n)
        stack.extend(c for c in _args[n] if _masks[c] & mask)

    def s(c):
        return memo.get(c, c)

    for n in sorted(todo):
        op = _ops[n]
        a = _args[n]
        if op == SYM:
            r = repl.get(n, n)
        elif op == ADD:
            r = add_id(s(a[0]), s(a[1]))
        elif op == NEG:
            r = neg_id(s(a[0]))
        elif op == MUL:
            r = mul_id(s(a[0]), s(a[1]))
        elif op == DIV:
            r = div_id(s(a[0]), s(a[1]))
        elif op == POW:
            r = pow_id(s(a[0]), _data[n])
        elif op == SIN:
            r = sin_id(s(a[0]))
        elif op == COS:
            r = cos_id(s(a[0]))
        elif op == TAN:
            r = tan_id(s(a[0]))
        elif op == SOLVE:
            k = _data[n]
            flat = [s(c) for c in a]
            r = solve_id([flat[i * k:(i + 1) * k] for i in range(k)], flat[k * k:])
        elif op == INDEX:
            r = index_id(s(a[0]), _data[n])
        else:
            r = n
        memo[n] = r
    out = [Expr(memo.get(r, r)) for r in roots]
    return out[0] if single else out


# --------------------------------------------------------------------------
# evaluation

class Evaluator:
    """Batched numeric evaluation with a memo shared across calls.

    ``values`` maps symbol names to scalars or equally long 1-d arrays (one
    entry per point). With ``strict=True`` a zero denominator or a singular
    solve raises; otherwise the affected points evaluate to NaN.
    """

    def __init__(self, values: dict, strict: bool = False):
        arrays = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in values.items()}
        sizes = {a.shape[0] for a in arrays.values() if a.shape[0] != 1}
        if len(sizes) > 1:
            raise FlatcheckError("inconsistent batch sizes in evaluation point set")
        self.size = sizes.pop() if sizes else 1
        self.strict = strict
        self._values = {k: np.broadcast_to(a, (self.size,)) for k, a in arrays.items()}
        self._memo: dict[int, object] = {}

    def point(self, i: int) -> dict:
        return {k: float(v[i]) for k, v in self._values.items()}

    def _fail(self, exc_type, message, node, bad):
        idx = int(np.flatnonzero(bad)[0]) if np.any(bad) else 0
        raise exc_type(f"{message} at node {node}, point {idx}", node=node,
                       point_index=idx, point=self.point(idx))

    def _compute(self, roots):
        memo = self._memo
        todo = set()
        stack = [r for r in roots if r not in memo]
        while stack:
            n = stack.pop()
            if n in todo:
                continue
            todo.add(n)
            for c in _args[n]:
                if c not in memo and c not in todo:
                    stack.append(c)
        fvals = GRAPH.fvals
        N = self.size
        for n in sorted(todo):
            op = _ops[n]
            a = _args[n]
            if op == CONST:
                v = fvals[n]
            elif op == SYM:
                try:
                    v = self._values[_data[n]]
                except KeyError:
                    raise FlatcheckError(f"symbol {_data[n]!r} has no value") from None
            elif op == ADD:
                v = memo[a[0]] + memo[a[1]]
            elif op == MUL:
                v = memo[a[0]] * memo[a[1]]
            elif op == NEG:
                v = -memo[a[0]]
            elif op == DIV:
                den = memo[a[1]]
                bad = np.asarray(den) == 0
                if np.any(bad):
                    if self.strict:
                        self._fail(DivisionByZero, "division by zero", n, np.broadcast_to(bad, (N,)))
                    with np.errstate(divide="ignore", invalid="ignore"):
                        v = np.where(bad, np.nan, memo[a[0]] / np.where(bad, 1.0, den))
                else:
                    v = memo[a[0]] / den
            elif op == POW:
                base = memo[a[0]]
                k = _data[n]
                if k < 0:
                    bad = np.asarray(base) == 0
                    if np.any(bad):
                        if self.strict:
                            self._fail(DivisionByZero, "division by zero", n, np.broadcast_to(bad, (N,)))
                        base = np.where(bad, np.nan, base)
                v = base ** k
            elif op == SIN:
                v = np.sin(memo[a[0]])
            elif op == COS:
                v = np.cos(memo[a[0]])
            elif op == TAN:
                v = np.tan(memo[a[0]])
            elif op == SOLVE:
                v = self._solve(n, a, _data[n])
            elif op == INDEX:
                v = memo[a[0]][:, _data[n]]
            else:  # pragma: no cover
                raise FlatcheckError(f"unknown opcode {op}")
            memo[n] = v

    def _solve(self, n, a, k):
        memo = self._memo
        N = self.size
        M = np.empty((N, k, k))
        b = np.empty((N, k))
        for i in range(k):
            b[:, i] = memo[a[k * k + i]]
            for j in range(k):
                M[:, i, j] = memo[a[i * k + j]]
        finite = np.isfinite(M).all(axis=(1, 2)) & np.isfinite(b).all(axis=1)
        out = np.full((N, k), np.nan)
        ok = finite.copy()
        if np.any(finite):
            # condition estimate from singular values; flags points where the
            # pivoted solve would be meaningless
            sv = np.linalg.svd(M[finite], compute_uv=False)
            with np.errstate(divide="ignore", invalid="ignore"):
                cond = sv[:, 0] / sv[:, -1]
            good = np.isfinite(cond) & (cond < SOLVE_COND_LIMIT)
            ok[finite] = good
            if np.any(ok):
                out[ok] = np.linalg.solve(M[ok], b[ok][..., None])[..., 0]
        if self.strict and not np.all(ok):
            self._fail(SingularSolve, "singular linear solve", n, ~ok)
        return out

    def __call__(self, e):
        """Evaluate one expression (or a list/nested list) to arrays of shape (N,)."""
        if isinstance(e, (list, tuple)):
            flat = []
            _flatten(e, flat)
            self._compute([x.id if isinstance(x, Expr) else _as_id(x) for x in flat])
            return _rebuild(e, self._get)
        nid = e.id if isinstance(e, Expr) else _as_id(e)
        self._compute([nid])
        return self._get(nid)

    def _get(self, nid):
        v = self._memo[nid]
        return np.broadcast_to(np.asarray(v, dtype=float), (self.size,))

    def array(self, exprs):
        """Evaluate a nested list of expressions into an ndarray with the point axis first."""
        vals = np.asarray(self(exprs), dtype=float)
        return np.moveaxis(vals, -1, 0)


def _flatten(e, out):
    if isinstance(e, (list, tuple)):
        for x in e:
            _flatten(x, out)
    else:
        out.append(e)


def _rebuild(e, get):
    if isinstance(e, (list, tuple)):
        return [_rebuild(x, get) for x in e]
    return get(e.id if isinstance(e, Expr) else _as_id(e))


def evaluate(e, point: dict) -> float:
    """Value of ``e`` at a single point; raises on zero division or singular solves.

    For solve nodes (not wrapped in an index) the solution vector is returned.
    """
    ev = Evaluator(point, strict=True)
    e = as_expr(e)
    ev._compute([e.id])
    v = ev._memo[e.id]
    if _ops[e.id] == SOLVE:
        return np.asarray(v)[0].copy()
    return float(np.asarray(v).reshape(-1)[0])


# --------------------------------------------------------------------------
# printing

_PREC = {ADD: 1, NEG: 2, MUL: 2, DIV: 2, POW: 4}


def _fmt_const(v):
    if isinstance(v, Fraction):
        return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
    return repr(float(v))


def to_text(e, limit: int | None = None) -> str:
    """Infix text accepted by :func:`flatcheck.parsing.parse_expr`.

    Shared subgraphs are expanded, so the text can be much larger than the
    DAG; ``limit`` aborts with an error past that many characters. Solve
    nodes have no infix form.
    """
    memo: dict[int, tuple[str, int]] = {}
    root = as_expr(e).id
    todo = set()
    stack = [root]
    while stack:
        n = stack.pop()
        if n in todo:
            continue
        todo.add(n)
        stack.extend(_args[n])
    for n in sorted(todo):
        op = _ops[n]
        a = _args[n]
        if op == CONST:
            v = _data[n][1]
            s = _fmt_const(v)
            p = 5 if (v >= 0 and "/" not in s) else (2 if "/" in s and v >= 0 else 0)
        elif op == SYM:
            s, p = _data[n], 5
        elif op in (SIN, COS, TAN):
            s, p = f"{OP_NAMES[op]}({memo[a[0]][0]})", 5
        elif op == ADD:
            l, r = memo[a[0]], memo[a[1]]
            rs = r[0]
            if _ops[a[1]] == NEG:
                inner = memo[_args[a[1]][0]]
                rs = inner[0] if inner[1] > 2 else f"({inner[0]})"
                s = f"{l[0]} - {rs}"
            else:
                s = f"{l[0]} + {rs if r[1] >= 1 else '(' + rs + ')'}"
            p = 1
        elif op == NEG:
            x = memo[a[0]]
            s, p = f"-{x[0] if x[1] > 2 else '(' + x[0] + ')'}", 2
        elif op in (MUL, DIV):
            l, r = memo[a[0]], memo[a[1]]
            ls = l[0] if l[1] >= 2 else f"({l[0]})"
            rs = r[0] if r[1] > 2 else f"({r[0]})"
            s, p = f"{ls}{'*' if op == MUL else '/'}{rs}", 2
        elif op == POW:
            x = memo[a[0]]
            base = x[0] if x[1] >= 5 else f"({x[0]})"
            k = _data[n]
            s, p = (f"{base}^{k}" if k >= 0 else f"{base}^({k})"), 4
        else:
            raise FlatcheckError("solve nodes have no infix text form")
        if limit is not None and len(s) > limit:
            raise FlatcheckError("expression text exceeds limit")
        memo[n] = (s, p)
    return memo[root][0]


def dag_size(exprs) -> int:
    """Number of distinct nodes reachable from the given expressions."""
    if isinstance(exprs, Expr):
        exprs = [exprs]
    seen = set()
    stack = [as_expr(e).id for e in exprs]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(_args[n])
    return len(seen)


# --------------------------------------------------------------------------
# compiled scalar functions

def lambdify(exprs, argnames):
    """Compile expressions into a fast scalar function ``F(*args) -> ndarray``.

    The DAG is emitted as straight-line Python (one assignment per node), so
    repeated evaluation at single points, e.g. inside an integrator, avoids
    the per-node dispatch of :class:`Evaluator`. Symbols not in ``argnames``
    must have been substituted beforehand.
    """
    exprs = [as_expr(e) for e in exprs]
    argnames = list(argnames)
    order = set()
    stack = [e.id for e in exprs]
    while stack:
        n = stack.pop()
        if n in order:
            continue
        order.add(n)
        stack.extend(_args[n])
    lines = [f"def _f({', '.join(f'a{i}' for i in range(len(argnames)))}):"]
    argpos = {name: i for i, name in enumerate(argnames)}
    fn = {SIN: "_sin", COS: "_cos", TAN: "_tan"}
    for n in sorted(order):
        op, a = _ops[n], _args[n]
        if op == CONST:
            rhs = repr(float(GRAPH.fvals[n]))
        elif op == SYM:
            name = _data[n]
            if name not in argpos:
                raise FlatcheckError(f"symbol {name!r} is not an argument")
            rhs = f"a{argpos[name]}"
        elif op == ADD:
            rhs = f"n{a[0]} + n{a[1]}"
        elif op == MUL:
            rhs = f"n{a[0]} * n{a[1]}"
        elif op == DIV:
            rhs = f"n{a[0]} / n{a[1]}"
        elif op == POW:
            rhs = f"n{a[0]} ** {_data[n]}"
        elif op == NEG:
            rhs = f"-n{a[0]}"
        elif op in fn:
            rhs = f"{fn[op]}(n{a[0]})"
        elif op == SOLVE:
            k = _data[n]
            mat = ", ".join("[" + ", ".join(f"n{a[i * k + j]}" for j in range(k)) + "]"
                            for i in range(k))
            vec = ", ".join(f"n{a[k * k + i]}" for i in range(k))
            rhs = f"_solve([{mat}], [{vec}])"
        elif op == INDEX:
            rhs = f"n{a[0]}[{_data[n]}]"
        else:  # pragma: no cover
            raise FlatcheckError(f"unknown opcode {op}")
        lines.append(f"    n{n} = {rhs}")
    lines.append(f"    return _np.array([{', '.join(f'n{e.id}' for e in exprs)}], dtype=float)")
    scope = {"_sin": math.sin, "_cos": math.cos, "_tan": math.tan, "_np": np,
             "_solve": lambda M, b: np.linalg.solve(np.array(M, dtype=float), np.array(b, dtype=float))}
    exec("\n".join(lines), scope)
    return scope["_f"]
