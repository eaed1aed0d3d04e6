"""Bit-vector expressions, path conditions and satisfiability.

Expressions are immutable trees over unsigned bit-vectors. Evaluation
semantics: every node's value is masked to its width, and a constraint holds
when its value is nonzero. Comparison operators yield 0/1.

The satisfiability backend is internal: constraints are split into
independent sets (connected components over shared variables), single
variable constraints prune domains by enumeration, and the rest is settled
by backtracking search. Firmware constraints here are over 8-bit memory
bytes, where this is both exact and fast; queries can also be dumped in
SMT-LIB text form for offline debugging with an external solver.

Timeouts never report unsat: a timed-out query is treated as satisfiable
with a diagnostic so reachability reporting stays sound.
"""

from __future__ import annotations

import time


def _rotl(v: int, k: int, width: int) -> int:
    mask = (1 << width) - 1
    k %= width
    return ((v << k) | (v >> (width - k))) & mask


def _parity(v: int) -> int:
    v ^= v >> 4
    v ^= v >> 2
    v ^= v >> 1
    return v & 1


def eval_op(op: str, args: tuple, width: int) -> int:
    """Concrete semantics of every expression / IR operator."""
    mask = (1 << width) - 1
    if op == "add":
        return (args[0] + args[1]) & mask
    if op == "sub":
        return (args[0] - args[1]) & mask
    if op == "and":
        return (args[0] & args[1]) & mask
    if op == "or":
        return (args[0] | args[1]) & mask
    if op == "xor":
        return (args[0] ^ args[1]) & mask
    if op == "shl":
        return (args[0] << args[1]) & mask
    if op == "shr":
        return (args[0] >> args[1]) & mask
    if op == "mul":
        return (args[0] * args[1]) & mask
    if op == "udiv":
        return (args[0] // args[1]) & mask if args[1] else 0
    if op == "umod":
        return (args[0] % args[1]) & mask if args[1] else 0
    if op == "eq":
        return 1 if args[0] == args[1] else 0
    if op == "ne":
        return 1 if args[0] != args[1] else 0
    if op == "ult":
        return 1 if args[0] < args[1] else 0
    if op == "ugt":
        return 1 if args[0] > args[1] else 0
    if op == "ule":
        return 1 if args[0] <= args[1] else 0
    if op == "uge":
        return 1 if args[0] >= args[1] else 0
    if op == "ite":
        return (args[1] if args[0] else args[2]) & mask
    if op == "not":
        return (~args[0]) & mask
    if op == "rotl":
        return _rotl(args[0], args[1], width)
    if op == "par":
        return _parity(args[0])
    if op == "resize":
        return args[0] & mask
    raise AssertionError(op)


def _possible_bits(op: str, args: tuple, width: int) -> int:
    """Superset of the bits the expression can ever set (known-bits domain)."""
    mask = (1 << width) - 1
    if op == "const":
        return args[0] & mask
    if op == "var":
        return mask
    if op in ("eq", "ne", "ult", "ugt", "ule", "uge", "par"):
        return 1
    pa = [a.pbits if isinstance(a, SymExpr) else a for a in args]
    if op == "and":
        return pa[0] & pa[1] & mask
    if op in ("or", "xor"):
        return (pa[0] | pa[1]) & mask
    if op == "shl" and isinstance(args[1], SymExpr) and args[1].op == "const":
        return (pa[0] << args[1].value) & mask
    if op == "shr" and isinstance(args[1], SymExpr) and args[1].op == "const":
        return pa[0] >> args[1].value
    if op == "resize":
        return pa[0] & mask
    if op == "ite":
        return (pa[1] | pa[2]) & mask
    return mask


class SymExpr:
    """Immutable expression node. op 'const': args=(value,); 'var': args=(name,)."""

    __slots__ = ("op", "args", "width", "pbits", "_hash", "_vars")

    def __init__(self, op: str, args: tuple, width: int):
        self.op = op
        self.args = args
        self.width = width
        self.pbits = _possible_bits(op, args, width)
        self._hash = None
        self._vars = None

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, SymExpr):
            return NotImplemented
        return (self.op == other.op and self.width == other.width
                and self.args == other.args)

    def __hash__(self):
        h = self._hash
        if h is None:
            h = self._hash = hash((self.op, self.width, self.args))
        return h

    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def value(self) -> int:
        assert self.op == "const"
        return self.args[0]

    def vars(self) -> frozenset:
        v = self._vars
        if v is None:
            if self.op == "var":
                v = frozenset((self.args[0],))
            elif self.op == "const":
                v = frozenset()
            else:
                v = frozenset().union(*(a.vars() for a in self.args
                                        if isinstance(a, SymExpr)))
            self._vars = v
        return v

    def __repr__(self):
        return to_text(self)


def const(value: int, width: int = 8) -> SymExpr:
    return SymExpr("const", (value & ((1 << width) - 1),), width)


def var(name: str, width: int = 8) -> SymExpr:
    return SymExpr("var", (name,), width)


def _coerce(a, width: int):
    if isinstance(a, int):
        return const(a, width)
    return a


_CMP_OPS = frozenset(("eq", "ne", "ult", "ugt", "ule", "uge"))


def _resize(a: SymExpr, width: int) -> SymExpr:
    if a.width == width:
        return a
    if a.op == "const":
        return const(a.value, width)
    return SymExpr("resize", (a,), width)


def mk(op: str, args: tuple, width: int) -> SymExpr:
    """Smart constructor: folds constant-only trees, keeps operand widths equal.

    Result width is `width`; comparisons compare at their operands' width
    (unsigned, zero-extending the narrower side) and yield 0/1.
    """
    if op in ("const", "var"):
        return SymExpr(op, args, width)
    if op in _CMP_OPS:
        ow = max((a.width for a in args if isinstance(a, SymExpr)), default=8)
        coerced = tuple(_resize(_coerce(a, ow), ow) for a in args)
    elif op == "ite":
        cond = args[0] if isinstance(args[0], SymExpr) else _coerce(args[0], 8)
        x = _resize(_coerce(args[1], width), width)
        y = _resize(_coerce(args[2], width), width)
        if cond.op == "const":
            return x if cond.value else y
        if x == y:
            return x
        coerced = (cond, x, y)
    else:
        coerced = tuple(_resize(_coerce(a, width), width) for a in args)
    if all(a.op == "const" for a in coerced):
        return const(eval_op(op, tuple(a.value for a in coerced), width), width)
    if op == "and":
        a, b = coerced
        if a.pbits & b.pbits == 0:
            return const(0, width)
        if b.op == "const" and a.pbits & ~b.value == 0:
            return _resize(a, width)
        if a.op == "const" and b.pbits & ~a.value == 0:
            return _resize(b, width)
    elif op in ("or", "xor", "add"):
        a, b = coerced
        if a.pbits == 0:
            return _resize(b, width)
        if b.pbits == 0:
            return _resize(a, width)
    elif op in ("sub", "shl", "shr"):
        a, b = coerced
        if b.pbits == 0:
            return _resize(a, width)
    return SymExpr(op, coerced, width)


def bool_not(e: SymExpr) -> SymExpr:
    """Negate a nonzero-means-true condition, flipping comparisons for clarity."""
    flip = {"eq": "ne", "ne": "eq", "ult": "uge", "uge": "ult",
            "ugt": "ule", "ule": "ugt"}
    if e.op in flip:
        return SymExpr(flip[e.op], e.args, e.width)
    if e.op == "const":
        return const(0 if e.value else 1, 1)
    return mk("eq", (e, 0), 1)


def is_symbolic(v) -> bool:
    """True if v is an expression that still mentions at least one variable."""
    return isinstance(v, SymExpr) and bool(v.vars())


def eval_expr(e: SymExpr, env: dict) -> int:
    """Evaluate under a full assignment; unbound variables read 0."""
    memo: dict[int, int] = {}
    stack = [(e, False)]
    while stack:
        node, ready = stack.pop()
        key = id(node)
        if key in memo:
            continue
        if node.op == "const":
            memo[key] = node.args[0]
        elif node.op == "var":
            memo[key] = env.get(node.args[0], 0) & ((1 << node.width) - 1)
        elif not ready:
            stack.append((node, True))
            for a in node.args:
                if isinstance(a, SymExpr) and id(a) not in memo:
                    stack.append((a, False))
        else:
            vals = tuple(memo[id(a)] if isinstance(a, SymExpr) else a
                         for a in node.args)
            memo[key] = eval_op(node.op, vals, node.width)
    return memo[id(e)]


def substitute(e: SymExpr, env: dict):
    """Partially evaluate: replace bound variables, fold what becomes constant."""
    if not e.vars() & set(env):
        return e
    if e.op == "var":
        return const(env[e.args[0]], e.width)
    new_args = tuple(substitute(a, env) if isinstance(a, SymExpr) else a
                     for a in e.args)
    return mk(e.op, new_args, e.width)


# ---------------------------------------------------------------------------
# Path conditions
# ---------------------------------------------------------------------------

class PathCondition:
    """Ordered conjunction of constraints with provenance (site, note)."""

    __slots__ = ("entries",)

    def __init__(self, entries=None):
        self.entries: list[tuple[SymExpr, int, str]] = entries if entries is not None else []

    def copy(self) -> "PathCondition":
        return PathCondition(list(self.entries))

    def append(self, expr: SymExpr, site: int, note: str):
        if expr.op == "const" and expr.value:
            return  # constant-true adds no information
        self.entries.append((expr, site, note))

    def exprs(self) -> list[SymExpr]:
        return [e for e, _, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


# ---------------------------------------------------------------------------
# Satisfiability
# ---------------------------------------------------------------------------

class SolverTimeout(Exception):
    pass


class Unsat(Exception):
    pass


NOT_UNIQUE = object()


def _collect_var_widths(exprs) -> dict[str, int]:
    widths: dict[str, int] = {}
    seen = set()
    stack = list(exprs)
    while stack:
        e = stack.pop()
        if not isinstance(e, SymExpr) or id(e) in seen:
            continue
        seen.add(id(e))
        if e.op == "var":
            widths[e.args[0]] = e.width
        else:
            stack.extend(a for a in e.args if isinstance(a, SymExpr))
    return widths


def split_independent(exprs: list[SymExpr]) -> list[list[SymExpr]]:
    """Partition constraints into connected components over shared variables."""
    parent: dict[str, str] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    groups: dict[str, list[SymExpr]] = {}
    free: list[SymExpr] = []
    for e in exprs:
        vs = sorted(e.vars())
        if not vs:
            free.append(e)
            continue
        for v in vs:
            parent.setdefault(v, v)
        for v in vs[1:]:
            union(vs[0], v)
    for e in exprs:
        vs = sorted(e.vars())
        if vs:
            groups.setdefault(find(vs[0]), []).append(e)
    out = [grp for _, grp in sorted(groups.items())]
    if free:
        out.append(free)
    return out


def _solve_component(exprs: list[SymExpr], deadline: float) -> dict | None:
    """Exact model search for one component; None if unsat. May raise SolverTimeout."""
    widths = _collect_var_widths(exprs)
    names = sorted(widths)
    # Domain pruning with single-variable constraints.
    domains: dict[str, list[int]] = {}
    multi: list[SymExpr] = []
    singles: dict[str, list[SymExpr]] = {n: [] for n in names}
    for e in exprs:
        vs = e.vars()
        if not vs:
            if eval_expr(e, {}) == 0:
                return None
        elif len(vs) == 1:
            singles[next(iter(vs))].append(e)
        else:
            multi.append(e)
    for n in names:
        dom = range(1 << widths[n])
        for e in singles[n]:
            if time.monotonic() > deadline:
                raise SolverTimeout()
            dom = [x for x in dom if eval_expr(e, {n: x}) != 0]
            if not dom:
                return None
        domains[n] = list(dom)
    if not multi:
        return {n: domains[n][0] for n in names}
    # Backtracking over remaining constraints; most-constrained variable first.
    order = sorted(names, key=lambda n: len(domains[n]))
    by_last: list[list[SymExpr]] = [[] for _ in order]
    pos = {n: i for i, n in enumerate(order)}
    for e in multi:
        by_last[max(pos[v] for v in e.vars())].append(e)

    env: dict[str, int] = {}
    checks = 0

    def backtrack(i: int):
        nonlocal checks
        if i == len(order):
            return True
        name = order[i]
        for v in domains[name]:
            checks += 1
            if checks % 512 == 0 and time.monotonic() > deadline:
                raise SolverTimeout()
            env[name] = v
            if all(eval_expr(e, env) != 0 for e in by_last[i]):
                if backtrack(i + 1):
                    return True
        env.pop(name, None)
        return False

    if backtrack(0):
        return dict(env)
    return None


class SatResult:
    __slots__ = ("sat", "model", "timed_out")

    def __init__(self, sat: bool, model: dict | None, timed_out: bool = False):
        self.sat = sat
        self.model = model
        self.timed_out = timed_out

    def __bool__(self):
        return self.sat


def check(exprs, timeout: float = 5.0) -> SatResult:
    """Decide satisfiability of a conjunction. Timeout biases to satisfiable."""
    exprs = [e for e in exprs if isinstance(e, SymExpr)]
    deadline = time.monotonic() + timeout
    model: dict[str, int] = {}
    try:
        for comp in split_independent(exprs):
            m = _solve_component(comp, deadline)
            if m is None:
                return SatResult(False, None)
            model.update(m)
    except SolverTimeout:
        return SatResult(True, None, timed_out=True)
    return SatResult(True, model)


class Solver:
    """Satisfiability interface over PathConditions.

    Collects timeout diagnostics rather than failing: a timed-out query
    over-approximates (path kept alive / value treated as not-unique).
    """

    def __init__(self, timeout: float = 5.0):
        self.timeout = timeout
        self.diagnostics: list[str] = []

    def _exprs(self, pc) -> list[SymExpr]:
        if isinstance(pc, PathCondition):
            return pc.exprs()
        return list(pc)

    def is_satisfiable(self, pc, extra=()) -> bool:
        res = check(self._exprs(pc) + list(extra), self.timeout)
        if res.timed_out:
            self.diagnostics.append("solver timeout: assumed satisfiable")
        return res.sat

    def model(self, pc, extra=()) -> dict:
        res = check(self._exprs(pc) + list(extra), self.timeout)
        if not res.sat:
            raise Unsat()
        if res.model is None:
            self.diagnostics.append("solver timeout: empty model")
            return {}
        return res.model

    def eval_model(self, pc, expr: SymExpr) -> int:
        """One witness value of expr under some model of pc."""
        exprs = self._exprs(pc)
        res = check(exprs + [mk("eq", (expr, expr), 1)], self.timeout)
        if not res.sat:
            raise Unsat()
        model = res.model or {}
        # Variables of expr untouched by pc may be absent; they read as 0.
        return eval_expr(expr, model)

    def is_constant(self, pc, expr):
        """The unique value of expr under pc, or NOT_UNIQUE.

        Two queries: take a model, then ask whether a different value exists.
        """
        if isinstance(expr, int):
            return expr
        if expr.is_const():
            return expr.value
        exprs = self._exprs(pc)
        res = check(exprs, self.timeout)
        if not res.sat:
            raise Unsat()
        if res.timed_out:
            self.diagnostics.append("solver timeout in is_constant: not-unique")
            return NOT_UNIQUE
        v = eval_expr(expr, res.model)
        res2 = check(exprs + [mk("ne", (expr, v), 1)], self.timeout)
        if res2.timed_out:
            self.diagnostics.append("solver timeout in is_constant: not-unique")
            return NOT_UNIQUE
        return NOT_UNIQUE if res2.sat else v


# ---------------------------------------------------------------------------
# Text forms
# ---------------------------------------------------------------------------

_INFIX = {"add": "+", "sub": "-", "mul": "*", "and": "&", "or": "|",
          "xor": "^", "shl": "<<", "shr": ">>", "eq": "==", "ne": "!=",
          "ult": "<", "ugt": ">", "ule": "<=", "uge": ">="}


def to_text(e) -> str:
    if isinstance(e, int):
        return str(e)
    if e.op == "const":
        return f"0x{e.args[0]:x}" if e.args[0] > 9 else str(e.args[0])
    if e.op == "var":
        return e.args[0]
    if e.op in _INFIX and len(e.args) == 2:
        return f"({to_text(e.args[0])} {_INFIX[e.op]} {to_text(e.args[1])})"
    inner = ", ".join(to_text(a) for a in e.args)
    return f"{e.op}({inner})"


_SMT_OPS = {"add": "bvadd", "sub": "bvsub", "mul": "bvmul", "and": "bvand",
            "or": "bvor", "xor": "bvxor", "shl": "bvshl", "shr": "bvlshr",
            "udiv": "bvudiv", "umod": "bvurem"}


def _smt(e: SymExpr) -> str:
    if e.op == "const":
        return f"(_ bv{e.args[0]} {e.width})"
    if e.op == "var":
        return f"|{e.args[0]}|"
    a = [_smt(x) if isinstance(x, SymExpr) else f"(_ bv{x} {e.width})"
         for x in e.args]
    if e.op in _SMT_OPS:
        return f"({_SMT_OPS[e.op]} {a[0]} {a[1]})"
    if e.op in ("eq", "ne", "ult", "ugt", "ule", "uge"):
        cmps = {"eq": "=", "ne": "distinct", "ult": "bvult", "ugt": "bvugt",
                "ule": "bvule", "uge": "bvuge"}
        return (f"(ite ({cmps[e.op]} {a[0]} {a[1]}) (_ bv1 {e.width})"
                f" (_ bv0 {e.width}))")
    if e.op == "ite":
        return (f"(ite (distinct {a[0]} (_ bv0 {e.args[0].width})) {a[1]} {a[2]})")
    if e.op == "not":
        return f"(bvnot {a[0]})"
    if e.op == "resize":
        src = e.args[0]
        if src.width < e.width:
            return f"((_ zero_extend {e.width - src.width}) {a[0]})"
        return f"((_ extract {e.width - 1} 0) {a[0]})"
    raise AssertionError(f"no SMT form for {e.op}")


def to_smt2(exprs) -> str:
    """Render a conjunction as SMT-LIB text for offline debugging."""
    widths = _collect_var_widths(exprs)
    lines = ["(set-logic QF_BV)"]
    for n in sorted(widths):
        lines.append(f"(declare-const |{n}| (_ BitVec {widths[n]}))")
    for e in exprs:
        lines.append(f"(assert (distinct {_smt(e)} (_ bv0 {e.width})))")
    lines.append("(check-sat)")
    return "\n".join(lines)
