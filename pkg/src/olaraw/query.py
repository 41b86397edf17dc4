"""Aggregate query dialect: parsing, printing, and per-tuple evaluation.

Supported shape: SELECT AGG(expr) FROM name [WHERE pred] [GROUP BY col]
with AGG one of SUM/COUNT/AVG, arithmetic expressions over named columns,
and predicates built from comparisons, BETWEEN, AND/OR.

A tuple's contribution is the expression value when the predicate holds
and exactly 0 otherwise; COUNT uses the constant expression 1.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

DEFAULT_CONFIDENCE = 0.95


class QuerySyntaxError(ValueError):
    """Raised on malformed query text; carries the offending position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at offset {pos})")
        self.pos = pos


class UnknownColumnError(ValueError):
    pass


# ---------------------------------------------------------------- AST nodes


@dataclass(frozen=True)
class Number:
    value: float

    def to_sql(self) -> str:
        if float(self.value).is_integer():
            return str(int(self.value))
        return repr(float(self.value))


@dataclass(frozen=True)
class Column:
    name: str

    def to_sql(self) -> str:
        return self.name


@dataclass(frozen=True)
class BinOp:
    op: str  # '+', '-', '*'
    left: "Expr"
    right: "Expr"

    def to_sql(self) -> str:
        return f"({self.left.to_sql()} {self.op} {self.right.to_sql()})"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"

    def to_sql(self) -> str:
        return f"(-{self.operand.to_sql()})"


Expr = Union[Number, Column, BinOp, Neg]


@dataclass(frozen=True)
class Comparison:
    op: str  # '<', '<=', '>', '>=', '=', '!='
    left: Expr
    right: Expr

    def to_sql(self) -> str:
        return f"{self.left.to_sql()} {self.op} {self.right.to_sql()}"


@dataclass(frozen=True)
class Between:
    column: Column
    lo: Expr
    hi: Expr

    def to_sql(self) -> str:
        return f"{self.column.to_sql()} BETWEEN {self.lo.to_sql()} AND {self.hi.to_sql()}"


@dataclass(frozen=True)
class BoolOp:
    op: str  # 'AND', 'OR'
    left: "Pred"
    right: "Pred"

    def to_sql(self) -> str:
        return f"({self.left.to_sql()} {self.op} {self.right.to_sql()})"


Pred = Union[Comparison, Between, BoolOp]


@dataclass(frozen=True)
class AggregateQuery:
    kind: str  # SUM | COUNT | AVG
    expression: Expr
    table: str
    predicate: Optional[Pred] = None
    group_column: Optional[str] = None
    epsilon: float = 0.05
    delta_ms: float = 1000.0
    confidence: float = DEFAULT_CONFIDENCE
    columns: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie in (0, 1)")
        if self.delta_ms < 1.0:
            raise ValueError("delta must be at least 1 ms")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must lie in (0, 1)")

    def to_sql(self) -> str:
        inner = "*" if self.kind == "COUNT" and self.expression == Number(1.0) else self.expression.to_sql()
        s = f"SELECT {self.kind}({inner}) FROM {self.table}"
        if self.predicate is not None:
            s += f" WHERE {self.predicate.to_sql()}"
        if self.group_column is not None:
            s += f" GROUP BY {self.group_column}"
        return s


# ---------------------------------------------------------------- tokenizer

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op><=|>=|!=|<>|[-+*()<>=,]))"
)

_KEYWORDS = {"SELECT", "FROM", "WHERE", "GROUP", "BY", "AND", "OR", "BETWEEN", "SUM", "COUNT", "AVG"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.group("num") is not None:
            toks.append(("num", m.group("num"), m.start("num")))
        elif m.group("name") is not None:
            w = m.group("name")
            kind = "kw" if w.upper() in _KEYWORDS else "name"
            toks.append((kind, w.upper() if kind == "kw" else w, m.start("name")))
        else:
            op = m.group("op")
            toks.append(("op", "!=" if op == "<>" else op, m.start("op")))
        pos = m.end()
    toks.append(("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def next(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, kind, value=None):
        t = self.next()
        if t[0] != kind or (value is not None and t[1] != value):
            want = value or kind
            raise QuerySyntaxError(f"expected {want}, found {t[1] or 'end of input'}", t[2])
        return t

    # expr := term (('+'|'-') term)*
    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.next()[1]
            node = BinOp(op, node, self.term())
        return node

    # term := factor ('*' factor)*
    def term(self) -> Expr:
        node = self.factor()
        while self.peek()[:2] == ("op", "*"):
            self.next()
            node = BinOp("*", node, self.factor())
        return node

    # factor := number | column | '(' expr ')' | '-' factor
    def factor(self) -> Expr:
        t = self.next()
        if t[0] == "num":
            return Number(float(t[1]))
        if t[0] == "name":
            return Column(t[1])
        if t[:2] == ("op", "("):
            node = self.expr()
            self.expect("op", ")")
            return node
        if t[:2] == ("op", "-"):
            return Neg(self.factor())
        raise QuerySyntaxError(f"expected expression, found {t[1] or 'end of input'}", t[2])

    # pred := and_pred ('OR' and_pred)*
    def pred(self) -> Pred:
        node = self.and_pred()
        while self.peek()[:2] == ("kw", "OR"):
            self.next()
            node = BoolOp("OR", node, self.and_pred())
        return node

    def and_pred(self) -> Pred:
        node = self.prim_pred()
        while self.peek()[:2] == ("kw", "AND"):
            self.next()
            node = BoolOp("AND", node, self.prim_pred())
        return node

    def prim_pred(self) -> Pred:
        if self.peek()[:2] == ("op", "("):
            # Lookahead: parenthesized predicate vs parenthesized expression
            # starting a comparison. Try predicate first, fall back.
            save = self.i
            try:
                self.next()
                node = self.pred()
                self.expect("op", ")")
                return node
            except QuerySyntaxError:
                self.i = save
        if self.peek()[0] == "name":
            save = self.i
            name = self.next()
            if self.peek()[:2] == ("kw", "BETWEEN"):
                self.next()
                lo = self.expr()
                self.expect("kw", "AND")
                hi = self.expr()
                return Between(Column(name[1]), lo, hi)
            self.i = save
        left = self.expr()
        t = self.next()
        if t[0] != "op" or t[1] not in ("<", "<=", ">", ">=", "=", "!="):
            raise QuerySyntaxError(f"expected comparison operator, found {t[1] or 'end of input'}", t[2])
        return Comparison(t[1], left, self.expr())


def parse_query(
    text: str,
    schema_columns: Optional[list[str]] = None,
    epsilon: float = 0.05,
    delta_ms: float = 1000.0,
    confidence: float = DEFAULT_CONFIDENCE,
) -> AggregateQuery:
    """Parse the mini dialect into an AggregateQuery.

    When `schema_columns` is given, every referenced column is validated
    against it (UnknownColumnError otherwise).
    """
    p = _Parser(text)
    p.expect("kw", "SELECT")
    t = p.next()
    if t[:2] not in (("kw", "SUM"), ("kw", "COUNT"), ("kw", "AVG")):
        raise QuerySyntaxError(f"unknown aggregate {t[1]!r}", t[2])
    kind = t[1]
    p.expect("op", "(")
    if kind == "COUNT":
        # COUNT(*) or COUNT(col): the counted expression is the constant 1.
        if p.peek()[:2] == ("op", "*"):
            p.next()
        else:
            inner = p.expr()
            _ = inner
        expression: Expr = Number(1.0)
    else:
        expression = p.expr()
    p.expect("op", ")")
    p.expect("kw", "FROM")
    table = p.expect("name")[1]
    predicate = None
    group_column = None
    if p.peek()[:2] == ("kw", "WHERE"):
        p.next()
        predicate = p.pred()
    if p.peek()[:2] == ("kw", "GROUP"):
        p.next()
        p.expect("kw", "BY")
        group_column = p.expect("name")[1]
    t = p.peek()
    if t[0] != "eof":
        raise QuerySyntaxError(f"trailing input {t[1]!r}", t[2])

    cols = tuple(sorted(referenced_columns(expression, predicate, group_column)))
    q = AggregateQuery(
        kind=kind,
        expression=expression,
        table=table,
        predicate=predicate,
        group_column=group_column,
        epsilon=epsilon,
        delta_ms=delta_ms,
        confidence=confidence,
        columns=cols,
    )
    if schema_columns is not None:
        missing = [c for c in cols if c not in schema_columns]
        if missing:
            raise UnknownColumnError(f"unknown column(s): {', '.join(missing)}")
    return q


# ---------------------------------------------------------------- evaluation


def referenced_columns(expr: Expr, pred: Optional[Pred] = None, group_column: Optional[str] = None) -> set[str]:
    out: set[str] = set()

    def walk(n):
        if isinstance(n, Column):
            out.add(n.name)
        elif isinstance(n, BinOp):
            walk(n.left)
            walk(n.right)
        elif isinstance(n, Neg):
            walk(n.operand)
        elif isinstance(n, Comparison):
            walk(n.left)
            walk(n.right)
        elif isinstance(n, Between):
            walk(n.column)
            walk(n.lo)
            walk(n.hi)
        elif isinstance(n, BoolOp):
            walk(n.left)
            walk(n.right)

    walk(expr)
    if pred is not None:
        walk(pred)
    if group_column is not None:
        out.add(group_column)
    return out


def eval_expr(node: Expr, cols: dict):
    """Evaluate an expression over scalars or numpy column arrays."""
    if isinstance(node, Number):
        return node.value
    if isinstance(node, Column):
        return cols[node.name]
    if isinstance(node, Neg):
        return -eval_expr(node.operand, cols)
    if node.op == "+":
        return eval_expr(node.left, cols) + eval_expr(node.right, cols)
    if node.op == "-":
        return eval_expr(node.left, cols) - eval_expr(node.right, cols)
    return eval_expr(node.left, cols) * eval_expr(node.right, cols)


def eval_pred(node: Optional[Pred], cols: dict, n: Optional[int] = None):
    """Evaluate a predicate to bool (scalar) or bool array; absent => true."""
    if node is None:
        return True if n is None else np.ones(n, dtype=bool)
    if isinstance(node, Comparison):
        a, b = eval_expr(node.left, cols), eval_expr(node.right, cols)
        if node.op == "<":
            return a < b
        if node.op == "<=":
            return a <= b
        if node.op == ">":
            return a > b
        if node.op == ">=":
            return a >= b
        if node.op == "=":
            return a == b
        return a != b
    if isinstance(node, Between):
        v = eval_expr(node.column, cols)
        return (v >= eval_expr(node.lo, cols)) & (v <= eval_expr(node.hi, cols))
    a, b = eval_pred(node.left, cols, n), eval_pred(node.right, cols, n)
    return (a & b) if node.op == "AND" else (a | b)


def x_value(q: AggregateQuery, tup: dict) -> float:
    """Contribution of one tuple: expression value if the predicate holds, else 0."""
    if not eval_pred(q.predicate, tup):
        return 0.0
    v = float(eval_expr(q.expression, tup))
    if not np.isfinite(v):
        raise OverflowError(f"expression overflow on tuple {tup!r}")
    return v


def x_values(q: AggregateQuery, cols: dict, n: int) -> np.ndarray:
    """Vectorized x_value over a batch of column arrays of length n."""
    mask = eval_pred(q.predicate, cols, n)
    e = eval_expr(q.expression, cols)
    if np.isscalar(e) or getattr(e, "ndim", 0) == 0:
        e = np.full(n, float(e))
    return np.where(mask, e.astype(np.float64, copy=False), 0.0)
