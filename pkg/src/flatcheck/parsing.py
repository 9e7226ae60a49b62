"""Recursive-descent parser for the infix expression grammar.

::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | '+' unary | power
    power   := atom ('^' exponent)?
    exponent:= '-'? INT | '(' '-'? INT ')'
    atom    := NUMBER | IDENT | FUNC '(' expr ')' | '(' expr ')'

``**`` is accepted as a synonym of ``^``. Numbers are kept exact: ``0.25``
becomes the rational 1/4. Positions in errors are 1-based.
"""

from __future__ import annotations

import re
from fractions import Fraction

from . import exprcore as ec
from .errors import ExprSyntaxError, UnknownSymbol

FUNCTIONS = {"sin": ec.sin, "cos": ec.cos, "tan": ec.tan}

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^(),])
""", re.VERBOSE)


def tokenize(text: str):
    """List of ``(kind, value, position)``; an ``end`` token closes the list."""
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", position=pos + 1,
                                  expected="operand or operator")
        kind = m.lastgroup
        if kind != "ws":
            value = m.group(kind)
            if value == "**":
                value = "^"
            out.append((kind, value, pos + 1))
        pos = m.end()
    out.append(("end", "", len(text) + 1))
    return out


class _Parser:
    def __init__(self, text, symbols, functions, bindings):
        self.text = text
        self.bindings = bindings
        self.tokens = tokenize(text)
        self.i = 0
        self.symbols = symbols
        self.functions = functions

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok = self.peek()
        if tok[1] != value or tok[0] == "end":
            raise ExprSyntaxError(f"expected {value!r}, found {tok[1] or 'end of input'!r}",
                                  position=tok[2], expected=value)
        return self.take()

    def parse(self):
        e = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExprSyntaxError(f"unexpected {tok[1]!r}", position=tok[2], expected="end of input")
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            e = e * rhs if op == "*" else e / rhs
        return e

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.take()
            return -self.unary()
        if tok[0] == "op" and tok[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return base ** self.exponent()
        return base

    def exponent(self):
        paren = False
        if self.peek()[1] == "(":
            self.take()
            paren = True
        sign = 1
        if self.peek()[1] == "-":
            self.take()
            sign = -1
        tok = self.peek()
        if tok[0] != "num" or not tok[1].isdigit():
            raise ExprSyntaxError("exponent must be an integer literal", position=tok[2],
                                  expected="integer")
        self.take()
        if paren:
            self.expect(")")
        return sign * int(tok[1])

    def atom(self):
        tok = self.peek()
        kind, value, pos = tok
        if kind == "num":
            self.take()
            return ec.const(Fraction(value))
        if kind == "ident":
            self.take()
            if value in self.functions:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return self.functions[value](arg)
            if value in self.bindings:
                return self.bindings[value]
            if self.symbols is not None and value not in self.symbols:
                raise UnknownSymbol(value, position=pos)
            return ec.symbol(value)
        if kind == "op" and value == "(":
            self.take()
            e = self.expr()
            self.expect(")")
            return e
        raise ExprSyntaxError(f"expected an operand, found {value or 'end of input'!r}",
                              position=pos, expected="operand")


def parse_expr(text: str, symbols=None, functions=None, bindings=None) -> ec.Expr:
    """Parse ``text`` into a DAG node.

    ``symbols`` is the set of admissible identifiers (``None`` admits any).
    ``functions`` can extend or replace the unary function table, and
    ``bindings`` maps names to expressions that are inlined where they occur.
    """
    table = FUNCTIONS if functions is None else {**FUNCTIONS, **functions}
    allowed = None if symbols is None else set(symbols)
    return _Parser(text, allowed, table, dict(bindings or {})).parse()
