"""Recursive-descent parser for the query DSL, plus the matching printer.

Grammar (version 1)::

    expr    = term , { ( "+" | "-" ) , term } ;
    term    = unary , { ( "*" | "/" ) , unary } ;
    unary   = "-" , unary | power ;
    power   = atom , [ "^" , unary ] ;          (* right operand must fold to a constant *)
    atom    = number | call | identifier | "(" , expr , ")" ;
    call    = ( "exp" | "ln" | "sqrt" | "sigmoid" ) , "(" , expr , ")" ;
    number  = digits , [ "." , [ digits ] ] , [ exponent ]
            | "." , digits , [ exponent ] ;
    exponent = ( "e" | "E" ) , [ "+" | "-" ] , digits ;
    identifier = ( letter | "_" ) , { letter | digit | "_" } ;

Whitespace between tokens is ignored. Input must be ASCII. ``-a^2`` reads as
``-(a^2)`` and ``a^2^3`` as ``a^(2^3)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from psens.expr import ExprGraph, GraphError, NodeId, NodeKind

FUNCTIONS = {
    "exp": NodeKind.EXP,
    "ln": NodeKind.LN,
    "sqrt": NodeKind.SQRT,
    "sigmoid": NodeKind.SIGMOID,
}

MAX_DEPTH = 100

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<num>(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)


class ParseError(ValueError):
    """Syntax error; ``offset`` is the byte offset of the offending input."""

    def __init__(self, message: str, offset: int, source: str = ""):
        self.message = message
        self.offset = offset
        self.source = source
        super().__init__(f"{message} at offset {offset}")

    def diagnostic(self) -> str:
        """Multi-line message with a caret under the offending position."""
        if not self.source:
            return str(self)
        line = self.source.replace("\n", " ").replace("\t", " ")
        return f"{self}\n  {line}\n  {' ' * self.offset}^"


@dataclass(frozen=True)
class ParseResult:
    root: NodeId
    variables: list[str]


@dataclass(frozen=True)
class _Tok:
    kind: str  # "num", "ident", "op" or "end"
    text: str
    offset: int


def _tokenize(source: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            ch = source[pos]
            what = "non-ASCII character" if ord(ch) > 127 else f"unexpected character {ch!r}"
            raise ParseError(what, pos, source)
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(source)))
    return toks


class _Parser:
    def __init__(self, g: ExprGraph, source: str):
        self.g = g
        self.source = source
        self.toks = _tokenize(source)
        self.pos = 0
        self.depth = 0
        self.variables: list[str] = []

    @property
    def tok(self) -> _Tok:
        return self.toks[self.pos]

    def error(self, message: str, tok: _Tok | None = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ParseError(f"{message}, found {found}", tok.offset, self.source)

    def accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.pos += 1
            return True
        return False

    def expect(self, text: str) -> None:
        if not self.accept(text):
            self.error(f"expected {text!r}")

    def build(self, kind, children, tok, exponent=None) -> NodeId:
        try:
            return self.g.apply(kind, children, exponent=exponent)
        except GraphError as exc:
            raise ParseError(str(exc), tok.offset, self.source) from None

    def parse(self) -> ParseResult:
        root = self.expr()
        if self.tok.kind != "end":
            self.error("expected operator or end of input")
        return ParseResult(root, self.variables)

    def expr(self) -> NodeId:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            self.error("expression nested too deeply")
        left = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            tok = self.tok
            self.pos += 1
            right = self.term()
            kind = NodeKind.ADD if tok.text == "+" else NodeKind.SUB
            left = self.build(kind, (left, right), tok)
        self.depth -= 1
        return left

    def term(self) -> NodeId:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            tok = self.tok
            self.pos += 1
            right = self.unary()
            kind = NodeKind.MUL if tok.text == "*" else NodeKind.DIV
            left = self.build(kind, (left, right), tok)
        return left

    def unary(self) -> NodeId:
        if self.tok.kind == "op" and self.tok.text == "-":
            tok = self.tok
            self.pos += 1
            self.depth += 1
            if self.depth > MAX_DEPTH:
                self.error("expression nested too deeply")
            operand = self.unary()
            self.depth -= 1
            return self.build(NodeKind.NEG, (operand,), tok)
        return self.power()

    def power(self) -> NodeId:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            tok = self.tok
            self.pos += 1
            exp_start = self.tok
            self.depth += 1
            if self.depth > MAX_DEPTH:
                self.error("expression nested too deeply")
            exponent = self.unary()
            self.depth -= 1
            value = self.g.const_value(exponent)
            if value is None:
                raise ParseError("exponent of '^' must be a constant", exp_start.offset, self.source)
            return self.build(NodeKind.POW, (base,), tok, exponent=value)
        return base

    def atom(self) -> NodeId:
        tok = self.tok
        if tok.kind == "num":
            self.pos += 1
            try:
                return self.g.constant(float(tok.text))
            except GraphError:
                raise ParseError(f"numeric literal {tok.text!r} is not finite", tok.offset, self.source) from None
        if tok.kind == "ident":
            self.pos += 1
            if self.tok.kind == "op" and self.tok.text == "(":
                if tok.text not in FUNCTIONS:
                    raise ParseError(f"unknown function {tok.text!r}", tok.offset, self.source)
                self.pos += 1
                arg = self.expr()
                self.expect(")")
                return self.build(FUNCTIONS[tok.text], (arg,), tok)
            if tok.text in FUNCTIONS:
                self.error(f"expected '(' after function name {tok.text!r}")
            if tok.text not in self.variables:
                self.variables.append(tok.text)
            return self.g.variable(tok.text)
        if self.accept("("):
            inner = self.expr()
            self.expect(")")
            return inner
        self.error("expected number, identifier, function call or '('")


def parse_expression(g: ExprGraph, source: str | bytes) -> ParseResult:
    """Parse ``source`` into ``g``; raises :class:`ParseError` on bad input."""
    if isinstance(source, (bytes, bytearray)):
        for i, byte in enumerate(source):
            if byte > 127:
                raise ParseError("non-ASCII byte", i)
        source = source.decode("ascii")
    if not source.strip():
        raise ParseError("empty expression", 0, source)
    return _Parser(g, source).parse()


_PRINT_OPS = {NodeKind.ADD: "+", NodeKind.SUB: "-", NodeKind.MUL: "*", NodeKind.DIV: "/"}


def to_source(g: ExprGraph, root: NodeId) -> str:
    """Fully parenthesised DSL text that parses back to ``root`` in ``g``."""
    text: dict[int, str] = {}
    for i in g.reachable([root]):
        n = g.node(g.ref(i))
        kind = n.kind
        if kind is NodeKind.CONST:
            s = repr(n.payload)
            text[i] = f"({s})" if s.startswith("-") else s
        elif kind is NodeKind.VAR:
            text[i] = n.payload
        elif kind in _PRINT_OPS:
            a, b = n.children
            text[i] = f"({text[a]} {_PRINT_OPS[kind]} {text[b]})"
        elif kind is NodeKind.NEG:
            text[i] = f"(-{text[n.children[0]]})"
        elif kind is NodeKind.POW:
            text[i] = f"({text[n.children[0]]}^({n.payload!r}))"
        else:
            text[i] = f"{kind.value}({text[n.children[0]]})"
    return text[root.index]
