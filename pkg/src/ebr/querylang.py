"""S-expression Boolean query language.

Grammar::

    expr := (and expr+) | (or expr+) | (term ns:value)
          | (nn key :radius r [:nprobe p]) | (nn key :topk k [:nprobe p])

Attributes of ``nn`` may appear in any order. Term values are case
sensitive and may themselves contain ``:``; the namespace may not.
"""
import re
from dataclasses import dataclass
from typing import Optional, Union

from .errors import QuerySyntaxError

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_INTEGER = re.compile(r"\+?\d+")
MAX_DEPTH = 256


@dataclass(frozen=True)
class Term:
    namespace: str
    value: str

    @property
    def key(self):
        return f"{self.namespace}:{self.value}"


@dataclass(frozen=True)
class Nn:
    key: str
    radius: Optional[float] = None
    nprobe: Optional[int] = None
    top_k: Optional[int] = None


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


QueryNode = Union[And, Or, Term, Nn]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    path: str

    def __str__(self):
        return f"{self.path}: {self.code}: {self.message}"


def term(text):
    """Build a Term from ``"ns:value"``."""
    ns, _, value = text.partition(":")
    return Term(ns, value)


def has_nn(q):
    if isinstance(q, Nn):
        return True
    if isinstance(q, (And, Or)):
        return any(has_nn(c) for c in q.children)
    return False


def iter_nodes(q, path="root"):
    """Yield ``(path, node)`` pairs in pre-order."""
    yield path, q
    if isinstance(q, (And, Or)):
        for i, c in enumerate(q.children):
            yield from iter_nodes(c, f"{path}/{i}")


# -- tokenizer ---------------------------------------------------------------

def _tokenize(text):
    """Return a list of ``(kind, value, char_offset)`` tokens."""
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()":
            tokens.append((c, c, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append(("atom", text[i:j], i))
            i = j
    tokens.append(("eof", None, n))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def error(self, message, char_offset):
        raise QuerySyntaxError(message, len(self.text[:char_offset].encode("utf-8")))

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind, what):
        tok = self.take()
        if tok[0] != kind:
            found = "end of input" if tok[0] == "eof" else repr(tok[1])
            self.error(f"expected {what}, found {found}", tok[2])
        return tok

    def parse(self):
        node = self.expr(0)
        tok = self.peek()
        if tok[0] != "eof":
            self.error(f"unexpected trailing input {tok[1]!r}", tok[2])
        return node

    def expr(self, depth):
        if depth > MAX_DEPTH:
            self.error("query nested too deeply", self.peek()[2])
        self.expect("(", "'('")
        _, op, op_at = self.expect("atom", "operator")
        if op in ("and", "or"):
            children = []
            while self.peek()[0] == "(":
                children.append(self.expr(depth + 1))
            if not children:
                self.error(f"'{op}' needs at least one sub-expression", self.peek()[2])
            self.expect(")", "')' or '('")
            return And(children) if op == "and" else Or(children)
        if op == "term":
            return self.term()
        if op == "nn":
            return self.nn()
        self.error(f"unknown operator {op!r}", op_at)

    def term(self):
        _, text, at = self.expect("atom", "term 'namespace:value'")
        ns, sep, value = text.partition(":")
        if not sep:
            self.error(f"malformed term {text!r}: missing ':'", at)
        if not ns:
            self.error("empty term namespace", at)
        if not value:
            self.error("empty term value", at + len(ns) + 1)
        self.expect(")", "')' after term")
        return Term(ns, value)

    def nn(self):
        _, key, key_at = self.expect("atom", "embedding key")
        if key.startswith(":"):
            self.error("expected embedding key before attributes", key_at)
        attrs = {}
        while self.peek()[0] == "atom":
            _, name, name_at = self.take()
            if name not in (":radius", ":topk", ":nprobe"):
                self.error(f"unknown nn attribute {name!r}", name_at)
            if name in attrs:
                self.error(f"duplicate attribute {name}", name_at)
            _, raw, raw_at = self.expect("atom", f"value for {name}")
            if name == ":radius":
                if not _NUMBER.fullmatch(raw):
                    self.error(f"radius must be a number, got {raw!r}", raw_at)
                val = float(raw)
                if not 0.0 < val <= 2.0:
                    self.error(f"radius {raw} outside (0, 2]", raw_at)
            else:
                if not _INTEGER.fullmatch(raw):
                    self.error(f"{name} must be a positive integer, got {raw!r}", raw_at)
                val = int(raw)
                if val < 1:
                    self.error(f"{name} must be >= 1", raw_at)
            attrs[name] = val
        end = self.expect(")", "nn attribute or ')'")
        if (":radius" in attrs) == (":topk" in attrs):
            self.error("nn needs exactly one of :radius or :topk", end[2])
        return Nn(key, radius=attrs.get(":radius"), nprobe=attrs.get(":nprobe"),
                  top_k=attrs.get(":topk"))


def parse_query(text):
    """Parse query text into an AST; raises QuerySyntaxError with a byte offset."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise QuerySyntaxError("query is not valid UTF-8", exc.start) from None
    return _Parser(text).parse()


def print_query(q):
    if isinstance(q, Term):
        return f"(term {q.namespace}:{q.value})"
    if isinstance(q, Nn):
        parts = ["nn", q.key]
        if q.radius is not None:
            parts += [":radius", repr(float(q.radius))]
        if q.top_k is not None:
            parts += [":topk", str(q.top_k)]
        if q.nprobe is not None:
            parts += [":nprobe", str(q.nprobe)]
        return "(" + " ".join(parts) + ")"
    op = "and" if isinstance(q, And) else "or"
    return f"({op} " + " ".join(print_query(c) for c in q.children) + ")"


def _bad_token(s):
    return not s or any(c.isspace() or c in "()" for c in s)


def validate_query(q, known_embedding_keys=None):
    """Return a list of Diagnostics; empty means the query is servable.

    ``known_embedding_keys=None`` skips the key lookup check.
    """
    out = []
    for path, node in iter_nodes(q):
        if isinstance(node, (And, Or)):
            if len(node.children) == 0:
                out.append(Diagnostic("empty-operator", "and/or needs at least one child", path))
        elif isinstance(node, Term):
            if _bad_token(node.namespace) or ":" in node.namespace:
                out.append(Diagnostic("malformed-term", f"bad namespace {node.namespace!r}", path))
            if _bad_token(node.value):
                out.append(Diagnostic("malformed-term", f"bad value {node.value!r}", path))
        elif isinstance(node, Nn):
            if _bad_token(node.key) or node.key.startswith(":"):
                out.append(Diagnostic("malformed-key", f"bad embedding key {node.key!r}", path))
            elif known_embedding_keys is not None and node.key not in known_embedding_keys:
                out.append(Diagnostic("unknown-embedding-key", f"no embedding {node.key!r}", path))
            if (node.radius is None) == (node.top_k is None):
                out.append(Diagnostic("nn-mode", "exactly one of radius/topk must be set", path))
            if node.radius is not None and not 0.0 < node.radius <= 2.0:
                out.append(Diagnostic("radius-out-of-range", f"radius {node.radius} outside (0, 2]", path))
            if node.top_k is not None and node.top_k < 1:
                out.append(Diagnostic("topk-out-of-range", f"topk {node.top_k} < 1", path))
            if node.nprobe is not None and node.nprobe < 1:
                out.append(Diagnostic("nprobe-out-of-range", f"nprobe {node.nprobe} < 1", path))
        else:
            out.append(Diagnostic("unknown-node", f"not a query node: {type(node).__name__}", path))
    return out
