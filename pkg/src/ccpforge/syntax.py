"""Abstract syntax, concrete grammar, printing and context addressing for CCP programs.

Terms are Herbrand terms with list sugar ([H|T] desugars to cons/nil) and an
arithmetic sum operator. Agents follow the grammar

    A ::= stop | tell(c) | ask(g) -> A + ... | A || A | p(t, ...)

where `+` binds tighter than `||` and parentheses override. Every value here is
immutable; all operations are pure functions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union


class CCPError(Exception):
    """Base class for all errors raised by the workbench."""


class ParseError(CCPError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {msg}" if line else msg)
        self.line, self.col = line, col


class PathError(CCPError):
    pass


# ---------------------------------------------------------------------------
# Terms


@dataclass(frozen=True)
class Var:
    name: str

    def __repr__(self):
        return self.name


@dataclass(frozen=True)
class Const:
    name: Union[str, int]

    def __repr__(self):
        return str(self.name)


@dataclass(frozen=True)
class Compound:
    functor: str
    args: tuple  # tuple[Term, ...]

    def __repr__(self):
        return pretty_term(self)


Term = Union[Var, Const, Compound]

NIL = Const("nil")
PLUS = "+"


def mk_cons(head: Term, tail: Term) -> Compound:
    return Compound("cons", (head, tail))


def is_int(t: Term) -> bool:
    return isinstance(t, Const) and isinstance(t.name, int)


def term_vars(t: Term) -> set[str]:
    if isinstance(t, Var):
        return {t.name}
    if isinstance(t, Const):
        return set()
    out: set[str] = set()
    for a in t.args:
        out |= term_vars(a)
    return out


def subst_term(t: Term, s: dict[str, Term]) -> Term:
    if isinstance(t, Var):
        return s.get(t.name, t)
    if isinstance(t, Const):
        return t
    return Compound(t.functor, tuple(subst_term(a, s) for a in t.args))


# ---------------------------------------------------------------------------
# Constraints: conjunctions of primitive atoms, plus the canonical false store.

CMP_OPS = ("<", "<=", ">", ">=")


@dataclass(frozen=True)
class Eq:
    lhs: Term
    rhs: Term

    def __repr__(self):
        return f"{pretty_term(self.lhs)}={pretty_term(self.rhs)}"


@dataclass(frozen=True)
class Neq:
    lhs: Term
    rhs: Term

    def __repr__(self):
        return f"{pretty_term(self.lhs)}/={pretty_term(self.rhs)}"


@dataclass(frozen=True)
class Cmp:
    op: str  # one of CMP_OPS
    lhs: Term
    rhs: Term

    def __repr__(self):
        return f"{pretty_term(self.lhs)}{self.op}{pretty_term(self.rhs)}"


@dataclass(frozen=True)
class PredAtom:
    """Uninterpreted constraint predicate, e.g. char(L)."""

    pred: str
    args: tuple

    def __repr__(self):
        return f"{self.pred}({','.join(pretty_term(a) for a in self.args)})"


Atom = Union[Eq, Neq, Cmp, PredAtom]


@dataclass(frozen=True)
class Constraint:
    """Quantifier-free conjunction; `false` is the canonical inconsistency."""

    atoms: tuple = ()
    false: bool = False

    def is_true(self) -> bool:
        return not self.false and not self.atoms

    def __repr__(self):
        return pretty_constraint(self)


TRUE_C = Constraint()
FALSE_C = Constraint(false=True)


def mk_conj(atoms: Iterable[Atom]) -> Constraint:
    return Constraint(tuple(atoms))


def conj(*cs: Constraint) -> Constraint:
    if any(c.false for c in cs):
        return FALSE_C
    out: list[Atom] = []
    for c in cs:
        out.extend(c.atoms)
    return Constraint(tuple(out))


def atom_vars(a: Atom) -> set[str]:
    if isinstance(a, PredAtom):
        out: set[str] = set()
        for t in a.args:
            out |= term_vars(t)
        return out
    return term_vars(a.lhs) | term_vars(a.rhs)


def constraint_vars(c: Constraint) -> set[str]:
    out: set[str] = set()
    for a in c.atoms:
        out |= atom_vars(a)
    return out


def subst_atom(a: Atom, s: dict[str, Term]) -> Atom:
    if isinstance(a, Eq):
        return Eq(subst_term(a.lhs, s), subst_term(a.rhs, s))
    if isinstance(a, Neq):
        return Neq(subst_term(a.lhs, s), subst_term(a.rhs, s))
    if isinstance(a, Cmp):
        return Cmp(a.op, subst_term(a.lhs, s), subst_term(a.rhs, s))
    return PredAtom(a.pred, tuple(subst_term(t, s) for t in a.args))


def subst_constraint(c: Constraint, s: dict[str, Term]) -> Constraint:
    if c.false or not s:
        return c
    return Constraint(tuple(subst_atom(a, s) for a in c.atoms))


# ---------------------------------------------------------------------------
# Guards: one outer existential block over a quantifier-free conjunction.


@dataclass(frozen=True)
class Guard:
    bound: tuple = ()  # tuple[str, ...]
    body: Constraint = field(default_factory=lambda: TRUE_C)

    def __post_init__(self):
        if len(set(self.bound)) != len(self.bound):
            raise CCPError(f"guard binds a variable twice: {self.bound}")

    def is_true(self) -> bool:
        return not self.bound and self.body.is_true()

    def is_false(self) -> bool:
        return self.body.false

    def __repr__(self):
        return pretty_guard(self)


def guard_free_vars(g: Guard) -> set[str]:
    return constraint_vars(g.body) - set(g.bound)


def freshen_guard(g: Guard, avoid: set[str]) -> Guard:
    """Rename bound variables away from `avoid` (capture avoidance)."""
    taken = set(avoid) | guard_free_vars(g) | set(g.bound)
    ren: dict[str, Term] = {}
    new_bound = []
    for b in g.bound:
        if b in avoid:
            nb = fresh_name(b, taken)
            taken.add(nb)
            ren[b] = Var(nb)
            new_bound.append(nb)
        else:
            new_bound.append(b)
    if not ren:
        return g
    return Guard(tuple(new_bound), subst_constraint(g.body, ren))


def subst_guard(g: Guard, s: dict[str, Term]) -> Guard:
    s2 = {k: v for k, v in s.items() if k not in g.bound}
    if not s2:
        return g
    ran: set[str] = set()
    for v in s2.values():
        ran |= term_vars(v)
    g = freshen_guard(g, ran & set(g.bound))
    s2 = {k: v for k, v in s.items() if k not in g.bound}
    return Guard(g.bound, subst_constraint(g.body, s2))


# ---------------------------------------------------------------------------
# Agents


@dataclass(frozen=True)
class Stop:
    def __repr__(self):
        return "stop"


@dataclass(frozen=True)
class Tell:
    payload: Constraint

    def __repr__(self):
        return f"tell({pretty_constraint(self.payload)})"


@dataclass(frozen=True)
class Choice:
    branches: tuple  # tuple[tuple[Guard, Agent], ...], at least one

    def __post_init__(self):
        if not self.branches:
            raise CCPError("a choice needs at least one branch")

    def __repr__(self):
        return pretty_agent(self)


@dataclass(frozen=True)
class Par:
    left: "Agent"
    right: "Agent"

    def __repr__(self):
        return pretty_agent(self)


@dataclass(frozen=True)
class Call:
    pred: str
    args: tuple = ()  # tuple[Term, ...]

    def __repr__(self):
        return pretty_agent(self)


Agent = Union[Stop, Tell, Choice, Par, Call]

STOP = Stop()


def par_all(agents: list) -> Agent:
    """Right-associated parallel composition of a nonempty list."""
    if not agents:
        raise CCPError("empty parallel composition")
    out = agents[-1]
    for a in reversed(agents[:-1]):
        out = Par(a, out)
    return out


def flatten_par(a: Agent) -> list[Agent]:
    """Members of the maximal parallel cluster rooted at `a`, left to right."""
    if isinstance(a, Par):
        return flatten_par(a.left) + flatten_par(a.right)
    return [a]


def agent_free_vars(a: Agent) -> set[str]:
    if isinstance(a, Stop):
        return set()
    if isinstance(a, Tell):
        return constraint_vars(a.payload)
    if isinstance(a, Call):
        out: set[str] = set()
        for t in a.args:
            out |= term_vars(t)
        return out
    if isinstance(a, Par):
        return agent_free_vars(a.left) | agent_free_vars(a.right)
    out = set()
    for g, b in a.branches:
        out |= guard_free_vars(g) | agent_free_vars(b)
    return out


def subst_agent(a: Agent, s: dict[str, Term]) -> Agent:
    if not s or isinstance(a, Stop):
        return a
    if isinstance(a, Tell):
        return Tell(subst_constraint(a.payload, s))
    if isinstance(a, Call):
        return Call(a.pred, tuple(subst_term(t, s) for t in a.args))
    if isinstance(a, Par):
        return Par(subst_agent(a.left, s), subst_agent(a.right, s))
    return Choice(tuple((subst_guard(g, s), subst_agent(b, s)) for g, b in a.branches))


def is_terminal(a: Agent) -> bool:
    """The paper's Stop class: only stop and || constructs."""
    if isinstance(a, Stop):
        return True
    if isinstance(a, Par):
        return is_terminal(a.left) and is_terminal(a.right)
    return False


# ---------------------------------------------------------------------------
# Declarations and programs


@dataclass(frozen=True)
class Declaration:
    pred: str
    params: tuple  # tuple[Term, ...]
    body: Agent

    def head(self) -> Call:
        return Call(self.pred, self.params)

    def __repr__(self):
        return pretty_decl(self)


def decl_free_vars(d: Declaration) -> set[str]:
    out = agent_free_vars(d.body)
    for t in d.params:
        out |= term_vars(t)
    return out


# Unspecified primitives used by the paper's examples; their behaviour is
# supplied by the interpreter's stub scenarios.
DEFAULT_STUBS = frozenset(
    {
        "get_token",
        "deliver_token",
        "read",
        "write",
        "broadcast",
        "make_new_bid_a",
        "make_new_bid_b",
    }
)


@dataclass(frozen=True)
class Program:
    decls: tuple  # tuple[Declaration, ...], one per predicate
    stubs: frozenset = DEFAULT_STUBS

    def __post_init__(self):
        seen: dict[str, Declaration] = {}
        for d in self.decls:
            if d.pred in seen:
                raise CCPError(f"duplicate declaration for {d.pred}")
            seen[d.pred] = d
        _check_arities(self)

    def decl(self, pred: str) -> Declaration:
        for d in self.decls:
            if d.pred == pred:
                return d
        raise CCPError(f"no declaration for {pred}")

    def has(self, pred: str) -> bool:
        return any(d.pred == pred for d in self.decls)

    def replace(self, new: Declaration) -> "Program":
        return Program(
            tuple(new if d.pred == new.pred else d for d in self.decls), self.stubs
        )

    def add(self, new: Declaration) -> "Program":
        return Program(self.decls + (new,), self.stubs)

    def __repr__(self):
        return pretty(self)


def _iter_terms(a: Agent) -> Iterator[Term]:
    if isinstance(a, Tell):
        for at in a.payload.atoms:
            yield from _atom_terms(at)
    elif isinstance(a, Call):
        yield from a.args
    elif isinstance(a, Par):
        yield from _iter_terms(a.left)
        yield from _iter_terms(a.right)
    elif isinstance(a, Choice):
        for g, b in a.branches:
            for at in g.body.atoms:
                yield from _atom_terms(at)
            yield from _iter_terms(b)


def _atom_terms(a: Atom) -> Iterator[Term]:
    if isinstance(a, PredAtom):
        yield from a.args
    else:
        yield a.lhs
        yield a.rhs


def _check_arities(p: Program) -> None:
    """One arity per functor and per predicate across the whole program."""
    functors: dict[str, int] = {}
    preds: dict[str, int] = {}

    def walk_term(t: Term):
        if isinstance(t, Compound):
            k = functors.setdefault(t.functor, len(t.args))
            if k != len(t.args):
                raise CCPError(
                    f"functor {t.functor} used with arities {k} and {len(t.args)}"
                )
            for a in t.args:
                walk_term(a)

    def note_call(pred: str, n: int):
        k = preds.setdefault(pred, n)
        if k != n:
            raise CCPError(f"predicate {pred} used with arities {k} and {n}")

    def walk_agent(a: Agent):
        for t in _iter_terms(a):
            walk_term(t)
        for c in _calls(a):
            note_call(c.pred, len(c.args))

    for d in p.decls:
        note_call(d.pred, len(d.params))
        for t in d.params:
            walk_term(t)
        walk_agent(d.body)
    for d in p.decls:
        for c in _calls(d.body):
            if not p.has(c.pred) and c.pred not in p.stubs:
                raise CCPError(f"call to undeclared, unstubbed predicate {c.pred}")


def _calls(a: Agent) -> Iterator[Call]:
    if isinstance(a, Call):
        yield a
    elif isinstance(a, Par):
        yield from _calls(a.left)
        yield from _calls(a.right)
    elif isinstance(a, Choice):
        for _, b in a.branches:
            yield from _calls(b)


# ---------------------------------------------------------------------------
# Context paths and contexts

ParL = ("parL",)
ParR = ("parR",)


def Branch(i: int) -> tuple:
    return ("branch", i)


Sel = tuple


@dataclass(frozen=True)
class ContextPath:
    decl: str
    steps: tuple = ()  # tuple[Sel, ...]

    def is_guarding(self) -> bool:
        return any(s[0] == "branch" for s in self.steps)

    def __repr__(self):
        return f"{self.decl}:{list(self.steps)}"


@dataclass(frozen=True)
class Context:
    """A declaration body with a hole at `steps` (the hole content removed)."""

    body: Agent
    steps: tuple

    def __repr__(self):
        return pretty_agent(plug(self, Call("__hole__", ())))


def resolve(a: Agent, steps: tuple) -> Agent:
    cur = a
    for s in steps:
        if s[0] == "parL":
            if not isinstance(cur, Par):
                raise PathError(f"parL selector at non-parallel agent {cur!r}")
            cur = cur.left
        elif s[0] == "parR":
            if not isinstance(cur, Par):
                raise PathError(f"parR selector at non-parallel agent {cur!r}")
            cur = cur.right
        elif s[0] == "branch":
            if not isinstance(cur, Choice):
                raise PathError(f"branch selector at non-choice agent {cur!r}")
            i = s[1]
            if not (0 <= i < len(cur.branches)):
                raise PathError(f"branch index {i} out of range")
            cur = cur.branches[i][1]
        else:
            raise PathError(f"unknown selector {s}")
    return cur


def replace_at(a: Agent, steps: tuple, new: Agent) -> Agent:
    if not steps:
        return new
    s, rest = steps[0], steps[1:]
    if s[0] == "parL":
        if not isinstance(a, Par):
            raise PathError(f"parL selector at non-parallel agent {a!r}")
        return Par(replace_at(a.left, rest, new), a.right)
    if s[0] == "parR":
        if not isinstance(a, Par):
            raise PathError(f"parR selector at non-parallel agent {a!r}")
        return Par(a.left, replace_at(a.right, rest, new))
    if s[0] == "branch":
        if not isinstance(a, Choice):
            raise PathError(f"branch selector at non-choice agent {a!r}")
        i = s[1]
        if not (0 <= i < len(a.branches)):
            raise PathError(f"branch index {i} out of range")
        g, b = a.branches[i]
        bs = list(a.branches)
        bs[i] = (g, replace_at(b, rest, new))
        return Choice(tuple(bs))
    raise PathError(f"unknown selector {s}")


def split(d: Declaration, path: ContextPath) -> tuple[Context, Agent]:
    """Split a declaration body into a context and the agent at the hole."""
    if path.decl != d.pred:
        raise PathError(f"path targets {path.decl}, declaration is {d.pred}")
    sub = resolve(d.body, path.steps)
    return Context(d.body, path.steps), sub


def plug(ctx: Context, a: Agent) -> Agent:
    return replace_at(ctx.body, ctx.steps, a)


def find_agents(a: Agent, want) -> list[tuple[tuple, Agent]]:
    """All (path, subagent) pairs, in preorder, satisfying the predicate."""
    out: list[tuple[tuple, Agent]] = []

    def walk(x: Agent, steps: tuple):
        if want(x):
            out.append((steps, x))
        if isinstance(x, Par):
            walk(x.left, steps + (ParL,))
            walk(x.right, steps + (ParR,))
        elif isinstance(x, Choice):
            for i, (_, b) in enumerate(x.branches):
                walk(b, steps + (Branch(i),))

    walk(a, ())
    return out


def context_free_vars(ctx: Context) -> set[str]:
    """Free variables of the context (the hole contributes nothing)."""
    marker = Call("__hole__", ())
    return agent_free_vars(plug(ctx, marker))


# ---------------------------------------------------------------------------
# Fresh names and renaming


_NAME_RX = re.compile(r"^(.*?)(\d*)$")


def fresh_name(base: str, taken: set[str]) -> str:
    stem = _NAME_RX.match(base).group(1) or "V"
    n = 1
    while True:
        cand = f"{stem}{n}"
        if cand not in taken:
            return cand
        n += 1


def rename_apart(d: Declaration, avoid: set[str]) -> Declaration:
    """A variant of d whose variables are disjoint from `avoid` (a bijection)."""
    vs = sorted(decl_free_vars(d))
    taken = set(avoid) | set(vs)
    ren: dict[str, Term] = {}
    for v in vs:
        if v in avoid:
            nv = fresh_name(v, taken)
            taken.add(nv)
            ren[v] = Var(nv)
    if not ren:
        return d
    return Declaration(
        d.pred, tuple(subst_term(t, ren) for t in d.params), subst_agent(d.body, ren)
    )


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RX = re.compile(
    r"""(?P<ws>\s+|%[^\n]*)
      | (?P<arrow><-|->)
      | (?P<op>\|\||/\\|/=|<=|>=|[+=<>|,.()\[\]])
      | (?P<int>-?\d+)
      | (?P<var>[A-Z][A-Za-z0-9_']*)
      | (?P<name>[a-z][A-Za-z0-9_']*)
    """,
    re.VERBOSE,
)

_KEYWORDS = {"stop", "tell", "ask", "exists", "true", "false"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, bol = 0, 1, 0
    while pos < len(src):
        m = _TOKEN_RX.match(src, pos)
        if not m:
            raise ParseError(f"unexpected character {src[pos]!r}", line, pos - bol + 1)
        kind = m.lastgroup
        text = m.group()
        if kind != "ws":
            toks.append(_Tok(kind, text, line, pos - bol + 1))
        nl = text.count("\n")
        if nl:
            line += nl
            bol = pos + text.rindex("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - bol + 1))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def at(self, text: str) -> bool:
        return self.peek().text == text and self.peek().kind != "eof"

    def at_kind(self, kind: str) -> bool:
        return self.peek().kind == kind

    def next(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t.text != text or t.kind == "eof":
            raise ParseError(f"expected {text!r}, found {t.text!r}", t.line, t.col)
        return self.next()

    def fail(self, msg: str):
        t = self.peek()
        raise ParseError(f"{msg} (found {t.text!r})", t.line, t.col)

    # -- programs

    def program(self, stubs: frozenset) -> Program:
        decls = []
        while not self.at_kind("eof"):
            decls.append(self.decl())
        return Program(tuple(decls), stubs)

    def decl(self) -> Declaration:
        t = self.peek()
        if not self.at_kind("name"):
            self.fail("expected a declaration head")
        name = self.next().text
        if name in _KEYWORDS:
            raise ParseError(f"reserved word {name!r} as predicate", t.line, t.col)
        params: tuple = ()
        if self.at("("):
            self.next()
            params = tuple(self.term_list())
            self.expect(")")
        self.expect("<-")
        body = self.agent()
        self.expect(".")
        return Declaration(name, params, body)

    # -- agents

    def agent(self) -> Agent:
        items = [self.alt()]
        while self.at("||"):
            self.next()
            items.append(self.alt())
        return par_all(items)

    def alt(self) -> Agent:
        if self.at("ask"):
            branches = [self.branch()]
            while self.at("+"):
                self.next()
                if not self.at("ask"):
                    self.fail("every choice summand must be an ask branch")
                branches.append(self.branch())
            return Choice(tuple(branches))
        return self.primary()

    def branch(self) -> tuple:
        self.expect("ask")
        self.expect("(")
        g = self.guard()
        self.expect(")")
        self.expect("->")
        body = self.branch_body()
        return (g, body)

    def branch_body(self) -> Agent:
        # `+` binds tighter than `||`: a branch body is a single item; nested
        # multi-branch choices and parallel bodies need parentheses.
        if self.at("ask"):
            return Choice((self.branch(),))
        return self.primary()

    def primary(self) -> Agent:
        t = self.peek()
        if self.at("stop"):
            self.next()
            return STOP
        if self.at("tell"):
            self.next()
            self.expect("(")
            c = self.constraint()
            self.expect(")")
            return Tell(c)
        if self.at("("):
            self.next()
            a = self.agent()
            self.expect(")")
            return a
        if self.at_kind("name"):
            name = self.next().text
            if name in _KEYWORDS:
                raise ParseError(f"reserved word {name!r} as call", t.line, t.col)
            args: tuple = ()
            if self.at("("):
                self.next()
                args = tuple(self.term_list())
                self.expect(")")
            return Call(name, args)
        self.fail("expected an agent")

    # -- guards and constraints

    def guard(self) -> Guard:
        if self.at("exists"):
            self.next()
            names = [self.var_name()]
            while self.at(","):
                self.next()
                names.append(self.var_name())
            self.expect(".")
            return Guard(tuple(names), self.constraint())
        return Guard((), self.constraint())

    def var_name(self) -> str:
        if not self.at_kind("var"):
            self.fail("expected a variable")
        return self.next().text

    def constraint(self) -> Constraint:
        atoms: list[Atom] = []
        false = False
        while True:
            if self.at("true"):
                self.next()
            elif self.at("false"):
                self.next()
                false = True
            else:
                atoms.append(self.prim())
            if self.at("/\\"):
                self.next()
                continue
            break
        if false:
            return FALSE_C
        return Constraint(tuple(atoms))

    def prim(self) -> Atom:
        lhs = self.term()
        t = self.peek()
        if t.text in ("=", "/=") + CMP_OPS and t.kind != "eof":
            op = self.next().text
            rhs = self.term()
            if op == "=":
                return Eq(lhs, rhs)
            if op == "/=":
                return Neq(lhs, rhs)
            return Cmp(op, lhs, rhs)
        # no relational operator: an uninterpreted constraint atom like char(L)
        if isinstance(lhs, Compound) and lhs.functor not in ("cons", PLUS):
            return PredAtom(lhs.functor, lhs.args)
        if isinstance(lhs, Const) and isinstance(lhs.name, str):
            return PredAtom(lhs.name, ())
        self.fail("expected a relational operator")

    # -- terms

    def term_list(self) -> list[Term]:
        out = [self.term()]
        while self.at(","):
            self.next()
            out.append(self.term())
        return out

    def term(self) -> Term:
        t = self.base_term()
        while self.at("+"):
            self.next()
            t = Compound(PLUS, (t, self.base_term()))
        return t

    def base_term(self) -> Term:
        t = self.peek()
        if self.at_kind("var"):
            return Var(self.next().text)
        if self.at_kind("int"):
            return Const(int(self.next().text))
        if self.at("["):
            return self.list_term()
        if self.at("("):
            self.next()
            inner = self.term()
            self.expect(")")
            return inner
        if self.at_kind("name"):
            name = self.next().text
            if name in _KEYWORDS:
                raise ParseError(f"reserved word {name!r} in a term", t.line, t.col)
            if self.at("("):
                self.next()
                args = tuple(self.term_list())
                self.expect(")")
                return Compound(name, args)
            return Const(name)
        self.fail("expected a term")

    def list_term(self) -> Term:
        self.expect("[")
        if self.at("]"):
            self.next()
            return NIL
        items = [self.term()]
        while self.at(","):
            self.next()
            items.append(self.term())
        tail: Term = NIL
        if self.at("|"):
            self.next()
            tail = self.term()
        self.expect("]")
        out = tail
        for it in reversed(items):
            out = mk_cons(it, out)
        return out


def parse_program(text: str, stubs: Iterable[str] = ()) -> Program:
    """Parse a program; undeclared calls must be registered stubs."""
    return _Parser(text).program(DEFAULT_STUBS | frozenset(stubs))


def parse_declarations(text: str) -> list[Declaration]:
    """Parse bare declarations (validated once merged into a program)."""
    p = _Parser(text)
    out = []
    while not p.at_kind("eof"):
        out.append(p.decl())
    return out


def parse_agent(text: str) -> Agent:
    p = _Parser(text)
    a = p.agent()
    if not p.at_kind("eof"):
        p.fail("trailing input after agent")
    return a


def parse_constraint(text: str) -> Constraint:
    p = _Parser(text)
    c = p.constraint()
    if not p.at_kind("eof"):
        p.fail("trailing input after constraint")
    return c


def parse_guard(text: str) -> Guard:
    p = _Parser(text)
    g = p.guard()
    if not p.at_kind("eof"):
        p.fail("trailing input after guard")
    return g


def parse_term(text: str) -> Term:
    p = _Parser(text)
    t = p.term()
    if not p.at_kind("eof"):
        p.fail("trailing input after term")
    return t


# ---------------------------------------------------------------------------
# Pretty printing.  parse(pretty(p)) is structurally equal to p.


def _list_parts(t: Term) -> tuple[list[Term], Term]:
    items: list[Term] = []
    while isinstance(t, Compound) and t.functor == "cons" and len(t.args) == 2:
        items.append(t.args[0])
        t = t.args[1]
    return items, t


def pretty_term(t: Term) -> str:
    if isinstance(t, Var):
        return t.name
    if isinstance(t, Const):
        if t == NIL:
            return "[]"
        return str(t.name)
    if t.functor == "cons" and len(t.args) == 2:
        items, tail = _list_parts(t)
        body = ",".join(pretty_term(i) for i in items)
        if tail == NIL:
            return f"[{body}]"
        return f"[{body}|{pretty_term(tail)}]"
    if t.functor == PLUS and len(t.args) == 2:
        lhs, rhs = t.args
        rs = pretty_term(rhs)
        if isinstance(rhs, Compound) and rhs.functor == PLUS:
            rs = f"({rs})"
        return f"{pretty_term(lhs)} + {rs}"
    return f"{t.functor}({','.join(pretty_term(a) for a in t.args)})"


def pretty_atom(a: Atom) -> str:
    if isinstance(a, Eq):
        return f"{pretty_term(a.lhs)} = {pretty_term(a.rhs)}"
    if isinstance(a, Neq):
        return f"{pretty_term(a.lhs)} /= {pretty_term(a.rhs)}"
    if isinstance(a, Cmp):
        return f"{pretty_term(a.lhs)} {a.op} {pretty_term(a.rhs)}"
    if not a.args:
        return a.pred
    return f"{a.pred}({','.join(pretty_term(t) for t in a.args)})"


def pretty_constraint(c: Constraint) -> str:
    if c.false:
        return "false"
    if not c.atoms:
        return "true"
    return " /\\ ".join(pretty_atom(a) for a in c.atoms)


def pretty_guard(g: Guard) -> str:
    if g.bound:
        return f"exists {','.join(g.bound)} . {pretty_constraint(g.body)}"
    return pretty_constraint(g.body)


def pretty_agent(a: Agent) -> str:
    if isinstance(a, Stop):
        return "stop"
    if isinstance(a, Tell):
        return f"tell({pretty_constraint(a.payload)})"
    if isinstance(a, Call):
        if not a.args:
            return a.pred
        return f"{a.pred}({','.join(pretty_term(t) for t in a.args)})"
    if isinstance(a, Par):
        ls = pretty_agent(a.left)
        if isinstance(a.left, Par):
            ls = f"({ls})"
        return f"{ls} || {pretty_agent(a.right)}"
    parts = []
    for g, b in a.branches:
        bs = pretty_agent(b)
        if isinstance(b, Par) or (isinstance(b, Choice) and len(b.branches) > 1):
            bs = f"({bs})"
        parts.append(f"ask({pretty_guard(g)}) -> {bs}")
    return " + ".join(parts)


def _pretty_agent_ml(a: Agent, indent: str) -> str:
    """Multi-line rendering: multi-branch choices get one line per branch."""
    if isinstance(a, Par):
        ls = _pretty_agent_ml(a.left, indent)
        if isinstance(a.left, Par):
            ls = f"({ls})"
        return f"{ls} || {_pretty_agent_ml(a.right, indent)}"
    if isinstance(a, Choice) and len(a.branches) > 1:
        inner = indent + "  "
        parts = []
        for g, b in a.branches:
            bs = _pretty_agent_ml(b, inner)
            if isinstance(b, Par) or (isinstance(b, Choice) and len(b.branches) > 1):
                bs = f"({bs})"
            parts.append(f"ask({pretty_guard(g)}) -> {bs}")
        sep = f"\n{inner}+ "
        return f"( {parts[0]}{sep}{sep.join(parts[1:]) if len(parts) > 2 else parts[1]})"
    if isinstance(a, Choice):
        g, b = a.branches[0]
        bs = _pretty_agent_ml(b, indent)
        if isinstance(b, Par) or (isinstance(b, Choice) and len(b.branches) > 1):
            bs = f"({bs})"
        return f"ask({pretty_guard(g)}) -> {bs}"
    return pretty_agent(a)


def pretty_decl(d: Declaration) -> str:
    head = pretty_agent(d.head())
    body = _pretty_agent_ml(d.body, "  ")
    if isinstance(d.body, Choice) and len(d.body.branches) > 1:
        # _pretty_agent_ml wraps multi-branch choices in parentheses already
        pass
    return f"{head} <- {body}."


def pretty(p: Program) -> str:
    return "\n".join(pretty_decl(d) for d in p.decls) + ("\n" if p.decls else "")


# ---------------------------------------------------------------------------
# Alpha/AC equality: structural match modulo a variable bijection, modulo
# associativity/commutativity of || and of /\ (the paper reorders both freely).


def _match_terms(s: Term, t: Term, fwd: dict, bwd: dict) -> bool:
    if isinstance(s, Var) and isinstance(t, Var):
        if s.name in fwd:
            return fwd[s.name] == t.name
        if t.name in bwd:
            return False
        fwd[s.name] = t.name
        bwd[t.name] = s.name
        return True
    if isinstance(s, Const) and isinstance(t, Const):
        return s == t
    if isinstance(s, Compound) and isinstance(t, Compound):
        if s.functor != t.functor or len(s.args) != len(t.args):
            return False
        return all(_match_terms(a, b, fwd, bwd) for a, b in zip(s.args, t.args))
    return False


def _match_multiset(xs, ys, match_one, fwd, bwd) -> bool:
    """Backtracking bijective matching of two item lists under a var bijection."""
    if len(xs) != len(ys):
        return False
    if not xs:
        return True
    x, rest = xs[0], xs[1:]
    for j, y in enumerate(ys):
        f2, b2 = dict(fwd), dict(bwd)
        if match_one(x, y, f2, b2) and _match_multiset(
            rest, ys[:j] + ys[j + 1 :], match_one, f2, b2
        ):
            fwd.clear()
            fwd.update(f2)
            bwd.clear()
            bwd.update(b2)
            return True
    return False


def _match_atom(a: Atom, b: Atom, fwd, bwd) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, PredAtom):
        if a.pred != b.pred or len(a.args) != len(b.args):
            return False
        return all(_match_terms(x, y, fwd, bwd) for x, y in zip(a.args, b.args))
    if isinstance(a, Cmp) and a.op != b.op:
        return False
    if isinstance(a, (Eq, Neq)):
        # = and /= are symmetric; try both orientations
        f2, b2 = dict(fwd), dict(bwd)
        if _match_terms(a.lhs, b.lhs, f2, b2) and _match_terms(a.rhs, b.rhs, f2, b2):
            fwd.clear(), fwd.update(f2), bwd.clear(), bwd.update(b2)
            return True
        f2, b2 = dict(fwd), dict(bwd)
        if _match_terms(a.lhs, b.rhs, f2, b2) and _match_terms(a.rhs, b.lhs, f2, b2):
            fwd.clear(), fwd.update(f2), bwd.clear(), bwd.update(b2)
            return True
        return False
    return _match_terms(a.lhs, b.lhs, fwd, bwd) and _match_terms(a.rhs, b.rhs, fwd, bwd)


def _match_constraint(c: Constraint, d: Constraint, fwd, bwd) -> bool:
    if c.false != d.false:
        return False
    if c.false:
        return True
    return _match_multiset(list(c.atoms), list(d.atoms), _match_atom, fwd, bwd)


def _match_guard(g: Guard, h: Guard, fwd, bwd) -> bool:
    if len(g.bound) != len(h.bound):
        return False
    # bound variables are local: extend the bijection just for the bodies
    f2, b2 = dict(fwd), dict(bwd)
    for x in g.bound:
        f2.pop(x, None)
    for y in h.bound:
        b2.pop(y, None)
    if not _match_constraint(g.body, h.body, f2, b2):
        return False
    # check the bound vars were matched among themselves
    for x in g.bound:
        if x in f2 and f2[x] not in h.bound:
            return False
    for y in h.bound:
        if y in b2 and b2[y] not in g.bound:
            return False
    # keep only outer-variable entries
    for k, v in f2.items():
        if k not in g.bound and v not in h.bound:
            if k in fwd and fwd[k] != v:
                return False
            fwd[k] = v
            bwd[v] = k
    return True


def _match_agent(a: Agent, b: Agent, fwd, bwd) -> bool:
    if isinstance(a, Par) or isinstance(b, Par):
        return _match_multiset(flatten_par(a), flatten_par(b), _match_agent, fwd, bwd)
    if type(a) is not type(b):
        return False
    if isinstance(a, Stop):
        return True
    if isinstance(a, Tell):
        return _match_constraint(a.payload, b.payload, fwd, bwd)
    if isinstance(a, Call):
        if a.pred != b.pred or len(a.args) != len(b.args):
            return False
        return all(_match_terms(x, y, fwd, bwd) for x, y in zip(a.args, b.args))
    if len(a.branches) != len(b.branches):
        return False
    for (g1, b1), (g2, b2_) in zip(a.branches, b.branches):
        if not _match_guard(g1, g2, fwd, bwd) or not _match_agent(b1, b2_, fwd, bwd):
            return False
    return True


def alpha_ac_equal_agents(a: Agent, b: Agent) -> bool:
    return _match_agent(a, b, {}, {})


def alpha_ac_equal_decls(d1: Declaration, d2: Declaration) -> bool:
    if d1.pred != d2.pred or len(d1.params) != len(d2.params):
        return False
    fwd: dict = {}
    bwd: dict = {}
    for s, t in zip(d1.params, d2.params):
        if not _match_terms(s, t, fwd, bwd):
            return False
    return _match_agent(d1.body, d2.body, fwd, bwd)


def alpha_ac_equal(p1: Program, p2: Program) -> bool:
    """Program equality modulo variable renaming and AC of || and /\\."""
    names1 = sorted(d.pred for d in p1.decls)
    names2 = sorted(d.pred for d in p2.decls)
    if names1 != names2:
        return False
    return all(alpha_ac_equal_decls(p1.decl(n), p2.decl(n)) for n in names1)
