"""Decidable constraint domain: Herbrand equalities and disequalities plus
bounded-integer comparisons.

The computational domain interprets `=` as identity on ground terms built from
identifier constants/functors (an infinite supply of constants) together with
the integers of a finite window (default [-8, 8]).  Comparison atoms hold only
between window integers; the binary `+` denotes integer addition and a ground
sum outside the window denotes no domain element, so any atom mentioning it is
false.  Equations the structural rules cannot settle (sums with several
unknowns) are deferred to a bounded-enumeration arithmetic subsystem.
Uninterpreted predicate atoms (e.g. char/1) are carried conservatively:
satisfiable, entailed only when present in the store, never disentailed.

Stores are immutable solved forms; inconsistency is the canonical `false`
store, never an exception (eventual-tell semantics).
"""

from __future__ import annotations

import itertools
import logging
from collections import Counter
from dataclasses import dataclass

from .syntax import (
    Atom,
    CCPError,
    Cmp,
    Compound,
    Const,
    Constraint,
    Eq,
    FALSE_C,
    Guard,
    Neq,
    PLUS,
    PredAtom,
    Term,
    Var,
    atom_vars,
    fresh_name,
    guard_free_vars,
    mk_conj,
    pretty_atom,
    pretty_term,
    subst_atom,
    subst_constraint,
    subst_term,
    term_vars,
)

log = logging.getLogger("ccpforge.constraints")

DEFAULT_INT_RANGE = (-8, 8)

# beyond this many enumerated integer variables the solver refuses rather
# than guesses
MAX_ENUM_VARS = 5


class ResourceLimit(CCPError):
    pass


# ---------------------------------------------------------------------------
# Substitutions


@dataclass(frozen=True)
class Subst:
    """Idempotent substitution with Dom and Ran disjoint."""

    bindings: tuple = ()  # tuple[(str, Term)], sorted by variable name

    def __post_init__(self):
        dom = {v for v, _ in self.bindings}
        ran: set[str] = set()
        for _, t in self.bindings:
            ran |= term_vars(t)
        if dom & ran:
            raise CCPError(f"substitution not idempotent: {sorted(dom & ran)}")

    @staticmethod
    def of(mapping: dict) -> "Subst":
        return Subst(tuple(sorted(mapping.items())))

    def mapping(self) -> dict:
        return dict(self.bindings)

    def dom(self) -> set[str]:
        return {v for v, _ in self.bindings}

    def ran(self) -> set[str]:
        out: set[str] = set()
        for _, t in self.bindings:
            out |= term_vars(t)
        return out

    def apply(self, t: Term) -> Term:
        return subst_term(t, self.mapping())

    def __repr__(self):
        inner = ", ".join(f"{v}->{pretty_term(t)}" for v, t in self.bindings)
        return "{" + inner + "}"


def mgu(ss, ts) -> Subst | None:
    """Relevant idempotent most general unifier of two term tuples, or None.

    Purely structural (occurs-check enforced).  `+` has no syntactic mgu under
    the arithmetic reading, so callers that rely on the unifier being a domain
    mgu must reject sums beforehand.
    """
    if len(ss) != len(ts):
        return None
    binds: dict[str, Term] = {}

    def walk(t: Term) -> Term:
        while isinstance(t, Var) and t.name in binds:
            t = binds[t.name]
        return t

    def resolve(t: Term) -> Term:
        t = walk(t)
        if isinstance(t, Compound):
            return Compound(t.functor, tuple(resolve(a) for a in t.args))
        return t

    def unify(a: Term, b: Term) -> bool:
        a, b = walk(a), walk(b)
        if a == b:
            return True
        if isinstance(a, Var):
            if a.name in term_vars(resolve(b)):
                return False
            binds[a.name] = b
            return True
        if isinstance(b, Var):
            return unify(b, a)
        if isinstance(a, Compound) and isinstance(b, Compound):
            if a.functor != b.functor or len(a.args) != len(b.args):
                return False
            return all(unify(x, y) for x, y in zip(a.args, b.args))
        return False

    for s, t in zip(ss, ts):
        if not unify(s, t):
            return None
    return Subst.of({v: resolve(Var(v)) for v in binds})


# ---------------------------------------------------------------------------
# Arithmetic terms


def is_int_const(t: Term) -> bool:
    return isinstance(t, Const) and isinstance(t.name, int)


def is_sum(t: Term) -> bool:
    return isinstance(t, Compound) and t.functor == PLUS and len(t.args) == 2


class _Overflow(Exception):
    pass


def eval_term(t: Term, rng: tuple) -> Term:
    """Evaluate ground sums (deeply); _Overflow when a sum leaves the window."""
    if isinstance(t, Compound):
        args = tuple(eval_term(a, rng) for a in t.args)
        if t.functor == PLUS and len(args) == 2 and all(map(is_int_const, args)):
            v = args[0].name + args[1].name
            if not (rng[0] <= v <= rng[1]):
                raise _Overflow()
            return Const(v)
        return Compound(t.functor, args)
    return t


def is_arith_term(t: Term) -> bool:
    """Integer-sorted shape: int literal, variable, or sum of such."""
    if is_int_const(t) or isinstance(t, Var):
        return True
    return is_sum(t) and all(is_arith_term(a) for a in t.args)


def sums_well_sorted(t: Term) -> bool:
    """Every sum subterm has integer-sorted arguments."""
    if is_sum(t):
        return is_arith_term(t)
    if isinstance(t, Compound):
        return all(sums_well_sorted(a) for a in t.args)
    return True


def contains_sum(t: Term) -> bool:
    if is_sum(t):
        return True
    if isinstance(t, Compound):
        return any(contains_sum(a) for a in t.args)
    return False


def sum_vars(t: Term) -> set[str]:
    """Variables occurring under a + anywhere inside t."""
    if is_sum(t):
        return term_vars(t)
    if isinstance(t, Compound):
        out: set[str] = set()
        for a in t.args:
            out |= sum_vars(a)
        return out
    return set()


def _sum_subterms(t: Term) -> list[Term]:
    """Maximal sum subterms of t."""
    if is_sum(t):
        return [t]
    if isinstance(t, Compound):
        out: list[Term] = []
        for a in t.args:
            out.extend(_sum_subterms(a))
        return out
    return []


def _linear_form(t: Term) -> tuple[Counter, int]:
    """A +-tree as (variable multiplicities, constant part)."""
    if is_int_const(t):
        return Counter(), t.name
    if isinstance(t, Var):
        return Counter({t.name: 1}), 0
    v1, c1 = _linear_form(t.args[0])
    v2, c2 = _linear_form(t.args[1])
    return v1 + v2, c1 + c2


# ---------------------------------------------------------------------------
# Stores


FALSE_GUARD = Guard((), FALSE_C)


@dataclass(frozen=True)
class Store:
    """Solved form: idempotent bindings, irredundant disequalities, deferred
    arithmetic atoms, uninterpreted predicate atoms; or the false store."""

    eqs: tuple = ()  # tuple[(str, Term)] sorted by variable
    diseqs: tuple = ()  # tuple[(Term, Term)] canonically ordered, sorted
    arith: tuple = ()  # tuple[Atom] (Cmp, multi-unknown Eq), sorted by render
    preds: tuple = ()  # tuple[PredAtom], sorted by render
    false: bool = False

    def is_true(self) -> bool:
        return not (self.false or self.eqs or self.diseqs or self.arith or self.preds)

    def binding(self) -> dict:
        return dict(self.eqs)

    def vars(self) -> set[str]:
        out: set[str] = set()
        for v, t in self.eqs:
            out.add(v)
            out |= term_vars(t)
        for s, t in self.diseqs:
            out |= term_vars(s) | term_vars(t)
        for a in self.arith:
            out |= atom_vars(a)
        for a in self.preds:
            out |= atom_vars(a)
        return out

    def arith_vars(self) -> set[str]:
        """Variables forced to integer sort by comparisons or sums."""
        out: set[str] = set()
        for a in self.arith:
            out |= atom_vars(a)
        for _, t in self.eqs:
            out |= sum_vars(t)
        for s, t in self.diseqs:
            out |= sum_vars(s) | sum_vars(t)
        return out

    def constraint(self) -> Constraint:
        """The store as a quantifier-free conjunction."""
        if self.false:
            return FALSE_C
        atoms: list[Atom] = [Eq(Var(v), t) for v, t in self.eqs]
        atoms += [Neq(s, t) for s, t in self.diseqs]
        atoms += list(self.arith) + list(self.preds)
        return mk_conj(atoms)

    def __repr__(self):
        return store_text(self)


EMPTY_STORE = Store()
FALSE_STORE = Store(false=True)


def store_text(s: Store) -> str:
    """Canonical text form: sorted bindings, e.g. `X=a /\\ Y=f(a) /\\ Z/=b`."""
    if s.false:
        return "false"
    if s.is_true():
        return "true"
    parts = [f"{v}={pretty_term(t)}" for v, t in s.eqs]
    parts += [f"{pretty_term(a)}/={pretty_term(b)}" for a, b in s.diseqs]
    parts += [pretty_atom(a).replace(" ", "") for a in s.arith]
    parts += [pretty_atom(a).replace(" ", "") for a in s.preds]
    return " /\\ ".join(parts)


def _canon_pair(s: Term, t: Term) -> tuple:
    a, b = pretty_term(s), pretty_term(t)
    return (s, t) if a <= b else (t, s)


class _Solver:
    """Worklist normalizer building a solved form."""

    def __init__(self, rng: tuple):
        self.rng = rng
        self.binds: dict[str, Term] = {}
        self.diseqs: set[tuple] = set()
        self.arith: set[Atom] = set()
        self.preds: set[PredAtom] = set()
        self.false = False
        self.queue: list[Atom] = []

    def load_store(self, s: Store):
        if s.false:
            self.false = True
            return
        self.queue.extend(Eq(Var(v), t) for v, t in s.eqs)
        self.queue.extend(Neq(a, b) for a, b in s.diseqs)
        self.queue.extend(s.arith)
        self.queue.extend(s.preds)

    def load_constraint(self, c: Constraint):
        if c.false:
            self.false = True
            return
        self.queue.extend(c.atoms)

    def norm(self, t: Term) -> Term:
        t = subst_term(t, self.binds)
        try:
            t = eval_term(t, self.rng)
        except _Overflow:
            self.false = True
            return t
        if not sums_well_sorted(t):
            self.false = True
        return t

    def run(self) -> Store:
        while self.queue and not self.false:
            self.step(self.queue.pop())
        if self.false:
            return FALSE_STORE
        eqs = tuple(sorted(self.binds.items()))
        diseqs = tuple(
            sorted(self.diseqs, key=lambda p: (pretty_term(p[0]), pretty_term(p[1])))
        )
        arith = tuple(sorted(self.arith, key=pretty_atom))
        preds = tuple(sorted(self.preds, key=pretty_atom))
        return Store(eqs, diseqs, arith, preds)

    def bind(self, v: str, t: Term):
        self.binds[v] = t
        for w, u in list(self.binds.items()):
            nu = self.norm(u)
            if self.false:
                return
            self.binds[w] = nu
        # anything the binding touches goes back on the worklist
        for pair in list(self.diseqs):
            self.diseqs.discard(pair)
            self.queue.append(Neq(pair[0], pair[1]))
        for a in list(self.arith):
            self.arith.discard(a)
            self.queue.append(a)
        for a in list(self.preds):
            self.preds.discard(a)
            self.queue.append(a)

    def step(self, a: Atom):
        if isinstance(a, Eq):
            self.eq(self.norm(a.lhs), self.norm(a.rhs))
        elif isinstance(a, Neq):
            self.neq(self.norm(a.lhs), self.norm(a.rhs))
        elif isinstance(a, Cmp):
            self.cmp(a.op, self.norm(a.lhs), self.norm(a.rhs))
        else:
            self.preds.add(PredAtom(a.pred, tuple(self.norm(t) for t in a.args)))

    def eq(self, s: Term, t: Term):
        if self.false:
            return
        if s == t:
            # identical terms still assert denotation when they mention an
            # unresolved sum: keep the definedness of each sum subterm
            if contains_sum(s) and term_vars(s):
                for sub in _sum_subterms(s):
                    self.arith.add(Eq(sub, sub))
            return
        if is_sum(s) or is_sum(t):
            if not (is_arith_term(s) and is_arith_term(t)):
                self.false = True
                return
            if isinstance(s, Var) and s.name not in term_vars(t):
                self.bind(s.name, t)
                return
            if isinstance(t, Var) and t.name not in term_vars(s):
                self.bind(t.name, s)
                return
            self.linear(s, t)
            return
        if isinstance(s, Var) and isinstance(t, Var):
            self.bind(t.name, s)  # right variable points at the left one
            return
        if isinstance(s, Var):
            if s.name in term_vars(t):
                self.false = True  # occurs check: no finite Herbrand solution
                return
            self.bind(s.name, t)
            return
        if isinstance(t, Var):
            self.eq(t, s)
            return
        if isinstance(s, Compound) and isinstance(t, Compound):
            if s.functor != t.functor or len(s.args) != len(t.args):
                self.false = True
                return
            for x, y in zip(s.args, t.args):
                self.queue.append(Eq(x, y))
            return
        self.false = True  # distinct constants, or constant vs compound

    def linear(self, s: Term, t: Term):
        """Arithmetic equation with an occurs-check cycle or no variable side:
        normalize to sum(a_i * X_i) = k and solve or defer."""
        vs_l, c_l = _linear_form(s)
        vs_r, c_r = _linear_form(t)
        coeff = Counter(vs_l)
        coeff.subtract(vs_r)
        coeff = Counter({v: n for v, n in coeff.items() if n})
        k = c_r - c_l
        if not coeff:
            if k != 0:
                self.false = True
            else:
                for side in (s, t):
                    if term_vars(side):
                        for sub in _sum_subterms(side):
                            self.arith.add(Eq(sub, sub))
            return
        if len(coeff) == 1:
            ((v, n),) = coeff.items()
            if k % n != 0 or not (self.rng[0] <= k // n <= self.rng[1]):
                self.false = True
                return
            sol = Const(k // n)
            if not (term_vars(s) | term_vars(t)) - {v}:
                # fully determined: the sides must denote under the solution
                try:
                    eval_term(subst_term(s, {v: sol}), self.rng)
                    eval_term(subst_term(t, {v: sol}), self.rng)
                except _Overflow:
                    self.false = True
                    return
            else:
                # cancellation assumed the other variables denote integers:
                # keep the original equation so they stay constrained
                self.arith.add(Eq(s, t))
            self.bind(v, sol)
            return
        self.arith.add(Eq(s, t))

    def neq(self, s: Term, t: Term):
        if self.false:
            return
        if s == t:
            self.false = True
            return
        if not (term_vars(s) or term_vars(t)):
            return  # ground and distinct: trivially true, drop
        self.diseqs.add(_canon_pair(s, t))

    def cmp(self, op: str, lhs: Term, rhs: Term):
        if self.false:
            return
        if is_int_const(lhs) and is_int_const(rhs):
            if not _cmp_eval(op, lhs.name, rhs.name):
                self.false = True
            return
        if not (is_arith_term(lhs) and is_arith_term(rhs)):
            self.false = True  # comparison on a non-integer is false
            return
        self.arith.add(Cmp(op, lhs, rhs))


def _cmp_eval(op: str, x: int, y: int) -> bool:
    return {"<": x < y, "<=": x <= y, ">": x > y, ">=": x >= y}[op]


def conjoin(c: Store, d: Constraint, rng: tuple = DEFAULT_INT_RANGE) -> Store:
    """Solved form of c /\\ d; the false store on inconsistency, never an error."""
    if c.false or d.false:
        return FALSE_STORE
    sv = _Solver(rng)
    sv.load_store(c)
    sv.load_constraint(d)
    out = sv.run()
    if not out.false and not _arith_ok(out, rng):
        return FALSE_STORE
    return out


def store_of(c: Constraint, rng: tuple = DEFAULT_INT_RANGE) -> Store:
    return conjoin(EMPTY_STORE, c, rng)


def conjoin_stores(a: Store, b: Store, rng: tuple = DEFAULT_INT_RANGE) -> Store:
    return conjoin(a, b.constraint(), rng)


# ---------------------------------------------------------------------------
# Arithmetic subsystem: bounded enumeration


def _int_eval(t: Term, val: dict) -> int | None:
    if is_int_const(t):
        return t.name
    if isinstance(t, Var):
        return val.get(t.name)
    if is_sum(t):
        a = _int_eval(t.args[0], val)
        b = _int_eval(t.args[1], val)
        if a is None or b is None:
            return None
        return a + b
    return None


def _arith_atom_holds(a: Atom, val: dict, rng: tuple) -> bool:
    if isinstance(a, (Eq, Cmp)):
        x, y = _int_eval(a.lhs, val), _int_eval(a.rhs, val)
        if x is None or y is None:
            return False
        if not (rng[0] <= x <= rng[1] and rng[0] <= y <= rng[1]):
            return False
        return x == y if isinstance(a, Eq) else _cmp_eval(a.op, x, y)
    if isinstance(a, Neq):
        x, y = _int_eval(a.lhs, val), _int_eval(a.rhs, val)
        if x is None or y is None:
            return True  # not integer-settled: the Herbrand side handles it
        if not (rng[0] <= x <= rng[1] and rng[0] <= y <= rng[1]):
            return False  # a non-denoting side falsifies the atom
        return x != y
    return True


def _arith_system(s: Store) -> tuple[list[Atom], list[str]]:
    """Deferred arithmetic atoms plus disequalities over arithmetic variables,
    with integer-sorted bindings expanded."""
    avars = s.arith_vars()
    atoms: list[Atom] = list(s.arith)
    for v, t in s.eqs:
        if is_arith_term(t) and (
            sum_vars(t) or (v in avars and not is_int_const(t))
        ):
            atoms.append(Eq(Var(v), t))
            avars |= {v} | term_vars(t)
        elif sum_vars(t):
            # structural binding around sums: only their definedness matters
            for sub in _sum_subterms(t):
                atoms.append(Eq(sub, sub))
                avars |= term_vars(sub)
    # any atom of the store holds only if its sums denote
    for d0, d1 in s.diseqs:
        for side in (d0, d1):
            for sub in _sum_subterms(side):
                atoms.append(Eq(sub, sub))
                avars |= term_vars(sub)
    for p in s.preds:
        for arg in p.args:
            for sub in _sum_subterms(arg):
                atoms.append(Eq(sub, sub))
                avars |= term_vars(sub)
    for d0, d1 in s.diseqs:
        vs = term_vars(d0) | term_vars(d1)
        if vs and vs <= avars and is_arith_term(d0) and is_arith_term(d1):
            atoms.append(Neq(d0, d1))
    names = set()
    for a in atoms:
        names |= atom_vars(a)
    return atoms, sorted(names)


def _enum_sat(atoms: list[Atom], names: list[str], rng: tuple) -> bool:
    """Backtracking search for an integer valuation satisfying all atoms."""
    if len(names) > MAX_ENUM_VARS:
        raise ResourceLimit(
            f"arithmetic subsystem with {len(names)} variables exceeds the "
            f"enumeration cap ({MAX_ENUM_VARS})"
        )
    need = [(a, atom_vars(a)) for a in atoms]

    def go(i: int, val: dict) -> bool:
        bound = set(val)
        for a, vs in need:
            if vs <= bound and not _arith_atom_holds(a, val, rng):
                return False
        if i == len(names):
            return True
        for v in range(rng[0], rng[1] + 1):
            val[names[i]] = v
            if go(i + 1, val):
                return True
        del val[names[i]]
        return False

    return go(0, {})


def _arith_ok(s: Store, rng: tuple) -> bool:
    atoms, names = _arith_system(s)
    if not atoms:
        return True
    # independent components are separable
    remaining = list(atoms)
    while remaining:
        comp = [remaining.pop()]
        vs = atom_vars(comp[0])
        changed = True
        while changed:
            changed = False
            for a in remaining[:]:
                if atom_vars(a) & vs:
                    vs |= atom_vars(a)
                    comp.append(a)
                    remaining.remove(a)
                    changed = True
        if not _enum_sat(comp, sorted(vs), rng):
            return False
    return True


def satisfiable(c, rng: tuple = DEFAULT_INT_RANGE) -> bool:
    """True iff some valuation over the Herbrand universe and the integer
    window satisfies c (a Store or a Constraint).

    Solved equalities are always satisfiable; disequalities between distinct
    solved terms are jointly satisfiable by assigning pairwise-distinct fresh
    constants; only the arithmetic subsystem can still fail.
    """
    s = c if isinstance(c, Store) else store_of(c, rng)
    if s.false:
        return False
    return _arith_ok(s, rng)


# ---------------------------------------------------------------------------
# Entailment: D |= c -> exists(bound) body


def _freshen_bound(g: Guard, avoid: set) -> tuple[Constraint, set]:
    ren: dict[str, Term] = {}
    taken = set(avoid) | set(g.bound)
    flex: set[str] = set()
    for b in g.bound:
        nb = fresh_name(b, taken)
        taken.add(nb)
        ren[b] = Var(nb)
        flex.add(nb)
    return subst_constraint(g.body, ren), flex


class _Match:
    """One-sided matching: only flexible variables may be instantiated."""

    def __init__(self, flex: set, arith_names: set):
        self.flex = set(flex)
        self.arith_names = set(arith_names)
        self.theta: dict[str, Term] = {}
        self.obligations: list[Atom] = []

    def subst(self, t: Term) -> Term:
        return subst_term(t, self.theta)

    def is_arith_eq(self, s: Term, t: Term) -> bool:
        for x in (s, t):
            if is_sum(x) or is_int_const(x):
                return True
            if isinstance(x, Var) and x.name in self.arith_names:
                return True
        return False

    def assign(self, v: str, t: Term):
        self.theta[v] = t
        for k in list(self.theta):
            if k != v:
                self.theta[k] = subst_term(self.theta[k], {v: t})

    def eq(self, s: Term, t: Term) -> str:
        """-> 'done' | 'false' | 'stuck'; may defer to arithmetic obligations."""
        s, t = self.subst(s), self.subst(t)
        if s == t:
            if contains_sum(s) and term_vars(s):
                # identity of a partial term still asserts denotation
                for sub in _sum_subterms(s):
                    self.obligations.append(Eq(sub, sub))
            return "done"
        if self.is_arith_eq(s, t):
            if is_arith_term(s) and is_arith_term(t):
                self.obligations.append(Eq(s, t))
                return "done"
            return "false"
        if isinstance(s, Var) and s.name in self.flex:
            if s.name in term_vars(t):
                return "false"
            self.assign(s.name, t)
            return "done"
        if isinstance(t, Var) and t.name in self.flex:
            return self.eq(t, s)
        if isinstance(s, Compound) and isinstance(t, Compound):
            if s.functor != t.functor or len(s.args) != len(t.args):
                return "false"
            saved_theta = dict(self.theta)
            saved_obl = list(self.obligations)
            stuck = False
            for x, y in zip(s.args, t.args):
                r = self.eq(x, y)
                if r == "false":
                    return "false"
                if r == "stuck":
                    stuck = True
            if stuck:
                self.theta = saved_theta
                self.obligations = saved_obl
                return "stuck"
            return "done"
        if isinstance(s, Var) or isinstance(t, Var):
            return "stuck"  # rigid variable against a different term
        return "false"


def entails(c: Store, g: Guard, rng: tuple = DEFAULT_INT_RANGE) -> bool:
    if c.false:
        return True
    if g.is_false():
        return False
    body, flex = _freshen_bound(g, c.vars() | guard_free_vars(g))

    binds = c.binding()

    def norm(t: Term) -> Term:
        t = subst_term(t, binds)
        try:
            return eval_term(t, rng)
        except _Overflow:
            return Compound("'overflow", ())

    arith_names = c.arith_vars()
    for a in body.atoms:
        if isinstance(a, Cmp):
            arith_names |= atom_vars(a)
        if not isinstance(a, PredAtom):
            arith_names |= sum_vars(a.lhs) | sum_vars(a.rhs)

    m = _Match(flex, arith_names)

    def overflowed(*ts: Term) -> bool:
        # a ground sum that left the window denotes nothing: the atom is false
        return any(
            isinstance(s, Compound) and s.functor == "'overflow"
            for t in ts
            for s in _subterms(t)
        )

    for a in body.atoms:
        if isinstance(a, PredAtom):
            if any(overflowed(norm(t)) for t in a.args):
                return False
        elif overflowed(norm(a.lhs), norm(a.rhs)):
            return False

    # pass 1: structural equations, to a fixpoint
    eqs = [(norm(a.lhs), norm(a.rhs)) for a in body.atoms if isinstance(a, Eq)]
    pending = eqs
    while pending:
        nxt = []
        progressed = False
        for s, t in pending:
            r = m.eq(s, t)
            if r == "false":
                return False
            if r == "stuck":
                nxt.append((s, t))
            else:
                progressed = True
        if not progressed:
            return False  # a rigid variable would have to be instantiated
        pending = nxt

    # pass 2: the other atoms
    herb_diseqs: list[Neq] = []
    for a in body.atoms:
        if isinstance(a, Eq):
            continue
        if isinstance(a, PredAtom):
            pa = PredAtom(a.pred, tuple(m.subst(norm(t)) for t in a.args))
            if not _pred_entailed(c, pa, m):
                return False
        elif isinstance(a, Cmp):
            m.obligations.append(Cmp(a.op, m.subst(norm(a.lhs)), m.subst(norm(a.rhs))))
        else:
            herb_diseqs.append(Neq(m.subst(norm(a.lhs)), m.subst(norm(a.rhs))))

    obligations = [
        subst_atom(a, m.theta) if not isinstance(a, PredAtom) else a
        for a in m.obligations
    ]
    herb_diseqs = [subst_atom(a, m.theta) for a in herb_diseqs]

    # remaining flexible variables: integer-sorted ones join the enumeration;
    # pure Herbrand ones are witnessed by pairwise-distinct fresh constants
    arith_obl_vars: set[str] = set()
    for a in obligations:
        arith_obl_vars |= atom_vars(a)
    left_flex = {v for v in flex if v not in m.theta}
    flex_arith = sorted(
        v for v in left_flex if v in arith_obl_vars or v in arith_names
    )
    fresh_map = {
        v: Const(f"'w{i}") for i, v in enumerate(sorted(left_flex - set(flex_arith)))
    }
    obligations = [subst_atom(a, fresh_map) for a in obligations]
    herb_diseqs = [subst_atom(a, fresh_map) for a in herb_diseqs]

    for a in herb_diseqs:
        if a.lhs == a.rhs:
            return False  # never both denoting and different
        # a true disequality needs its sums to denote in every model
        for side in (a.lhs, a.rhs):
            for sub in _sum_subterms(side):
                obligations.append(Eq(sub, sub))
        vs = term_vars(a.lhs) | term_vars(a.rhs)
        if vs & set(flex_arith):
            obligations.append(a)
            continue
        if _mentions_fresh(a.lhs) or _mentions_fresh(a.rhs):
            continue  # a fresh-constant side differs from everything else
        if satisfiable(conjoin(c, mk_conj([Eq(a.lhs, a.rhs)]), rng), rng):
            return False

    # an obligation that already sits verbatim in the store is entailed
    present = set(c.arith)
    diseq_set = set(c.diseqs)
    kept = []
    for a in obligations:
        if a in present:
            continue
        if isinstance(a, Neq) and ((a.lhs, a.rhs) in diseq_set or (a.rhs, a.lhs) in diseq_set):
            continue
        kept.append(a)
    obligations = kept

    if not obligations:
        return True

    # For every valuation of the rigid variables consistent with c, some
    # integer valuation of the flexible ones must satisfy the obligations.
    # Rigid integer-sorted variables range over the window; other rigid
    # variables additionally range over marker constants standing for
    # arbitrary non-integers (enough markers to cover coincidence patterns).
    # Only the store's arithmetic component connected to the obligations can
    # constrain them.
    store_arith = c.arith_vars()
    sys_atoms, _ = _arith_system(c)
    reach: set[str] = set()
    for a in obligations:
        reach |= atom_vars(a)
    used_atoms: list[Atom] = []
    remaining = list(sys_atoms)
    changed = True
    while changed:
        changed = False
        for a in remaining[:]:
            if atom_vars(a) & reach:
                reach |= atom_vars(a)
                used_atoms.append(a)
                remaining.remove(a)
                changed = True
    rigid = sorted(reach - flex)
    rigid_set = set(rigid)
    for s, t in c.diseqs:
        vs = term_vars(s) | term_vars(t)
        if vs and vs <= rigid_set:
            used_atoms.append(Neq(s, t))
    if len(rigid) > MAX_ENUM_VARS or len(flex_arith) > MAX_ENUM_VARS:
        raise ResourceLimit("entailment arithmetic enumeration too large")

    window = list(range(rng[0], rng[1] + 1))
    markers = [Const(f"'m{i}") for i in range(sum(1 for v in rigid if v not in store_arith))]

    def values_for(v: str):
        if v in store_arith:
            return window
        return window + markers

    def obligations_ok(val: dict) -> bool:
        for combo in itertools.product(window, repeat=len(flex_arith)):
            v2 = dict(val)
            v2.update(zip(flex_arith, combo))
            if all(_strict_atom(a, v2, rng) for a in obligations):
                return True
        return False

    for combo in itertools.product(*[values_for(v) for v in rigid]):
        val = dict(zip(rigid, combo))
        if not all(_strict_atom(a, val, rng) for a in used_atoms):
            continue
        if not obligations_ok(val):
            return False
    return True


def _strict_eval(t: Term, val: dict, rng: tuple):
    """Value of t under a valuation (ints or marker constants); None when the
    term does not denote (a sum over non-integers or out of the window)."""
    if isinstance(t, Var):
        return val[t.name]
    if is_int_const(t):
        return t.name
    if isinstance(t, Const):
        return t
    if is_sum(t):
        a = _strict_eval(t.args[0], val, rng)
        b = _strict_eval(t.args[1], val, rng)
        if isinstance(a, int) and isinstance(b, int):
            v = a + b
            return v if rng[0] <= v <= rng[1] else None
        return None
    args = [_strict_eval(a, val, rng) for a in t.args]
    if any(a is None for a in args):
        return None
    return Compound(t.functor, tuple(Const(a) if isinstance(a, int) else a for a in args))


def _strict_atom(a: Atom, val: dict, rng: tuple) -> bool:
    if isinstance(a, PredAtom):
        return True
    x = _strict_eval(a.lhs, val, rng)
    y = _strict_eval(a.rhs, val, rng)
    if x is None or y is None:
        return False
    if isinstance(a, Eq):
        return x == y
    if isinstance(a, Neq):
        return x != y
    return isinstance(x, int) and isinstance(y, int) and _cmp_eval(a.op, x, y)


def _subterms(t: Term) -> set:
    out = {t}
    if isinstance(t, Compound):
        for a in t.args:
            out |= _subterms(a)
    return out


def _mentions_fresh(t: Term) -> bool:
    if isinstance(t, Const):
        return isinstance(t.name, str) and t.name.startswith("'w")
    if isinstance(t, Compound):
        return any(_mentions_fresh(a) for a in t.args)
    return False


def _pred_entailed(c: Store, pa: PredAtom, m: _Match) -> bool:
    """Uninterpreted atoms are entailed only when present in the store."""
    for q in c.preds:
        if q.pred != pa.pred or len(q.args) != len(pa.args):
            continue
        saved_theta = dict(m.theta)
        saved_obl = list(m.obligations)
        if all(m.eq(x, y) == "done" for x, y in zip(pa.args, q.args)):
            return True
        m.theta = saved_theta
        m.obligations = saved_obl
    return False


def disentails(c: Store, g: Guard, rng: tuple = DEFAULT_INT_RANGE) -> bool:
    """True iff c /\\ body(g) is unsatisfiable however the bound variables are
    instantiated: exactly unsatisfiability of the conjunction here, since the
    bound variables are simply taken fresh."""
    if c.false:
        return False
    body, _ = _freshen_bound(g, c.vars() | guard_free_vars(g))
    if any(isinstance(a, PredAtom) for a in body.atoms):
        return False  # uninterpreted atoms are never refuted
    return not satisfiable(conjoin(c, body, rng), rng)


# ---------------------------------------------------------------------------
# Projection


def project(c: Store, keep, rng: tuple = DEFAULT_INT_RANGE, warn: bool = True) -> Guard:
    """Existential projection onto `keep`, canonicalized, with the hidden
    variables reachable from kept bindings retained in an existential block.

    Exact on the equality fragment.  Disequality/arithmetic atoms over
    unreachable hidden variables are dropped; a bounded check logs a precision
    warning when the drop is not provably exact.
    """
    keep = set(keep)
    if c.false:
        return FALSE_GUARD
    binds = c.binding()

    # variable-variable bindings form alias classes; prefer a kept variable as
    # the representative so kept variables never appear bound to hidden ones
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for v, t in binds.items():
        if isinstance(t, Var):
            parent[find(v)] = find(t.name)
    classes: dict[str, list[str]] = {}
    for x in list(parent):
        classes.setdefault(find(x), []).append(x)

    ren: dict[str, Term] = {}
    alias_eqs: list[Atom] = []
    for members in classes.values():
        kept_m = sorted(m for m in members if m in keep)
        rep = kept_m[0] if kept_m else sorted(members)[0]
        for m in members:
            if m != rep:
                ren[m] = Var(rep)
        for m in kept_m[1:] if rep in keep else kept_m:
            alias_eqs.append(Eq(Var(m), Var(rep)))

    atoms: list[Atom] = sorted(alias_eqs, key=pretty_atom)
    hidden_order: list[str] = []

    def note_hidden(t: Term):
        for v in _vars_in_order(t):
            if v not in keep and v not in hidden_order:
                hidden_order.append(v)

    for v in sorted(keep):
        if v in binds and not isinstance(binds[v], Var):
            t = subst_term(binds[v], ren)
            atoms.append(Eq(Var(v), t))
            note_hidden(t)
    visible = keep | set(hidden_order)

    rest: list[Atom] = []
    dropped: list[Atom] = []
    for s, t in c.diseqs:
        a = subst_atom(Neq(s, t), ren)
        (rest if atom_vars(a) <= visible else dropped).append(a)
    for a in c.arith:
        a = subst_atom(a, ren)
        (rest if atom_vars(a) <= visible else dropped).append(a)
    for a in c.preds:
        a = subst_atom(a, ren)
        (rest if atom_vars(a) <= visible else dropped).append(a)

    if dropped and warn and not _drop_exact(c, dropped, visible, rng):
        log.warning(
            "projection dropped constraints on hidden variables: %s",
            "; ".join(pretty_atom(a) for a in dropped),
        )

    canon: dict[str, Term] = {}
    names: list[str] = []
    n = 1
    for h in hidden_order:
        while True:
            cand = f"E{n}"
            n += 1
            if cand not in keep:
                break
        canon[h] = Var(cand)
        names.append(cand)
    atoms = [subst_atom(a, canon) for a in atoms]
    rest = sorted((subst_atom(a, canon) for a in rest), key=pretty_atom)
    return Guard(tuple(names), mk_conj(atoms + rest))


def projected_text(p: Guard) -> str:
    """Compact canonical text of a projection: `exists E1 . Y=f(a,E1)`."""
    if p.body.false:
        body = "false"
    elif not p.body.atoms:
        body = "true"
    else:
        body = " /\\ ".join(pretty_atom(a).replace(" ", "") for a in p.body.atoms)
    if p.bound:
        return f"exists {','.join(p.bound)} . {body}"
    return body


def _vars_in_order(t: Term) -> list[str]:
    if isinstance(t, Var):
        return [t.name]
    if isinstance(t, Const):
        return []
    out: list[str] = []
    for a in t.args:
        for v in _vars_in_order(a):
            if v not in out:
                out.append(v)
    return out


def _drop_exact(c: Store, dropped: list, visible: set, rng: tuple) -> bool:
    """Bounded check that the dropped atoms hold for some grounding of their
    hidden variables whatever the visible ones are (then dropping is exact)."""
    if any(isinstance(a, PredAtom) for a in dropped):
        return False
    hid: set[str] = set()
    for a in dropped:
        hid |= atom_vars(a) - visible
    avars = c.arith_vars()
    if not (hid & avars) and all(isinstance(a, Neq) for a in dropped):
        # each hidden variable can take a fresh constant, satisfying every
        # disequality it occurs in
        per_var = Counter()
        for a in dropped:
            for v in atom_vars(a) - visible:
                per_var[v] += 1
        return all(n >= 0 for n in per_var.values())
    names = sorted(hid)
    if len(names) > MAX_ENUM_VARS:
        return False
    try:
        return _enum_sat([a for a in dropped], names, rng)
    except ResourceLimit:
        return False


# ---------------------------------------------------------------------------
# Existentially quantified constraints and context equivalence


def econstraint_conj(*parts: Guard) -> Guard:
    """Conjunction of existentially quantified constraints, renaming the
    bound blocks apart."""
    free: set[str] = set()
    for p in parts:
        free |= guard_free_vars(p)
    bound: list[str] = []
    atoms: list[Atom] = []
    false = False
    taken = set(free)
    for p in parts:
        if p.body.false:
            false = True
            continue
        ren: dict[str, Term] = {}
        for b in p.bound:
            if b in taken:
                nb = fresh_name(b, taken)
            else:
                nb = b
            taken.add(nb)
            bound.append(nb)
            if nb != b:
                ren[b] = Var(nb)
        atoms.extend(subst_constraint(p.body, ren).atoms)
    if false:
        return FALSE_GUARD
    return Guard(tuple(bound), mk_conj(atoms))


def as_store(p: Guard, rng: tuple = DEFAULT_INT_RANGE) -> Store:
    """An existential constraint as a store over fresh witnesses for its block."""
    body, _ = _freshen_bound(p, guard_free_vars(p))
    return store_of(body, rng)


def entails_projected(p1: Guard, p2: Guard, rng: tuple = DEFAULT_INT_RANGE) -> bool:
    """D |= p1 -> p2 for existentially quantified constraints."""
    return entails(as_store(p1, rng), p2, rng)


def equiv_within(c, c2, pcc, zvars, rng: tuple = DEFAULT_INT_RANGE) -> bool:
    """D |= exists_{-Z}(pcc /\\ c) <-> exists_{-Z}(pcc /\\ c2).

    Arguments may be Constraints or Guards; existential blocks are renamed
    apart and the outer closure hides them along with everything not in Z."""

    def as_guard(x) -> Guard:
        return x if isinstance(x, Guard) else Guard((), x)

    zvars = set(zvars)
    s1 = as_store(econstraint_conj(as_guard(pcc), as_guard(c)), rng)
    s2 = as_store(econstraint_conj(as_guard(pcc), as_guard(c2)), rng)
    if s1.false or s2.false:
        return s1.false and s2.false
    p1 = project(s1, zvars, rng, warn=False)
    p2 = project(s2, zvars, rng, warn=False)
    if p1 == p2:
        return True
    return entails_projected(p1, p2, rng) and entails_projected(p2, p1, rng)
