"""Unfold/fold transformation operations with machine-checked applicability
conditions, produced-constraint calculators, and replayable scripts.

Parallel composition is matched modulo associativity/commutativity: the
operations that the literature writes as C[tell(s=t) || B], C[A || Sum ...]
or C[A] locate their shapes inside the maximal parallel cluster around the
addressed node, which is how the worked examples use them.

Every operation is a pure Program -> Program function; failed applications
raise XformError and never produce a half-modified program.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

from .constraints import (
    DEFAULT_INT_RANGE,
    Subst,
    conjoin,
    contains_sum,
    econstraint_conj,
    entails,
    equiv_within,
    projected_text,
    project,
    as_store,
    satisfiable,
    store_of,
)
from .interp import NO_STUBS, Stubs, productive, requires_var
from .syntax import (
    Agent,
    Branch,
    Call,
    CCPError,
    Choice,
    Const,
    Constraint,
    Context,
    ContextPath,
    Declaration,
    Eq,
    Guard,
    Par,
    ParL,
    ParR,
    Program,
    STOP,
    Stop,
    TRUE_C,
    Tell,
    Term,
    Var,
    agent_free_vars,
    alpha_ac_equal_agents,
    constraint_vars,
    context_free_vars,
    decl_free_vars,
    flatten_par,
    fresh_name,
    guard_free_vars,
    mk_conj,
    parse_agent,
    parse_constraint,
    parse_guard,
    parse_program,
    parse_term,
    plug,
    pretty_agent,
    pretty_guard,
    resolve,
    replace_at,
    split,
    subst_agent,
    subst_guard,
    subst_term,
    term_vars,
)


class XformError(CCPError):
    pass


# ---------------------------------------------------------------------------
# Produced constraints


def pca(a: Agent) -> Constraint:
    """Produced constraint of an agent: tells and parallel compositions only."""
    if isinstance(a, Tell):
        return a.payload
    if isinstance(a, Par):
        from .syntax import conj

        return conj(pca(a.left), pca(a.right))
    return TRUE_C


def _pc_walk(body: Agent, steps: tuple, weakest: bool) -> Guard:
    parts: list[Guard] = []
    cur = body
    for sel in steps:
        if sel[0] == "parL":
            if not weakest:
                parts.append(Guard((), pca(cur.right)))
            cur = cur.left
        elif sel[0] == "parR":
            if not weakest:
                parts.append(Guard((), pca(cur.left)))
            cur = cur.right
        else:
            g, b = cur.branches[sel[1]]
            parts.append(g)
            cur = b
    return econstraint_conj(*parts) if parts else Guard((), TRUE_C)


def pc(ctx: Context) -> Guard:
    """Produced constraint of a context: everything evaluable before the hole,
    including parallel tells; traversed guards conjoin (with their binders)."""
    return _pc_walk(ctx.body, ctx.steps, weakest=False)


def wpc(ctx: Context) -> Guard:
    """Weakest produced constraint: traversed guards only."""
    return _pc_walk(ctx.body, ctx.steps, weakest=True)


# ---------------------------------------------------------------------------
# Cluster helpers: the maximal parallel composition around a node


def _cluster_root(steps: tuple) -> tuple:
    j = len(steps)
    while j > 0 and steps[j - 1][0] in ("parL", "parR"):
        j -= 1
    return steps[:j]


def _member_paths(a: Agent, prefix: tuple = ()) -> list[tuple]:
    if isinstance(a, Par):
        return _member_paths(a.left, prefix + (ParL,)) + _member_paths(
            a.right, prefix + (ParR,)
        )
    return [prefix]


def _remove_member(a: Agent, rel: tuple) -> Agent:
    """Remove the member at rel from a parallel tree, collapsing its parent."""
    if not rel:
        raise XformError("cannot remove the only member of a cluster")
    parent_rel, last = rel[:-1], rel[-1]
    parent = resolve(a, parent_rel)
    keep = parent.right if last[0] == "parL" else parent.left
    return replace_at(a, parent_rel, keep)


@dataclass(frozen=True)
class _ClusterView:
    decl: Declaration
    root_steps: tuple  # path of the cluster root in the body
    node: Agent  # the cluster root agent
    member_rel: tuple  # relative path of the addressed member
    members: list  # [(rel_path, agent)] in left-to-right order

    def others(self) -> list:
        return [(r, m) for r, m in self.members if r != self.member_rel]

    def context_vars(self, head_too: bool = True) -> set:
        """Free variables of the context around the hole [member || rest]:
        the body with the whole cluster removed, plus the head."""
        marker = Call("__hole__", ())
        rest_body = replace_at(self.decl.body, self.root_steps, marker)
        out = agent_free_vars(rest_body)
        if head_too:
            for t in self.decl.params:
                out |= term_vars(t)
        return out


def _cluster(d: Declaration, path: ContextPath) -> _ClusterView:
    sub = resolve(d.body, path.steps)  # validates the path
    root_steps = _cluster_root(path.steps)
    node = resolve(d.body, root_steps)
    member_rel = path.steps[len(root_steps):]
    members = [(r, resolve(node, r)) for r in _member_paths(node)]
    del sub
    return _ClusterView(d, root_steps, node, member_rel, members)


def _outer_context(d: Declaration, root_steps: tuple) -> Context:
    return Context(d.body, root_steps)


# ---------------------------------------------------------------------------
# History


@dataclass(frozen=True)
class TransformStep:
    op: str
    decl: str
    path: tuple = ()
    args: tuple = ()  # sorted (key, value-as-text) pairs
    restricted: bool = False
    forced: bool = False
    source: str = ""  # declaration used as unfolding/instantiation/folding source

    def to_json(self) -> dict:
        out = {"op": self.op, "decl": self.decl, "path": path_to_json(self.path)}
        out.update(dict(self.args))
        if self.restricted:
            out["restricted"] = True
        if self.forced:
            out["force"] = True
        return out


@dataclass(frozen=True)
class Obligation:
    index: int
    op: str
    decl: str
    condition: str

    def to_json(self) -> dict:
        return {
            "step": self.index,
            "op": self.op,
            "decl": self.decl,
            "condition": self.condition,
            "status": "assumed",
        }


# operations whose general/restricted split exists; everything else in the
# paper's sequence definition is eligible for restricted sequences as-is
RESTRICTABLE = {
    "tell_eliminate",
    "tell_introduce",
    "ask_simplify",
    "tell_simplify",
    "distribute",
}
ALWAYS_RESTRICTED = {
    "unfold",
    "backward_instantiate",
    "branch_eliminate",
    "cons_ask_eliminate",
    "fold",
    "remove_stop",
    "rename_branch_local",
    "introduce",
}


@dataclass
class History:
    d0: Program
    snapshots: list = field(default_factory=list)  # [(TransformStep, Program)]
    obligations: list = field(default_factory=list)

    def record(self, step: TransformStep, result: Program):
        self.snapshots.append((step, result))

    def current(self) -> Program:
        return self.snapshots[-1][1] if self.snapshots else self.d0

    def restricted_sequence(self) -> bool:
        for step, _ in self.snapshots:
            if step.op in RESTRICTABLE and not step.restricted:
                return False
            if step.op == "extended_fold" and not step.restricted:
                return False
        return True

    def used_as_source(self, pred: str) -> bool:
        """The declaration served as unfolding, backward-instantiation or
        folding source in some earlier step (blocks the propagation-folding
        escape; the host's own modifications do not)."""
        return any(step.source == pred for step, _ in self.snapshots)

    def to_json(self) -> dict:
        return {
            "steps": [s.to_json() for s, _ in self.snapshots],
            "restricted_sequence": self.restricted_sequence(),
            "obligations": [o.to_json() for o in self.obligations],
        }


# ---------------------------------------------------------------------------
# Operations


def _get_decl(p: Program, path: ContextPath) -> Declaration:
    if not p.has(path.decl):
        raise XformError(f"no declaration named {path.decl}")
    return p.decl(path.decl)


def unfold(p: Program, target: ContextPath, rng=DEFAULT_INT_RANGE) -> Program:
    """Replace a call by a fresh variant of its body plus the parameter tell."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    if not isinstance(sub, Call):
        raise XformError(f"unfold target is not a call: {pretty_agent(sub)}")
    if not p.has(sub.pred):
        raise XformError(f"cannot unfold the stub predicate {sub.pred}")
    u = p.decl(sub.pred)
    u = _rename_decl_apart(u, decl_free_vars(d))
    eqs = mk_conj([Eq(s, t) for s, t in zip(sub.args, u.params)])
    new = Par(u.body, Tell(eqs))
    return p.replace(Declaration(d.pred, d.params, plug(ctx, new)))


def _rename_decl_apart(u: Declaration, avoid: set) -> Declaration:
    from .syntax import rename_apart

    return rename_apart(u, avoid)


def _payload_pairs(payload: Constraint) -> tuple[list, list]:
    ss, ts = [], []
    for a in payload.atoms:
        if not isinstance(a, Eq):
            raise XformError(
                f"tell payload is not a conjunction of equations: {payload!r}"
            )
        if contains_sum(a.lhs) or contains_sum(a.rhs):
            raise XformError(
                "no most general unifier in the arithmetic fragment: "
                f"{payload!r}"
            )
        ss.append(a.lhs)
        ts.append(a.rhs)
    return ss, ts


def _eliminating_subst(payload: Constraint, forbidden: set) -> dict:
    """A relevant idempotent unifier of the payload equations whose domain
    avoids `forbidden`, or an XformError naming the offending variables."""
    store = store_of(payload)
    if store.false:
        raise XformError(f"the equations {payload!r} have no unifier")
    if store.arith or store.preds:
        raise XformError(f"tell payload is not a pure equation system: {payload!r}")
    sigma: dict[str, Term] = {}
    # alias classes: prefer a forbidden variable as representative
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    var_classes: list[tuple[str, str]] = []
    for v, t in store.eqs:
        if isinstance(t, Var):
            parent[find(v)] = find(t.name)
        else:
            if v in forbidden:
                raise XformError(
                    f"variable {v} must be eliminated but occurs in the "
                    "context or the head"
                )
            sigma[v] = t
    classes: dict[str, list[str]] = {}
    for x in list(parent):
        classes.setdefault(find(x), []).append(x)
    for members in classes.values():
        frozen = sorted(m for m in members if m in forbidden)
        if len(frozen) > 1:
            raise XformError(
                f"cannot eliminate: variables {frozen} both occur in the "
                "context or the head but must be unified"
            )
        rep = frozen[0] if frozen else sorted(members)[0]
        for m in members:
            if m != rep:
                sigma[m] = Var(rep)
    # resolve bindings through the alias representatives
    out = {v: subst_term(t, sigma) for v, t in sigma.items()}
    while True:
        nxt = {v: subst_term(t, out) for v, t in out.items()}
        if nxt == out:
            break
        out = nxt
    return out


def tell_eliminate(
    p: Program, target: ContextPath, restricted: bool = False, rng=DEFAULT_INT_RANGE
) -> Program:
    """C[tell(s=t) || B] -> C[B sigma], B being the rest of the parallel
    cluster around the addressed tell."""
    d = _get_decl(p, target)
    cv = _cluster(d, target)
    sub = resolve(d.body, target.steps)
    if not isinstance(sub, Tell):
        raise XformError(f"tell elimination target is not a tell: {pretty_agent(sub)}")
    others = cv.others()
    if not others:
        raise XformError("the tell has no parallel component to absorb it")
    _payload_pairs(sub.payload)
    forbidden = cv.context_vars()
    sigma = _eliminating_subst(sub.payload, forbidden)
    if restricted:
        # B is the smallest parallel component absorbing the substitution: the
        # members touched by sigma's domain, closed under variable sharing;
        # the rest of the cluster belongs to the context
        dom = set(sigma)
        member_vars = [agent_free_vars(m) for _, m in others]
        in_b = [bool(vs & dom) for vs in member_vars]
        changed = True
        while changed:
            changed = False
            shared = set()
            for flag, vs in zip(in_b, member_vars):
                if flag:
                    shared |= vs
            for i, vs in enumerate(member_vars):
                if not in_b[i] and vs & shared:
                    in_b[i] = True
                    changed = True
        bvars = set()
        for flag, vs in zip(in_b, member_vars):
            if flag:
                bvars |= vs
        clash = sorted(bvars & forbidden)
        if clash:
            raise XformError(
                f"restricted tell elimination: variables {clash} of the "
                "parallel component occur in the head or the context"
            )
    rest = _remove_member(cv.node, cv.member_rel)
    rest = subst_agent(rest, sigma)
    body = replace_at(d.body, cv.root_steps, rest)
    return p.replace(Declaration(d.pred, d.params, body))


def tell_introduce(
    p: Program,
    target: ContextPath,
    sigma: Subst,
    restricted: bool = False,
) -> Program:
    """C[B sigma] -> C[tell(X = X sigma) || B]."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    dom = sigma.dom()
    cvars = context_free_vars(ctx) | {
        v for t in d.params for v in term_vars(t)
    }
    bad = sorted(dom & (cvars | sigma.ran() | agent_free_vars(sub)))
    if bad:
        raise XformError(
            f"tell introduction: domain variables {bad} are not fresh "
            "(they occur in the context, the head, the range, or the agent)"
        )
    preimage = _unsubstitute(sub, sigma)
    if subst_agent(preimage, sigma.mapping()) != sub:
        raise XformError("tell introduction could not reconstruct a preimage")
    if restricted:
        clash = sorted(agent_free_vars(preimage) & cvars)
        if clash:
            raise XformError(
                f"restricted tell introduction: variables {clash} occur in "
                "the head or the context"
            )
    payload = mk_conj([Eq(Var(v), t) for v, t in sigma.bindings])
    new = Par(Tell(payload), preimage)
    return p.replace(Declaration(d.pred, d.params, plug(ctx, new)))


def _unsubstitute(a: Agent, sigma: Subst) -> Agent:
    """Replace occurrences of each sigma value by its variable, largest
    values first."""
    items = sorted(
        sigma.bindings, key=lambda vt: -len(repr(vt[1]))
    )

    from .syntax import Compound

    def un_term(t: Term) -> Term:
        for v, val in items:
            if t == val:
                return Var(v)
        if isinstance(t, Compound):
            return Compound(t.functor, tuple(un_term(x) for x in t.args))
        return t

    from .syntax import Atom, Cmp, Neq, PredAtom, subst_atom

    def un_atom(at):
        if isinstance(at, PredAtom):
            return PredAtom(at.pred, tuple(un_term(x) for x in at.args))
        if isinstance(at, Eq):
            return Eq(un_term(at.lhs), un_term(at.rhs))
        if isinstance(at, Neq):
            return Neq(un_term(at.lhs), un_term(at.rhs))
        return Cmp(at.op, un_term(at.lhs), un_term(at.rhs))

    def un_constraint(c: Constraint) -> Constraint:
        if c.false:
            return c
        return mk_conj([un_atom(at) for at in c.atoms])

    def un_agent(x: Agent) -> Agent:
        if isinstance(x, Stop):
            return x
        if isinstance(x, Tell):
            return Tell(un_constraint(x.payload))
        if isinstance(x, Call):
            return Call(x.pred, tuple(un_term(t) for t in x.args))
        if isinstance(x, Par):
            return Par(un_agent(x.left), un_agent(x.right))
        return Choice(
            tuple(
                (Guard(g.bound, un_constraint(g.body)), un_agent(b))
                for g, b in x.branches
            )
        )

    return un_agent(a)


def backward_instantiate(
    p: Program, target: ContextPath, include_tell_c: bool = True
) -> Program:
    """C[p(t)] -> C[p(t) || tell(c) || tell(t = s)] for a fresh variant
    p(s) <- tell(c) || B of the callee (c taken true otherwise)."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    if not isinstance(sub, Call):
        raise XformError(
            f"backward instantiation target is not a call: {pretty_agent(sub)}"
        )
    if not p.has(sub.pred):
        raise XformError(f"cannot instantiate against the stub {sub.pred}")
    b = _rename_decl_apart(p.decl(sub.pred), decl_free_vars(d))
    first = flatten_par(b.body)[0]
    c = first.payload if isinstance(first, Tell) else TRUE_C
    members = [sub]
    if include_tell_c and not c.is_true():
        members.append(Tell(c))
    members.append(Tell(mk_conj([Eq(s, t) for s, t in zip(sub.args, b.params)])))
    out = members[-1]
    for m in reversed(members[:-1]):
        out = Par(m, out)
    return p.replace(Declaration(d.pred, d.params, plug(ctx, out)))


def ask_simplify(
    p: Program,
    target: ContextPath,
    new_guards: list,
    restricted: bool = False,
    rng=DEFAULT_INT_RANGE,
) -> Program:
    """Replace the guards of a choice by context-equivalent ones."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    if not isinstance(sub, Choice):
        raise XformError(f"ask simplification target is not a choice: {pretty_agent(sub)}")
    if len(new_guards) != len(sub.branches):
        raise XformError(
            f"{len(new_guards)} replacement guards for {len(sub.branches)} branches"
        )
    pcc = wpc(ctx) if restricted else pc(ctx)
    head_vars = {v for t in d.params for v in term_vars(t)}
    cvars = context_free_vars(ctx)
    for j, ((g, body), g2) in enumerate(zip(sub.branches, new_guards)):
        # the guards' own free variables stay rigid: hiding them would let a
        # never-entailed guard pass for true
        z = (
            cvars
            | head_vars
            | agent_free_vars(body)
            | guard_free_vars(g)
            | guard_free_vars(g2)
        )
        if not equiv_within(g, g2, pcc, z, rng):
            raise XformError(
                f"branch {j}: {pretty_guard(g)} is not equivalent to "
                f"{pretty_guard(g2)} within the context "
                f"(pcc = {pretty_guard(pcc)}, "
                f"lhs = {projected_text(project(as_store(econstraint_conj(pcc, g), rng), z, rng, warn=False))}, "
                f"rhs = {projected_text(project(as_store(econstraint_conj(pcc, g2), rng), z, rng, warn=False))})"
            )
    new = Choice(tuple((g2, body) for (g, body), g2 in zip(sub.branches, new_guards)))
    return p.replace(Declaration(d.pred, d.params, plug(ctx, new)))


def tell_simplify(
    p: Program,
    target: ContextPath,
    new_payload: Constraint,
    restricted: bool = False,
    rng=DEFAULT_INT_RANGE,
) -> Program:
    """Replace a tell payload by a context-equivalent constraint."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    if not isinstance(sub, Tell):
        raise XformError(f"tell simplification target is not a tell: {pretty_agent(sub)}")
    pcc = wpc(ctx) if restricted else pc(ctx)
    z = (
        context_free_vars(ctx)
        | {v for t in d.params for v in term_vars(t)}
        | constraint_vars(sub.payload)
        | constraint_vars(new_payload)
    )
    if not equiv_within(sub.payload, new_payload, pcc, z, rng):
        raise XformError(
            f"{sub.payload!r} is not equivalent to {new_payload!r} within the "
            f"context (pcc = {pretty_guard(pcc)})"
        )
    return p.replace(Declaration(d.pred, d.params, plug(ctx, Tell(new_payload))))


def branch_eliminate(p: Program, target: ContextPath, j: int) -> Program:
    """Remove branch j, whose guard must be the canonical false; a choice
    never loses its last branch."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    if not isinstance(sub, Choice):
        raise XformError(f"branch elimination target is not a choice: {pretty_agent(sub)}")
    if len(sub.branches) <= 1:
        raise XformError(
            "cannot eliminate the only branch of a choice "
            "(that would turn a deadlock into a success)"
        )
    if not (0 <= j < len(sub.branches)):
        raise XformError(f"branch index {j} out of range")
    g, _ = sub.branches[j]
    if not g.is_false():
        raise XformError(f"branch {j} guard is {pretty_guard(g)}, not false")
    new = Choice(sub.branches[:j] + sub.branches[j + 1:])
    return p.replace(Declaration(d.pred, d.params, plug(ctx, new)))


def cons_ask_eliminate(p: Program, target: ContextPath) -> Program:
    """C[ask(true) -> B] -> C[B] for a single-branch choice."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    if not isinstance(sub, Choice):
        raise XformError(f"target is not a choice: {pretty_agent(sub)}")
    if len(sub.branches) != 1:
        raise XformError(
            "conservative ask elimination applies to single-branch choices only"
        )
    g, body = sub.branches[0]
    if not g.is_true():
        raise XformError(f"the guard is {pretty_guard(g)}, not true")
    return p.replace(Declaration(d.pred, d.params, plug(ctx, body)))


def remove_stop(p: Program, target: ContextPath) -> Program:
    """C[A || stop] -> C[A] (the agent stop has no transition)."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    if not isinstance(sub, Par):
        raise XformError(f"target is not a parallel composition: {pretty_agent(sub)}")
    if isinstance(sub.right, Stop):
        keep = sub.left
    elif isinstance(sub.left, Stop):
        keep = sub.right
    else:
        raise XformError("neither operand is stop")
    return p.replace(Declaration(d.pred, d.params, plug(ctx, keep)))


def rename_branch_local(
    p: Program, target: ContextPath, j: int, names: list
) -> Program:
    """Rename the given declaration-local variables inside branch j of the
    addressed choice; legal when all their occurrences in the body lie within
    this choice's branch regions (guard + body), so the renaming is a variant
    modulo branch exclusivity."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    if not isinstance(sub, Choice):
        raise XformError(f"target is not a choice: {pretty_agent(sub)}")
    if not (0 <= j < len(sub.branches)):
        raise XformError(f"branch index {j} out of range")
    head_vars = {v for t in d.params for v in term_vars(t)}
    outside = context_free_vars(ctx)
    taken = decl_free_vars(d)
    ren: dict[str, Term] = {}
    for x in names:
        if x in head_vars:
            raise XformError(f"{x} is a head parameter, not a local")
        if x in outside:
            raise XformError(
                f"{x} occurs outside the choice; branch-local renaming unsafe"
            )
        g, body = sub.branches[j]
        if x not in (guard_free_vars(g) | agent_free_vars(body)):
            raise XformError(f"{x} does not occur in branch {j}")
        nx = fresh_name(x, taken)
        taken.add(nx)
        ren[x] = Var(nx)
    g, body = sub.branches[j]
    branches = list(sub.branches)
    branches[j] = (subst_guard(g, ren), subst_agent(body, ren))
    return p.replace(Declaration(d.pred, d.params, plug(ctx, Choice(tuple(branches)))))


# ---------------------------------------------------------------------------
# Distribution


def distribute(
    p: Program,
    target: ContextPath,
    restricted: bool = False,
    force: bool = False,
    rng=DEFAULT_INT_RANGE,
    stubs: Stubs = NO_STUBS,
    depth: int = 10,
):
    """Move the addressed agent inside every branch of the choice standing in
    parallel with it: A || Sum ask(c_i) -> B_i  ==>  Sum ask(c_i) -> (A || B_i).

    Certified when A requires a variable not free in the head or the context
    (the Remark), or when <A, e> is not productive on a fully explored state
    space; otherwise refused unless forced, in which case the universally
    quantified conditions are recorded as an Obligation.

    Returns (Program, Obligation | None).
    """
    d = _get_decl(p, target)
    cv = _cluster(d, target)
    a = resolve(d.body, target.steps)
    if isinstance(a, Choice) and len([m for _, m in cv.members if isinstance(m, Choice)]) == 1:
        raise XformError("the addressed agent is the only choice in its cluster")
    choices = [(r, m) for r, m in cv.others() if isinstance(m, Choice)]
    if not choices:
        raise XformError("no choice stands in parallel with the addressed agent")
    if len(choices) > 1:
        raise XformError(
            "several parallel choices; address the agent so that exactly one "
            "choice remains in its cluster"
        )
    (choice_rel, choice) = choices[0]

    # context of the hole [A || choice]: body minus both, other cluster
    # members included
    outer = _outer_context(d, cv.root_steps)
    leftover = [
        m for r, m in cv.members if r not in (cv.member_rel, choice_rel)
    ]
    base = wpc(outer) if restricted else pc(outer)
    if not restricted:
        parts = [base] + [Guard((), pca(m)) for m in leftover]
        e = econstraint_conj(*parts)
    else:
        e = base

    head_vars = {v for t in d.params for v in term_vars(t)}
    cvars = cv.context_vars(head_too=False) | set().union(
        *(agent_free_vars(m) for m in leftover), set()
    )
    guard_note = ""
    certified = False
    for x in sorted(agent_free_vars(a) - head_vars - cvars):
        if requires_var(p, a, x, rng) == "certified":
            certified = True
            guard_note = f"requires the variable {x}, absent from head and context"
            break
    if not certified and not (agent_free_vars(a) & (head_vars | cvars)):
        # an admissible c reaches A only through Var(A) /\ Var(H,C); when that
        # is empty, productivity of <A, c /\ e> coincides with <A, e>
        e_store = as_store(e, rng)
        if satisfiable(e_store, rng):
            verdict = productive(p, a, e_store, depth, stubs, rng)
            if verdict == "not_productive":
                certified = True
                guard_note = "not productive under the produced constraint"
    obligation = None
    if not certified:
        cond = (
            "for every constraint c with Var(c) /\\ Var(d) within Var(H,C): if "
            f"<{pretty_agent(a)}, c /\\ {pretty_guard(e)}> is productive then "
            "some branch guard is entailed and every branch guard is entailed "
            "or refuted"
        )
        if not force:
            hints = []
            e_store = as_store(e, rng)
            if satisfiable(e_store, rng) and productive(
                p, a, e_store, depth, stubs, rng
            ) == "productive":
                if not any(
                    entails(e_store, g, rng) for g, _ in choice.branches
                ):
                    hints.append(
                        "condition (a) already fails at c = true: the agent is "
                        "productive and no branch is enabled"
                    )
            raise XformError(
                "distribution not certified (" + cond + ")"
                + ("; " + "; ".join(hints) if hints else "")
                + "; use force to apply it and record an obligation"
            )
        obligation = Obligation(-1, "distribute", d.pred, cond)

    new_choice = Choice(tuple((g, Par(a, b)) for g, b in choice.branches))
    node = replace_at(cv.node, choice_rel, new_choice)
    node = _remove_member(node, cv.member_rel)
    body = replace_at(d.body, cv.root_steps, node)
    return p.replace(Declaration(d.pred, d.params, body)), obligation


# ---------------------------------------------------------------------------
# Folding


def _alpha_match(pattern: Agent, concrete: Agent) -> dict | None:
    """Variable bijection rho with pattern . rho == concrete modulo AC."""
    from .syntax import _match_agent

    fwd: dict = {}
    bwd: dict = {}
    if _match_agent(pattern, concrete, fwd, bwd):
        return fwd
    return None


def _match_submultiset(fbody: Agent, node: Agent):
    """All ways to match fbody against a sub-multiset of node's parallel
    cluster: [(indices, rho, members)]."""
    members = flatten_par(node)
    fmembers = flatten_par(fbody)
    hits = []
    if len(fmembers) > len(members):
        return hits, members
    for combo in itertools.combinations(range(len(members)), len(fmembers)):
        chosen = [members[i] for i in combo]
        rho = _alpha_match(fbody, chosen[0] if len(chosen) == 1 else _par_of(chosen))
        if rho is not None:
            hits.append((combo, rho))
    return hits, members


def _par_of(members: list) -> Agent:
    out = members[-1]
    for m in reversed(members[:-1]):
        out = Par(m, out)
    return out


def fold(
    p: Program,
    target: ContextPath,
    folding: Declaration,
    history: History | None = None,
) -> Program:
    """Replace an occurrence of the folding declaration's body (modulo
    renaming, inside the parallel cluster at the target) by its head atom.

    Requires a guarding context, or the propagation escape: the host was
    never used as a source earlier in the History."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    for t in folding.params:
        if not isinstance(t, Var):
            raise XformError(
                f"folding declaration {folding.pred} has non-variable head arguments"
            )
    if len(set(v.name for v in folding.params)) != len(folding.params):
        raise XformError(
            f"folding declaration {folding.pred} repeats a head variable"
        )
    cv = _cluster(d, target)
    hits, members = _match_submultiset(folding.body, cv.node)
    if not hits:
        raise XformError(
            f"no instance of {folding.pred}'s body at the target "
            f"(modulo renaming): {pretty_agent(cv.node)}"
        )
    if len({frozenset(c) for c, _ in hits}) > 1:
        raise XformError(
            f"ambiguous folding: {len(hits)} distinct matches; address a "
            "smaller agent"
        )
    combo, rho = hits[0]

    if not target.is_guarding():
        if history is None or history.used_as_source(d.pred):
            raise XformError(
                "non-guarding context and the propagation escape does not "
                f"apply (declaration {d.pred} was used as a source earlier, "
                "or no history is available)"
            )

    taken = decl_free_vars(d) | set(rho.values())
    full_rho: dict[str, Term] = {k: Var(v) for k, v in rho.items()}
    for v in folding.params:
        if v.name not in full_rho:
            nv = fresh_name(v.name, taken)
            taken.add(nv)
            full_rho[v.name] = Var(nv)
    b_inst = Call(folding.pred, tuple(subst_term(t, full_rho) for t in folding.params))

    matched = [members[i] for i in combo]
    a_vars = set()
    for m in matched:
        a_vars |= agent_free_vars(m)
    rest_members = [m for i, m in enumerate(members) if i not in combo]
    marker = Call("__hole__", ())
    body_rest = replace_at(
        d.body,
        cv.root_steps,
        _par_of(rest_members + [marker]) if rest_members else marker,
    )
    cvars = agent_free_vars(body_rest) | {
        v for t in d.params for v in term_vars(t)
    }
    escaping = sorted((a_vars & cvars) - agent_free_vars(b_inst))
    if escaping:
        raise XformError(
            f"folding variable condition violated: {escaping} occur in the "
            "context or head but not in the folding head instance"
        )

    pieces = []
    used = False
    for i, m in enumerate(members):
        if i in combo:
            if not used:
                pieces.append(b_inst)
                used = True
        else:
            pieces.append(m)
    new = _par_of(pieces)
    body = replace_at(d.body, cv.root_steps, new)
    return p.replace(Declaration(d.pred, d.params, body))


def extended_fold(
    p: Program,
    target: ContextPath,
    folding: Declaration,
    sigma: dict,
    history: History | None = None,
) -> Program:
    """Fold an instance of the folding body: shorthand for tell introduction,
    folding, and tell elimination.  `sigma` maps folding-head variables to
    non-variable terms; variable-for-variable renaming is inferred."""
    d = _get_decl(p, target)
    ctx, sub = split(d, target)
    head_names = {v.name for v in folding.params if isinstance(v, Var)}
    for v, t in sigma.items():
        if v not in head_names:
            raise XformError(
                f"extended folding substitutes {v}, which is not a head "
                f"variable of {folding.pred}; the introduced tell would "
                "violate the folding variable condition"
            )
        if isinstance(t, Var):
            raise XformError(
                "variable-for-variable components belong to the renaming; "
                f"drop {v} -> {t!r} from the substitution"
            )
    pattern = subst_agent(folding.body, sigma)
    cv = _cluster(d, target)
    hits, members = _match_submultiset(pattern, cv.node)
    if not hits:
        raise XformError(
            f"no instance of {folding.pred}'s body under the given "
            f"substitution at the target: {pretty_agent(cv.node)}"
        )
    if len({frozenset(c) for c, _ in hits}) > 1:
        raise XformError(f"ambiguous extended folding: {len(hits)} matches")
    combo, rho = hits[0]

    # constituent checks: the introduced tell's domain variables are fresh by
    # construction (tell introduction); the folding then sees them in its
    # context, so they must be head variables (checked above); finally the
    # tell elimination removes them (domain fresh, conditions immediate).
    if not target.is_guarding():
        if history is None or history.used_as_source(d.pred):
            raise XformError(
                "non-guarding context and the propagation escape does not "
                f"apply for {d.pred}"
            )

    taken = decl_free_vars(d) | set(rho.values())
    full_rho: dict[str, Term] = {k: Var(v) for k, v in rho.items()}
    for v in folding.params:
        if v.name in sigma:
            continue
        if v.name not in full_rho:
            nv = fresh_name(v.name, taken)
            taken.add(nv)
            full_rho[v.name] = Var(nv)
    args = []
    for t in folding.params:
        if t.name in sigma:
            args.append(sigma[t.name])
        else:
            args.append(subst_term(t, full_rho))
    b_inst = Call(folding.pred, tuple(args))

    matched = [members[i] for i in combo]
    a_vars = set()
    for m in matched:
        a_vars |= agent_free_vars(m)
    rest_members = [m for i, m in enumerate(members) if i not in combo]
    marker = Call("__hole__", ())
    body_rest = replace_at(
        d.body,
        cv.root_steps,
        _par_of(rest_members + [marker]) if rest_members else marker,
    )
    cvars = agent_free_vars(body_rest) | {
        v for t in d.params for v in term_vars(t)
    }
    escaping = sorted((a_vars & cvars) - agent_free_vars(b_inst))
    if escaping:
        raise XformError(
            f"extended folding variable condition violated: {escaping} occur "
            "in the context or head but not in the folded head instance"
        )

    pieces = []
    used = False
    for i, m in enumerate(members):
        if i in combo:
            if not used:
                pieces.append(b_inst)
                used = True
        else:
            pieces.append(m)
    new = _par_of(pieces)
    body = replace_at(d.body, cv.root_steps, new)
    return p.replace(Declaration(d.pred, d.params, body))


# ---------------------------------------------------------------------------
# Scripts


def path_from_json(tokens: list) -> tuple:
    steps = []
    i = 0
    while i < len(tokens):
        t = tokens[i]
        if t == "parL":
            steps.append(ParL)
            i += 1
        elif t == "parR":
            steps.append(ParR)
            i += 1
        elif t == "branch":
            if i + 1 >= len(tokens) or not isinstance(tokens[i + 1], int):
                raise XformError("'branch' selector needs an index")
            steps.append(Branch(tokens[i + 1]))
            i += 2
        else:
            raise XformError(f"unknown path selector {t!r}")
    return tuple(steps)


def path_to_json(steps: tuple) -> list:
    out: list = []
    for s in steps:
        if s[0] == "branch":
            out += ["branch", s[1]]
        else:
            out.append(s[0])
    return out


def _resolve_folding(p_d0: Program, name: str) -> Declaration:
    base = name[:-3] if name.endswith("@d0") else name
    if not p_d0.has(base):
        raise XformError(f"folding declaration {base} not found in d0")
    return p_d0.decl(base)


def apply_step(
    p: Program,
    step_json: dict,
    d0: Program,
    history: History,
    rng=DEFAULT_INT_RANGE,
    stubs: Stubs = NO_STUBS,
) -> tuple[Program, TransformStep, Obligation | None]:
    op = step_json.get("op")
    decl = step_json.get("decl", "")
    path = ContextPath(decl, path_from_json(step_json.get("path", [])))
    restricted = bool(step_json.get("restricted", False))
    forced = bool(step_json.get("force", False))
    args: list = []
    obligation = None
    source = ""

    if op == "unfold":
        sub = resolve(p.decl(decl).body, path.steps)
        source = sub.pred if isinstance(sub, Call) else ""
        out = unfold(p, path, rng)
    elif op == "tell_eliminate":
        out = tell_eliminate(p, path, restricted, rng)
    elif op == "tell_introduce":
        sigma = Subst.of(
            {v: parse_term(t) for v, t in step_json["sigma"].items()}
        )
        args.append(("sigma", json.dumps(step_json["sigma"], sort_keys=True)))
        out = tell_introduce(p, path, sigma, restricted)
    elif op == "backward_instantiate":
        sub = resolve(p.decl(decl).body, path.steps)
        source = sub.pred if isinstance(sub, Call) else ""
        include = bool(step_json.get("include_tell_c", True))
        args.append(("include_tell_c", include))
        out = backward_instantiate(p, path, include)
    elif op == "ask_simplify":
        guards = [parse_guard(g) for g in step_json["guards"]]
        args.append(("guards", tuple(step_json["guards"])))
        out = ask_simplify(p, path, guards, restricted, rng)
    elif op == "tell_simplify":
        payload = parse_constraint(step_json["payload"])
        args.append(("payload", step_json["payload"]))
        out = tell_simplify(p, path, payload, restricted, rng)
    elif op == "branch_eliminate":
        j = step_json["branch"]
        args.append(("branch", j))
        out = branch_eliminate(p, path, j)
    elif op == "cons_ask_eliminate":
        out = cons_ask_eliminate(p, path)
    elif op == "distribute":
        out, obligation = distribute(p, path, restricted, forced, rng, stubs)
    elif op == "fold":
        folding = _resolve_folding(d0, step_json["with"])
        source = folding.pred
        args.append(("with", step_json["with"]))
        out = fold(p, path, folding, history)
    elif op == "extended_fold":
        folding = _resolve_folding(d0, step_json["with"])
        source = folding.pred
        sigma = {v: parse_term(t) for v, t in step_json.get("sigma", {}).items()}
        args.append(("with", step_json["with"]))
        args.append(("sigma", json.dumps(step_json.get("sigma", {}), sort_keys=True)))
        out = extended_fold(p, path, folding, sigma, history)
    elif op == "remove_stop":
        out = remove_stop(p, path)
    elif op == "rename_branch_local":
        j = step_json["branch"]
        names = step_json["vars"]
        args.append(("branch", j))
        args.append(("vars", tuple(names)))
        out = rename_branch_local(p, path, j, names)
    else:
        raise XformError(f"unknown operation {op!r}")

    record = TransformStep(
        op=op,
        decl=decl,
        path=path.steps,
        args=tuple(sorted(args, key=lambda kv: kv[0])),
        restricted=restricted or op in ALWAYS_RESTRICTED,
        forced=forced,
        source=source,
    )
    return out, record, obligation


def apply_script(
    p0: Program,
    intro_defs: list,
    script: list,
    rng=DEFAULT_INT_RANGE,
    stubs: Stubs = NO_STUBS,
) -> tuple[Program, History]:
    """Introduce the new definitions once and for all, then apply the steps in
    order.  The first failing step aborts with its index and reason; nothing
    is mutated."""
    d0 = p0
    for d in intro_defs:
        if d0.has(d.pred):
            raise XformError(f"introduced definition {d.pred} already declared")
        d0 = d0.add(d)
    history = History(d0)
    cur = d0
    steps = list(script)
    # leading introduce steps are definition introductions hoisted into d0
    from .syntax import parse_declarations

    while steps and steps[0].get("op") == "introduce":
        for d in parse_declarations(steps.pop(0)["text"]):
            if cur.has(d.pred):
                raise XformError(f"introduced definition {d.pred} already declared")
            cur = cur.add(d)
        history = History(cur)
        d0 = cur
    for i, sj in enumerate(steps):
        if sj.get("op") == "introduce":
            raise XformError(
                f"step {i}: definitions are introduced once for all, before "
                "any transformation step"
            )
        try:
            cur, record, obligation = apply_step(cur, sj, d0, history, rng, stubs)
        except CCPError as e:
            raise XformError(f"step {i} ({sj.get('op')}): {e}") from e
        if obligation is not None:
            obligation = Obligation(i, obligation.op, obligation.decl, obligation.condition)
            history.obligations.append(obligation)
        history.record(record, cur)
    return cur, history


def load_script(path: str) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise XformError("a script file is a JSON array of step objects")
    return data
