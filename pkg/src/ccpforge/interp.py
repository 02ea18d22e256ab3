"""The standard CCP transition system and everything observed from it.

Rules: R1 tell, R2 guarded choice, R3 parallel context (left/right), R4
procedure call with parameter passing by an appended tell.  Stub predicates
(unspecified primitives like get_token) step according to a bounded scenario;
a stub without a scenario entry suspends.

Enumeration is bounded by a depth counting synchronization and call steps
(R2 and R4 on declared predicates); tell firings and stub effects are free,
which keeps the bound well-founded since they only consume agent nodes that
R2/R4 steps introduce.  A global state cap guards explosion.  Everything is
deduplicated modulo variable renaming and store canonicalization and is
deterministic: repeated runs produce identical canonically-ordered results.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

from .constraints import (
    DEFAULT_INT_RANGE,
    EMPTY_STORE,
    ResourceLimit,
    Store,
    conjoin,
    entails,
    entails_projected,
    mgu,
    project,
    projected_text,
    satisfiable,
    store_of,
    store_text,
)
from .syntax import (
    Agent,
    Call,
    CCPError,
    Choice,
    Const,
    Constraint,
    Declaration,
    Eq,
    Guard,
    Par,
    Program,
    STOP,
    Stop,
    Tell,
    TRUE_C,
    Term,
    Var,
    agent_free_vars,
    constraint_vars,
    is_terminal,
    mk_conj,
    parse_term,
    pretty_agent,
    pretty_guard,
    rename_apart,
    subst_agent,
    subst_term,
)

DEFAULT_CAP = 20000


# ---------------------------------------------------------------------------
# Stub scenarios


@dataclass(frozen=True)
class StubSpec:
    """Harness behaviour of one unspecified primitive.

    kind 'stream': the k-th call emits tell(arg = alternatives[k][i]) for any
    alternative of slot k and consumes the slot; exhausted streams suspend.
    kind 'sink': every call steps to stop.
    """

    pred: str
    kind: str  # 'stream' | 'sink'
    bind: int = 1  # 1-based argument receiving the token
    slots: tuple = ()  # tuple[tuple[Term, ...], ...]


class Stubs:
    def __init__(self, specs=()):
        self.specs = {s.pred: s for s in specs}

    @staticmethod
    def sink(pred: str) -> StubSpec:
        return StubSpec(pred, "sink")

    @staticmethod
    def stream(pred: str, tokens, bind: int = 1) -> StubSpec:
        slots = tuple(
            tuple(parse_term(t) if isinstance(t, str) else t for t in slot)
            if isinstance(slot, (list, tuple))
            else (parse_term(slot) if isinstance(slot, str) else slot,)
            for slot in tokens
        )
        return StubSpec(pred, "stream", bind, slots)

    @staticmethod
    def from_dict(data: dict) -> "Stubs":
        specs = []
        for entry in data.get("stubs", []):
            if entry["kind"] == "sink":
                specs.append(Stubs.sink(entry["pred"]))
            elif entry["kind"] == "stream":
                specs.append(
                    Stubs.stream(entry["pred"], entry["tokens"], entry.get("bind", 1))
                )
            else:
                raise CCPError(f"unknown stub kind {entry['kind']!r}")
        return Stubs(specs)

    @staticmethod
    def load(path: str) -> "Stubs":
        with open(path, "r", encoding="utf-8") as fh:
            return Stubs.from_dict(json.load(fh))

    def get(self, pred: str) -> StubSpec | None:
        return self.specs.get(pred)


NO_STUBS = Stubs()


# ---------------------------------------------------------------------------
# Configurations


@dataclass(frozen=True)
class Config:
    agent: Agent
    store: Store
    consumed: tuple = ()  # tuple[(stub pred, count)] sorted

    def bump(self, pred: str) -> tuple:
        d = dict(self.consumed)
        d[pred] = d.get(pred, 0) + 1
        return tuple(sorted(d.items()))

    def count(self, pred: str) -> int:
        return dict(self.consumed).get(pred, 0)

    def __repr__(self):
        return f"<{pretty_agent(self.agent)}, {store_text(self.store)}>"


def config_vars(cfg: Config) -> set[str]:
    return agent_free_vars(cfg.agent) | cfg.store.vars()


def canon_config(cfg: Config) -> str:
    """Canonical key: variables renamed by first occurrence across the agent
    (print order) and the store's canonical text."""
    order: list[str] = []
    seen: set[str] = set()

    def note(name: str):
        if name not in seen:
            seen.add(name)
            order.append(name)

    def walk_term(t: Term):
        if isinstance(t, Var):
            note(t.name)
        elif hasattr(t, "args"):
            for a in t.args:
                walk_term(a)

    def walk_agent(a: Agent):
        if isinstance(a, Tell):
            for at in a.payload.atoms:
                for t in _atom_terms(at):
                    walk_term(t)
        elif isinstance(a, Call):
            for t in a.args:
                walk_term(t)
        elif isinstance(a, Par):
            walk_agent(a.left)
            walk_agent(a.right)
        elif isinstance(a, Choice):
            for g, b in a.branches:
                for at in g.body.atoms:
                    for t in _atom_terms(at):
                        walk_term(t)
                walk_agent(b)

    walk_agent(cfg.agent)
    for v, t in cfg.store.eqs:
        note(v)
        walk_term(t)
    for s, t in cfg.store.diseqs:
        walk_term(s)
        walk_term(t)
    for a in cfg.store.arith + cfg.store.preds:
        for t in _atom_terms(a):
            walk_term(t)
    ren = {v: Var(f"~{i}") for i, v in enumerate(order)}
    agent = subst_agent(cfg.agent, ren)
    atoms = [Eq(Var(v), t) for v, t in cfg.store.eqs]
    from .syntax import Neq, subst_atom, pretty_atom

    atoms += [Neq(s, t) for s, t in cfg.store.diseqs]
    atoms += list(cfg.store.arith) + list(cfg.store.preds)
    satoms = sorted(pretty_atom(subst_atom(a, ren)) for a in atoms)
    marker = "FALSE" if cfg.store.false else ";".join(satoms)
    return f"{pretty_agent(agent)}@@{marker}@@{cfg.consumed}"


def _atom_terms(a):
    from .syntax import PredAtom

    if isinstance(a, PredAtom):
        yield from a.args
    else:
        yield a.lhs
        yield a.rhs


# ---------------------------------------------------------------------------
# One transition step


def step(
    p: Program,
    cfg: Config,
    stubs: Stubs = NO_STUBS,
    rng: tuple = DEFAULT_INT_RANGE,
) -> list[tuple[Config, str]]:
    """All successors licensed by R1-R4, with rule-justification labels; the
    empty list iff the configuration is stuck."""
    out: list[tuple[Config, str]] = []
    avoid = config_vars(cfg)

    def redex(a: Agent, wrap, prefix: str):
        if isinstance(a, Stop):
            return
        if isinstance(a, Tell):
            out.append(
                (
                    Config(wrap(STOP), conjoin(cfg.store, a.payload, rng), cfg.consumed),
                    prefix + "R1",
                )
            )
            return
        if isinstance(a, Choice):
            for i, (g, body) in enumerate(a.branches):
                if entails(cfg.store, g, rng):
                    out.append(
                        (Config(wrap(body), cfg.store, cfg.consumed), prefix + "R2")
                    )
            return
        if isinstance(a, Par):
            redex(a.left, lambda x: wrap(Par(x, a.right)), prefix + "R3L.")
            redex(a.right, lambda x: wrap(Par(a.left, x)), prefix + "R3R.")
            return
        # procedure call
        if p.has(a.pred):
            d = rename_apart(p.decl(a.pred), avoid)
            eqs = mk_conj([Eq(s, t) for s, t in zip(a.args, d.params)])
            out.append(
                (
                    Config(wrap(Par(d.body, Tell(eqs))), cfg.store, cfg.consumed),
                    prefix + "R4",
                )
            )
            return
        spec = stubs.get(a.pred)
        if spec is None:
            if a.pred not in p.stubs:
                raise CCPError(f"call to unknown, unstubbed predicate {a.pred}")
            return  # registered stub without scenario behaviour: suspends
        if spec.kind == "sink":
            out.append((Config(wrap(STOP), cfg.store, cfg.consumed), prefix + "ST"))
            return
        k = cfg.count(a.pred)
        if k >= len(spec.slots):
            return  # exhausted stream suspends
        if not (1 <= spec.bind <= len(a.args)):
            raise CCPError(f"stub {a.pred}: bind index {spec.bind} out of range")
        target = a.args[spec.bind - 1]
        consumed = cfg.bump(a.pred)
        for tok in spec.slots[k]:
            succ = Tell(mk_conj([Eq(target, tok)]))
            out.append((Config(wrap(succ), cfg.store, consumed), prefix + "ST"))

    redex(cfg.agent, lambda x: x, "")
    return out


def redex_rule(label: str) -> str:
    return label.rsplit(".", 1)[-1]


def step_cost(label: str) -> int:
    """Depth cost: synchronizations (R2) and declared-predicate calls (R4)
    count; tell firings and stub effects are free."""
    return 1 if redex_rule(label) in ("R2", "R4") else 0


# ---------------------------------------------------------------------------
# Derivations


@dataclass(frozen=True)
class Derivation:
    initial: Config
    steps: tuple = ()  # tuple[(label, Config), ...]
    status: str = "maximal"  # 'maximal' | 'truncated' | 'failed'

    def wh(self) -> int:
        """Number of steps using rule R2 (Def. Weight)."""
        return sum(1 for lab, _ in self.steps if redex_rule(lab) == "R2")

    def last(self) -> Config:
        return self.steps[-1][1] if self.steps else self.initial

    def configs(self) -> list[Config]:
        return [self.initial] + [c for _, c in self.steps]

    def __repr__(self):
        parts = [repr(self.initial)]
        parts += [f"--{lab}--> {c!r}" for lab, c in self.steps]
        return f"[{self.status}] " + " ".join(parts)


class _Space:
    """Memoized, deduplicated successor relation over canonical configs."""

    def __init__(self, p, stubs, rng, cap):
        self.p, self.stubs, self.rng, self.cap = p, stubs, rng, cap
        self.succs: dict[str, list] = {}
        self.nodes = 0

    def successors(self, cfg: Config) -> list[tuple[Config, str]]:
        key = canon_config(cfg)
        if key in self.succs:
            return self.succs[key]
        self.nodes += 1
        if self.nodes > self.cap:
            raise ResourceLimit(
                f"state cap exceeded ({self.cap} canonical configurations)"
            )
        raw = step(self.p, cfg, self.stubs, self.rng)
        seen: set[str] = set()
        out = []
        for succ, lab in raw:
            k = canon_config(succ)
            if k not in seen:
                seen.add(k)
                out.append((succ, lab))
        self.succs[key] = out
        return out


def derivations(
    p: Program,
    a: Agent,
    c0: Constraint = TRUE_C,
    depth: int = 8,
    stubs: Stubs = NO_STUBS,
    rng: tuple = DEFAULT_INT_RANGE,
    cap: int = DEFAULT_CAP,
) -> list[Derivation]:
    """All derivations from <a, c0> up to `depth` steps, deduplicated modulo
    renaming and store canonicalization.  Branches reaching a false store are
    classified failed and not extended; depth-limited ones are truncated."""
    store0 = store_of(c0, rng) if not isinstance(c0, Store) else c0
    root = Config(a, store0)
    space = _Space(p, stubs, rng, cap)
    out: list[Derivation] = []

    def dfs(cfg: Config, steps: tuple, left: int):
        if len(out) > cap:
            raise ResourceLimit(f"derivation cap exceeded ({cap})")
        if cfg.store.false:
            out.append(Derivation(root, steps, "failed"))
            return
        succs = space.successors(cfg)
        if not succs:
            out.append(Derivation(root, steps, "maximal"))
            return
        truncated_here = False
        for succ, lab in succs:
            c = step_cost(lab)
            if c > left:
                if not truncated_here:
                    out.append(Derivation(root, steps, "truncated"))
                    truncated_here = True
                continue
            dfs(succ, steps + ((lab, succ),), left - c)

    dfs(root, (), depth)
    return out


# ---------------------------------------------------------------------------
# Observables, modes, traces


@dataclass(frozen=True)
class Observation:
    c_in: str
    c_out: str
    mode: str  # 'ss' | 'dd' | 'ff' | 'pp'

    def to_json(self) -> dict:
        return {"in": self.c_in, "out": self.c_out, "mode": self.mode}

    def __repr__(self):
        return f"({self.c_in}, {self.c_out}, {self.mode})"


def _proj_text(store: Store, keep, rng) -> str:
    return projected_text(project(store, keep, rng, warn=False))


def mode(
    p: Program,
    a: Agent,
    d,
    stubs: Stubs = NO_STUBS,
    rng: tuple = DEFAULT_INT_RANGE,
) -> str:
    """The paper's mode partition: exactly one of ss/dd/ff/running."""
    store = d if isinstance(d, Store) else store_of(d, rng)
    if not satisfiable(store, rng):
        return "ff"
    if is_terminal(a):
        return "ss"
    if not step(p, Config(a, store), stubs, rng):
        return "dd"
    return "running"


def _explore(p, a, c0, depth, stubs, rng, cap):
    """Breadth-first reachability over canonical configs.

    Returns (levels, complete) where levels maps canonical key to
    (config, min_depth, successors)."""
    from collections import deque

    store0 = store_of(c0, rng) if not isinstance(c0, Store) else c0
    root = Config(a, store0)
    space = _Space(p, stubs, rng, cap)
    info: dict[str, tuple] = {canon_config(root): (root, 0)}
    frontier = deque([(root, 0)])
    complete = True
    while frontier:
        cfg, d = frontier.popleft()
        if cfg.store.false:
            continue  # failed branches are not extended
        for succ, lab in space.successors(cfg):
            c = step_cost(lab)
            if d + c > depth:
                complete = False
                continue
            k = canon_config(succ)
            if k not in info or info[k][1] > d + c:
                info[k] = (succ, d + c)
                if c == 0:
                    frontier.appendleft((succ, d))
                else:
                    frontier.append((succ, d + c))
    return root, info, space, complete


def observables(
    p: Program,
    a: Agent,
    c0: Constraint = TRUE_C,
    depth: int = 8,
    stubs: Stubs = NO_STUBS,
    rng: tuple = DEFAULT_INT_RANGE,
    cap: int = DEFAULT_CAP,
    proj_vars=None,
) -> tuple[set, bool]:
    """Bounded O(D.A): ss/dd/ff observations with results projected onto
    Var(a, c0) (or proj_vars); complete iff no branch was depth-truncated."""
    store0 = store_of(c0, rng) if not isinstance(c0, Store) else c0
    keep = (
        set(proj_vars)
        if proj_vars is not None
        else agent_free_vars(a) | store0.vars()
    )
    c_in = store_text(store0)
    root, info, space, complete = _explore(p, a, store0, depth, stubs, rng, cap)
    out: set[Observation] = set()
    for key, (cfg, d) in info.items():
        if cfg.store.false:
            out.add(Observation(c_in, "false", "ff"))
            continue
        if not space.successors(cfg):
            m = "ss" if is_terminal(cfg.agent) else "dd"
            out.add(Observation(c_in, _proj_text(cfg.store, keep, rng), m))
    return out, complete


def intermediate(
    p: Program,
    a: Agent,
    c0: Constraint = TRUE_C,
    depth: int = 8,
    stubs: Stubs = NO_STUBS,
    rng: tuple = DEFAULT_INT_RANGE,
    cap: int = DEFAULT_CAP,
    proj_vars=None,
) -> tuple[set, bool]:
    """Bounded O_i(D.A): every projected store reachable within depth, mode pp."""
    store0 = store_of(c0, rng) if not isinstance(c0, Store) else c0
    keep = (
        set(proj_vars)
        if proj_vars is not None
        else agent_free_vars(a) | store0.vars()
    )
    c_in = store_text(store0)
    root, info, space, complete = _explore(p, a, store0, depth, stubs, rng, cap)
    out: set[Observation] = set()
    for key, (cfg, d) in info.items():
        if cfg.store.false:
            continue  # O_i requires satisfiable d
        out.add(Observation(c_in, _proj_text(cfg.store, keep, rng), "pp"))
    return out, complete


@dataclass(frozen=True)
class Trace:
    stores: tuple  # tuple[str, ...], first element the unprojected c0
    mode: str  # 'ss' | 'dd' | 'pp' | 'ff'

    def to_json(self) -> dict:
        return {"stores": list(self.stores), "mode": self.mode}

    def __repr__(self):
        return f"<({'; '.join(self.stores)}), {self.mode}>"


def traces(
    p: Program,
    a: Agent,
    c0: Constraint = TRUE_C,
    depth: int = 8,
    stubs: Stubs = NO_STUBS,
    rng: tuple = DEFAULT_INT_RANGE,
    cap: int = DEFAULT_CAP,
    proj_vars=None,
) -> tuple[set, bool]:
    """Bounded O_t(D.A): per Def. Traces the first element is the initial
    store, later elements are projected onto Var(a, c0); every prefix with
    satisfiable stores contributes a pp trace."""
    store0 = store_of(c0, rng) if not isinstance(c0, Store) else c0
    keep = (
        set(proj_vars)
        if proj_vars is not None
        else agent_free_vars(a) | store0.vars()
    )
    root = Config(a, store0)
    space = _Space(p, stubs, rng, cap)

    first = store_text(store0)
    if store0.false:
        return {Trace((first,), "ff")}, True

    # suffix-trace sets memoized per canonical configuration and remaining
    # depth: interleavings that reconverge are explored once
    memo: dict[tuple, tuple] = {}

    def suffixes(cfg: Config, left: int) -> tuple:
        key = (canon_config(cfg), left)
        if key in memo:
            return memo[key]
        if len(memo) > cap:
            raise ResourceLimit(f"trace state cap exceeded ({cap})")
        out = {((), "pp")}
        complete = True
        succs = space.successors(cfg)
        if not succs:
            out.add(((), "ss" if is_terminal(cfg.agent) else "dd"))
        for succ, lab in succs:
            c = step_cost(lab)
            if c > left:
                complete = False
                continue
            if succ.store.false:
                out.add((("false",), "ff"))
                continue
            txt = _proj_text(succ.store, keep, rng)
            sub, subc = suffixes(succ, left - c)
            complete = complete and subc
            out |= {((txt,) + s, m) for s, m in sub}
        memo[key] = (frozenset(out), complete)
        return memo[key]

    subs, complete = suffixes(root, depth)
    return {Trace((first,) + s, m) for s, m in subs}, complete


# ---------------------------------------------------------------------------
# Weights


UNDEFINED = "undefined"
UNKNOWN = "unknown"


def weight(
    p: Program,
    kind: str,
    a: Agent,
    c: Constraint,
    d: Constraint,
    depth: int = 8,
    stubs: Stubs = NO_STUBS,
    rng: tuple = DEFAULT_INT_RANGE,
    cap: int = DEFAULT_CAP,
):
    """Minimum number of R2 steps over bounded derivations from <a, c> whose
    endpoint matches `kind` with projected result d (Def. Weight, computed in
    the given program).  Returns a natural number, UNDEFINED, or UNKNOWN."""
    if kind not in ("ss", "dd", "ff"):
        raise CCPError(f"weight kind must be ss/dd/ff, got {kind!r}")
    store0 = store_of(c, rng)
    if not satisfiable(store0, rng):
        raise CCPError("weight requires a satisfiable initial constraint")
    keep = agent_free_vars(a) | store0.vars()
    if kind == "ff":
        if not d.false:
            return UNDEFINED
        want = None
    else:
        target = store_of(d, rng)
        if target.false:
            return UNDEFINED  # w_ss/w_dd undefined on false results
        want = projected_text(project(target, keep, rng, warn=False))

    ds = derivations(p, a, store0, depth, stubs, rng, cap)
    best = None
    truncated_min = None
    for der in ds:
        last = der.last()
        if der.status == "failed":
            ok = kind == "ff"
        elif der.status == "maximal":
            if kind == "ff":
                ok = False
            else:
                m = "ss" if is_terminal(last.agent) else "dd"
                ok = m == kind and _proj_text(last.store, keep, rng) == want
        else:
            truncated_min = (
                der.wh() if truncated_min is None else min(truncated_min, der.wh())
            )
            continue
        if ok:
            best = der.wh() if best is None else min(best, der.wh())
    if best is not None and (truncated_min is None or best <= truncated_min):
        return best
    if truncated_min is not None:
        return UNKNOWN
    return UNDEFINED if best is None else best


# ---------------------------------------------------------------------------
# Productivity and required variables


def productive(
    p: Program,
    a: Agent,
    c,
    depth: int = 10,
    stubs: Stubs = NO_STUBS,
    rng: tuple = DEFAULT_INT_RANGE,
    cap: int = DEFAULT_CAP,
) -> str:
    """'productive' | 'not_productive' | 'unknown' per Def. Productive:
    productive when evaluation can strictly strengthen the store on Var(a),
    or when there is no finite maximal derivation (only certifiable on a
    fully explored state space)."""
    store0 = c if isinstance(c, Store) else store_of(c, rng)
    if not satisfiable(store0, rng):
        raise CCPError("productivity is defined for satisfiable stores")
    zvars = agent_free_vars(a)
    base = project(store0, zvars, rng, warn=False)
    root, info, space, complete = _explore(p, a, store0, depth, stubs, rng, cap)
    saw_maximal = False
    saw_false = False
    for key, (cfg, d) in info.items():
        if cfg.store.false:
            saw_false = True
            continue
        if not entails_projected(base, project(cfg.store, zvars, rng, warn=False), rng):
            return "productive"  # strictly strengthened on Var(a)
        if not space.successors(cfg):
            saw_maximal = True
    if complete and not saw_maximal and not saw_false:
        return "productive"  # no finite maximal derivation exists
    if complete and saw_maximal and not saw_false:
        return "not_productive"
    return "unknown"


def requires_var(
    p: Program,
    a: Agent,
    x: str,
    rng: tuple = DEFAULT_INT_RANGE,
) -> str:
    """'certified' or 'unknown' (never a false positive).

    Sound criterion: after unfolding a (possibly nested) call chain and
    eliminating the parameter-passing tells, the agent is a single choice
    each of whose guards entails an equation binding x to a non-variable
    term; no x-free satisfiable store entails such a guard, so the agent
    suspends without output."""
    if x not in agent_free_vars(a):
        raise CCPError(f"{x} does not occur free in the agent")
    cur = a
    for _ in range(len(p.decls) + 1):
        if isinstance(cur, Choice):
            break
        if not isinstance(cur, Call) or not p.has(cur.pred):
            return "unknown"
        d = rename_apart(p.decl(cur.pred), agent_free_vars(cur) | {x})
        sigma = mgu(d.params, cur.args)
        if sigma is None:
            return "unknown"
        if sigma.dom() & (agent_free_vars(cur) | {x}):
            return "unknown"  # call-side variables must stay untouched
        cur = subst_agent(d.body, sigma.mapping())
    if not isinstance(cur, Choice):
        return "unknown"
    for g, _body in cur.branches:
        if not _guard_pins(g, x):
            return "unknown"
    return "certified"


def _guard_pins(g: Guard, x: str) -> bool:
    """The guard entails an equation x = t with t a non-variable term."""
    for at in g.body.atoms:
        if isinstance(at, Eq):
            for lhs, rhs in ((at.lhs, at.rhs), (at.rhs, at.lhs)):
                if isinstance(lhs, Var) and lhs.name == x and not isinstance(rhs, Var):
                    return True
    return False
