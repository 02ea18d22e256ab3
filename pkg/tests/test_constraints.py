"""Constraint domain: solved forms, entailment, projection, unification."""

import pytest
from hypothesis import given, settings, strategies as st

from ccpforge.constraints import (
    EMPTY_STORE,
    FALSE_STORE,
    Subst,
    conjoin,
    disentails,
    entails,
    entails_projected,
    equiv_within,
    mgu,
    project,
    satisfiable,
    store_of,
    store_text,
)
from ccpforge.syntax import (
    CCPError,
    Const,
    FALSE_C,
    Guard,
    TRUE_C,
    Var,
    parse_constraint,
    parse_guard,
    parse_term,
    pretty_guard,
)

from grounding import (
    build_universe,
    disentails_oracle,
    entails_oracle,
    satisfiable_oracle,
    store_depth,
)


def C(text):
    return parse_constraint(text)


def G(text):
    return parse_guard(text)


def S(text):
    return store_of(parse_constraint(text))


class TestConjoin:
    def test_true_binding(self):
        s = conjoin(EMPTY_STORE, C("X = a"))
        assert s.binding() == {"X": Const("a")}

    def test_clash_gives_false(self):
        s = conjoin(S("X = a"), C("X = b"))
        assert s.false
        assert s == FALSE_STORE

    def test_auction_step_simplification(self):
        s = conjoin(S("LastBid /= quit"), C("[LastBid|As] = [HisBid|HL]"))
        assert s.binding() == {"HisBid": Var("LastBid"), "HL": Var("As")}
        assert s.diseqs and not s.false
        assert store_text(s) == "HL=As /\\ HisBid=LastBid /\\ LastBid/=quit"

    def test_never_errors_on_inconsistency(self):
        assert conjoin(FALSE_STORE, C("X = a")).false
        assert conjoin(S("X = 1"), C("X = 2")).false

    def test_idempotent_bindings(self):
        s = conjoin(S("Y = f(Z)"), C("Z = a"))
        assert s.binding()["Y"] == parse_term("f(a)")

    def test_ground_sum_evaluates(self):
        s = conjoin(S("S1 = 0"), C("S = S1 + 2"))
        assert s.binding()["S"] == Const(2)

    def test_sum_overflow_is_false(self):
        assert conjoin(EMPTY_STORE, C("X = 8 + 8")).false

    def test_deferred_sum_resolves_later(self):
        s = conjoin(EMPTY_STORE, C("S = S1 + Y"))
        s = conjoin(s, C("Y = 2"))
        s = conjoin(s, C("S1 = 1"))
        assert s.binding()["S"] == Const(3)

    def test_single_unknown_linear_equation_solves(self):
        s = conjoin(EMPTY_STORE, C("3 = X + 1"))
        assert s.binding()["X"] == Const(2)

    def test_self_referential_sum(self):
        assert conjoin(EMPTY_STORE, C("X = X + 1")).false
        assert not conjoin(EMPTY_STORE, C("X = X + 0")).false

    def test_ill_sorted_sum_is_false(self):
        assert conjoin(S("Y = a"), C("S = Y + 1")).false


class TestSatisfiable:
    def test_true(self):
        assert satisfiable(TRUE_C)

    def test_eq_diseq_clash(self):
        assert not satisfiable(C("X = a /\\ X /= a"))

    def test_arith_window_clash(self):
        assert not satisfiable(C("X >= 0 /\\ X < 0"))

    def test_false(self):
        assert not satisfiable(FALSE_C)

    def test_diseqs_always_jointly_satisfiable(self):
        assert satisfiable(C("X /= Y /\\ X /= Z /\\ Y /= Z /\\ X /= a /\\ Y /= a"))

    def test_comparison_on_non_integer(self):
        assert not satisfiable(C("X = a /\\ X >= 0"))


class TestEntails:
    def test_instantiate_bound_var(self):
        assert entails(S("X = a"), G("exists Y . X = Y"))

    def test_unbound_rigid_var(self):
        assert not entails(EMPTY_STORE, G("X = a"))

    def test_list_pattern(self):
        assert entails(S("Xs = [Y1|Ys1]"), G("exists X,Xs1 . Xs = [X|Xs1]"))

    def test_guard_diseq(self):
        assert entails(S("X = a /\\ Y = b"), G("X /= Y"))
        assert not entails(S("X = a"), G("X /= Y"))

    def test_arith_guard(self):
        assert entails(S("X = 0"), G("X >= 0"))
        assert entails(S("X >= 1"), G("X >= 0"))
        assert not entails(S("X >= 0"), G("X >= 1"))

    def test_exists_diseq_fresh_witness(self):
        assert entails(EMPTY_STORE, G("exists Y . X /= Y"))

    def test_interval_forces_equality(self):
        assert entails(S("X >= 1 /\\ X <= 1"), G("X = 1"))

    def test_pred_atom_only_when_present(self):
        assert entails(S("char(L) /\\ X = a"), G("char(L)"))
        assert not entails(S("X = a"), G("char(L)"))

    def test_reflexive_and_conjunction_monotone(self):
        s = S("X = f(Y) /\\ Y /= a")
        assert entails(s, Guard((), s.constraint()))


class TestDisentails:
    def test_ground_clash(self):
        assert disentails(S("X = a"), G("X = b"))

    def test_open_var(self):
        assert not disentails(EMPTY_STORE, G("X = a"))

    def test_auction_guard(self):
        s = S("LastBid /= quit /\\ HisBid = LastBid")
        assert disentails(s, G("HisBid = quit"))

    def test_exists_block(self):
        assert disentails(S("Xs = []"), G("exists X,Xs1 . Xs = [X|Xs1]"))
        assert not disentails(S("Xs = [a]"), G("exists X,Xs1 . Xs = [X|Xs1]"))


class TestProject:
    def test_keep_subset(self):
        p = project(S("X = a /\\ Z = b"), {"X"})
        assert pretty_guard(p) == "X = a"

    def test_false(self):
        p = project(FALSE_STORE, {"X"})
        assert p.body.false

    def test_transitive_closure(self):
        p = project(S("Y = f(Z) /\\ Z = a"), {"Y"})
        assert pretty_guard(p) == "Y = f(a)"

    def test_hidden_var_kept_existentially(self):
        p = project(S("Y = f(a, W)"), {"Y"})
        assert pretty_guard(p) == "exists E1 . Y = f(a,E1)"

    def test_projection_entailed_by_store(self):
        s = S("X = f(Y) /\\ Y = g(W) /\\ W /= a")
        p = project(s, {"X"})
        assert entails(s, p)

    def test_hidden_binding_to_kept_term_vanishes(self):
        p = project(S("HB = LastBid /\\ LastBid /= quit"), {"LastBid", "As"})
        assert pretty_guard(p) == "LastBid /= quit"


class TestMgu:
    def test_list_pattern(self):
        s = mgu((parse_term("[X|Xs]"),), (parse_term("[a|Ys]"),))
        assert s.mapping() == {"X": Const("a"), "Xs": Var("Ys")}

    def test_clash(self):
        assert mgu((parse_term("f(X)"),), (parse_term("g(X)"),)) is None

    def test_occurs(self):
        assert mgu((Var("X"),), (parse_term("f(X)"),)) is None

    def test_relevant_and_idempotent(self):
        s = mgu(
            (parse_term("f(X, g(Y))"),),
            (parse_term("f(h(Z), g(Z))"),),
        )
        applied_l = s.apply(parse_term("f(X, g(Y))"))
        applied_r = s.apply(parse_term("f(h(Z), g(Z))"))
        assert applied_l == applied_r
        assert s.dom() <= {"X", "Y", "Z"}
        assert s.ran() <= {"X", "Y", "Z"}

    def test_subst_rejects_non_idempotent(self):
        with pytest.raises(CCPError):
            Subst.of({"X": parse_term("f(X)")})


class TestEquivWithin:
    def test_reflexive(self):
        c = C("X = a")
        assert equiv_within(c, c, C("Y /= b"), {"X", "Y"})

    def test_auction_branch2_true(self):
        g2 = G("exists HisBid,HisList1 . [LastBid|As] = [HisBid|HisList1]")
        pcc = C("LastBid /= quit")
        z = {"LastBid", "As", "Bs", "MyBid"}
        assert equiv_within(g2, TRUE_C, pcc, z)

    def test_auction_branch1_false(self):
        g1 = G(
            "exists HisBid,HisList1 . [LastBid|As] = [HisBid|HisList1] "
            "/\\ HisBid = quit"
        )
        pcc = C("LastBid /= quit")
        z = {"LastBid", "As", "Bs", "MyBid"}
        assert equiv_within(g1, FALSE_C, pcc, z)

    def test_not_equivalent(self):
        assert not equiv_within(C("X = a"), TRUE_C, TRUE_C, {"X"})


# ---------------------------------------------------------------------------
# Oracle-backed property tests (small random stores; the exhaustive
# acceptance-scale agreement run lives in test_acceptance.py)

RNG = (-2, 2)
# free variables range at depth 2; existential witnesses one constructor
# application deeper (the oracle universe must be f-closed above the free
# range); term literals in the pool stay at depth <= 1
UNIVERSE = build_universe(["a", "b"], RNG, depth=2, n_fresh=3)
WIT_UNIVERSE = build_universe(["a", "b"], RNG, depth=3, n_fresh=3)

_terms = st.sampled_from(
    [
        "X", "Y", "Z", "a", "b", "0", "1", "f(X)", "f(a)", "f(Y)",
    ]
)
_arith_terms = st.sampled_from(["X", "Y", "Z", "0", "1", "-1", "X + 1", "X + Y"])
_ops = st.sampled_from(["<", "<=", ">", ">="])


@st.composite
def atoms(draw):
    kind = draw(st.sampled_from(["eq", "neq", "cmp", "aeq"]))
    if kind == "cmp":
        return f"{draw(_arith_terms)} {draw(_ops)} {draw(_arith_terms)}"
    if kind == "aeq":
        return f"{draw(_arith_terms)} = {draw(_arith_terms)}"
    op = "=" if kind == "eq" else "/="
    return f"{draw(_terms)} {op} {draw(_terms)}"


@st.composite
def constraints(draw):
    n = draw(st.integers(0, 3))
    if n == 0:
        return TRUE_C
    return C(" /\\ ".join(draw(atoms()) for _ in range(n)))


@settings(max_examples=150, deadline=None)
@given(constraints())
def test_satisfiable_agrees_with_grounding(c):
    s = store_of(c, RNG)
    if not s.false and store_depth(s) > 2:
        return  # outside the finite universe's reach
    assert satisfiable(c, RNG) == satisfiable_oracle(c, UNIVERSE, RNG)


@settings(max_examples=100, deadline=None)
@given(constraints(), constraints())
def test_entails_agrees_with_grounding(c, d):
    s = store_of(c, RNG)
    if s.false or store_depth(s) > 1:
        return
    g = Guard((), d)
    assert entails(s, g, RNG) == entails_oracle(
        s.constraint(), g, WIT_UNIVERSE, RNG, UNIVERSE
    )


@settings(max_examples=100, deadline=None)
@given(constraints(), constraints())
def test_disentails_agrees_with_grounding(c, d):
    s = store_of(c, RNG)
    if s.false or store_depth(s) > 1:
        return
    g = Guard((), d)
    assert disentails(s, g, RNG) == disentails_oracle(
        s.constraint(), g, UNIVERSE, RNG
    )


@settings(max_examples=100, deadline=None)
@given(constraints(), constraints())
def test_monotone_accumulation(c, d):
    s = conjoin(store_of(c, RNG), d, RNG)
    if s.false:
        return
    assert entails(s, Guard((), d), RNG)


@settings(max_examples=100, deadline=None)
@given(constraints())
def test_project_onto_own_vars_is_equivalent(c):
    s = store_of(c, RNG)
    if s.false:
        return
    p = project(s, {v for v, _ in s.eqs} | s.vars(), RNG)
    assert entails(s, p, RNG)
    assert entails_projected(p, Guard((), s.constraint()), RNG)


@settings(max_examples=100, deadline=None)
@given(constraints(), st.sets(st.sampled_from(["X", "Y", "Z"])))
def test_project_is_monotone(c, keep):
    s = store_of(c, RNG)
    if s.false:
        return
    assert entails(s, project(s, keep, RNG, warn=False), RNG)
