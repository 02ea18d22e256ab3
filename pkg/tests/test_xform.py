"""Transformation operations: produced constraints, applicability, rewrites."""

import pytest

from ccpforge.constraints import Subst
from ccpforge.syntax import (
    Branch,
    Context,
    ContextPath,
    ParL,
    ParR,
    alpha_ac_equal,
    alpha_ac_equal_agents,
    parse_agent,
    parse_constraint,
    parse_guard,
    parse_program,
    parse_term,
    pretty,
    pretty_agent,
    pretty_constraint,
    split,
)
from ccpforge.xform import (
    History,
    XformError,
    apply_script,
    ask_simplify,
    backward_instantiate,
    branch_eliminate,
    cons_ask_eliminate,
    distribute,
    extended_fold,
    fold,
    pc,
    pca,
    remove_stop,
    rename_branch_local,
    tell_eliminate,
    tell_introduce,
    tell_simplify,
    unfold,
    wpc,
)


def P(text, stubs=()):
    return parse_program(text, stubs)


def path(decl, *steps):
    return ContextPath(decl, tuple(steps))


def ctx_of(program_text, decl, *steps, stubs=()):
    d = P(program_text, stubs).decl(decl)
    c, _ = split(d, path(decl, *steps))
    return c


class TestProducedConstraints:
    def test_pc_parallel_tell(self):
        c = Context(parse_agent("x || tell(c = c)"), (ParL,))
        assert pretty_constraint(pc(c).body) == "c = c"
        assert wpc(c).body.is_true()

    def test_pc_through_guards(self):
        body = parse_agent("tell(c = c) || ask(d = d) -> (ask(e = e) -> x)")
        c = Context(body, (ParR, Branch(0), Branch(0)))
        assert pretty_constraint(pc(c).body) == "c = c /\\ d = d /\\ e = e"
        assert pretty_constraint(wpc(c).body) == "d = d /\\ e = e"

    def test_pca_cases(self):
        assert pca(parse_agent("p(X)")).is_true()
        assert pca(parse_agent("stop")).is_true()
        assert pretty_constraint(pca(parse_agent("tell(a = a) || tell(b = b)"))) == (
            "a = a /\\ b = b"
        )
        assert pca(parse_agent("ask(a = a) -> tell(b = b)")).is_true()

    def test_wpc_trivial_hole(self):
        assert wpc(Context(parse_agent("stop"), ())).body.is_true()


class TestUnfold:
    def test_mechanical(self):
        p = P("p <- q(a).  q(X) <- tell(X = b).")
        out = unfold(p, path("p"))
        assert alpha_ac_equal_agents(
            out.decl("p").body, parse_agent("tell(X1 = b) || tell(a = X1)")
        )

    def test_not_a_call(self):
        p = P("p <- tell(X = a).")
        with pytest.raises(XformError):
            unfold(p, path("p"))

    def test_stub_rejected(self):
        p = P("p <- get_token(X).")
        with pytest.raises(XformError):
            unfold(p, path("p"))

    def test_zero_arity_emits_tell_true(self):
        p = P("p <- q.  q <- stop.")
        out = unfold(p, path("p"))
        assert pretty_agent(out.decl("p").body) == "stop || tell(true)"


class TestTellEliminate:
    def test_paper_local_binding(self):
        p = P("p(Y) <- tell(Z = a) || tell(Y = f(Z)).")
        out = tell_eliminate(p, path("p", ParL))
        assert pretty_agent(out.decl("p").body) == "tell(Y = f(a))"

    def test_restricted_rejects_head_variable_in_component(self):
        p = P("p(Y) <- tell(Z = a) || tell(Y = f(Z)).")
        with pytest.raises(XformError):
            tell_eliminate(p, path("p", ParL), restricted=True)

    def test_tell_true_removal(self):
        p = P("p <- tell(true) || q.", stubs=["q"])
        out = tell_eliminate(p, path("p", ParL))
        assert pretty_agent(out.decl("p").body) == "q"

    def test_cluster_absorption(self):
        # the unifier applies to the whole cluster, as the worked examples use it
        p = P("cd <- collect(Xs) || (q || tell(Xs = [Y|Ys])).", stubs=["collect", "q"])
        out = tell_eliminate(p, path("cd", ParR, ParR))
        assert alpha_ac_equal_agents(
            out.decl("cd").body, parse_agent("collect([Y|Ys]) || q")
        )

    def test_domain_variable_escape(self):
        p = P("p(Y) <- tell(Y = a) || q.", stubs=["q"])
        with pytest.raises(XformError):
            tell_eliminate(p, path("p", ParL))

    def test_orientation_prefers_context_variables(self):
        # mgu of [Y|Ys] and [X|Xs] must bind X, Xs (the local side): Y, Ys
        # occur in the context
        p = P(
            "cd <- (tell([Y|Ys] = [X|Xs]) || get_token(X) || collect(Xs)) || deliver(Y, Ys).",
            stubs=["collect", "deliver"],
        )
        out = tell_eliminate(p, path("cd", ParL, ParL))
        assert alpha_ac_equal_agents(
            out.decl("cd").body,
            parse_agent("(get_token(Y) || collect(Ys)) || deliver(Y, Ys)"),
        )

    def test_no_parallel_component(self):
        p = P("p <- tell(X = a).")
        with pytest.raises(XformError):
            tell_eliminate(p, path("p"))

    def test_arithmetic_payload_rejected(self):
        p = P("p(S) <- tell(S = S1 + 1) || q.", stubs=["q"])
        with pytest.raises(XformError):
            tell_eliminate(p, path("p", ParL))


class TestTellIntroduce:
    def test_paper_example(self):
        p = P("p <- q(f(a)).", stubs=["q"])
        out = tell_introduce(p, path("p"), Subst.of({"X": parse_term("f(a)")}))
        assert pretty_agent(out.decl("p").body) == "tell(X = f(a)) || q(X)"

    def test_round_trip_with_elimination(self):
        p = P("p <- q(f(a)).", stubs=["q"])
        out = tell_introduce(p, path("p"), Subst.of({"X": parse_term("f(a)")}))
        back = tell_eliminate(out, path("p", ParL))
        assert alpha_ac_equal(back, p)

    def test_non_idempotent_rejected(self):
        with pytest.raises(Exception):
            Subst.of({"X": parse_term("f(X)")})

    def test_domain_must_be_fresh(self):
        p = P("p(X) <- q(f(a)).", stubs=["q"])
        with pytest.raises(XformError):
            tell_introduce(p, path("p"), Subst.of({"X": parse_term("f(a)")}))


class TestBackwardInstantiate:
    def test_true_case(self):
        p = P("p <- q(a).  q(X) <- stop.")
        out = backward_instantiate(p, path("p"))
        assert alpha_ac_equal_agents(
            out.decl("p").body, parse_agent("q(a) || tell(a = X1)")
        )

    def test_with_leading_tell(self):
        p = P("p <- q(a).  q(X) <- tell(X = b) || stop.")
        out = backward_instantiate(p, path("p"), include_tell_c=True)
        assert alpha_ac_equal_agents(
            out.decl("p").body,
            parse_agent("q(a) || tell(X1 = b) || tell(a = X1)"),
        )

    def test_without_tell_c(self):
        p = P("p <- q(a).  q(X) <- tell(X = b) || stop.")
        out = backward_instantiate(p, path("p"), include_tell_c=False)
        assert alpha_ac_equal_agents(
            out.decl("p").body, parse_agent("q(a) || tell(a = X1)")
        )

    def test_not_a_call(self):
        p = P("p <- stop.")
        with pytest.raises(XformError):
            backward_instantiate(p, path("p"))


class TestAskTellSimplify:
    def test_guard_replaced_by_itself(self):
        p = P("p <- ask(X = a) -> stop + ask(X = b) -> stop.")
        out = ask_simplify(
            p, path("p"), [parse_guard("X = a"), parse_guard("X = b")]
        )
        assert out.decl("p").body == p.decl("p").body

    def test_auction_style_false_true(self):
        p = P(
            "r(LastBid) <- tell(LastBid /= quit) || ("
            "  ask(exists HB,HL . [LastBid|As] = [HB|HL] /\\ HB = quit) -> stop"
            "+ ask(exists HB,HL . [LastBid|As] = [HB|HL] /\\ HB /= quit) -> q)."
            , stubs=["q"]
        )
        out = ask_simplify(
            p,
            path("r", ParR),
            [parse_guard("false"), parse_guard("true")],
        )
        gs = [g for g, _ in out.decl("r").body.right.branches]
        assert gs[0].is_false() and gs[1].is_true()

    def test_wrong_guard_reported(self):
        p = P("p <- ask(X = a) -> stop + ask(X = b) -> stop.")
        with pytest.raises(XformError) as e:
            ask_simplify(p, path("p"), [parse_guard("true"), parse_guard("X = b")])
        assert "branch 0" in str(e.value)

    def test_restricted_uses_wpc(self):
        # under pc the tell justifies the simplification; under wpc it must fail
        p = P("p <- tell(X = a) || ask(true) -> tell(Y = b).")
        out = ask_simplify(p, path("p", ParR), [parse_guard("X = a")])
        assert not out.decl("p").body.right.branches[0][0].is_true()
        with pytest.raises(XformError):
            ask_simplify(p, path("p", ParR), [parse_guard("X = a")], restricted=True)

    def test_sumlen_tell_simplification(self):
        p = P(
            "s(Xs) <- tell(Xs = [Y|Ys]) || tell(Xs = [Y1|Ys1]) || q(Y1, Ys1).",
            stubs=["q"],
        )
        out = tell_simplify(
            p, path("s", ParR, ParL), parse_constraint("[Y|Ys] = [Y1|Ys1]")
        )
        assert pretty_agent(out.decl("s").body.right.left) == "tell([Y|Ys] = [Y1|Ys1])"


class TestBranchEliminate:
    def test_removes_false_branch(self):
        p = P("p <- ask(false) -> stop + ask(true) -> q.", stubs=["q"])
        out = branch_eliminate(p, path("p"), 0)
        assert len(out.decl("p").body.branches) == 1

    def test_single_branch_rejected(self):
        p = P("p <- ask(false) -> stop.")
        with pytest.raises(XformError):
            branch_eliminate(p, path("p"), 0)

    def test_non_false_guard_rejected(self):
        p = P("p <- ask(X = a) -> stop + ask(true) -> stop.")
        with pytest.raises(XformError):
            branch_eliminate(p, path("p"), 0)


class TestConsAskEliminate:
    def test_single_true_branch(self):
        p = P("p <- ask(true) -> (tell(X = a) || q).", stubs=["q"])
        out = cons_ask_eliminate(p, path("p"))
        assert pretty_agent(out.decl("p").body) == "tell(X = a) || q"

    def test_multi_branch_rejected(self):
        p = P("p <- ask(true) -> stop + ask(b = b) -> stop.")
        with pytest.raises(XformError):
            cons_ask_eliminate(p, path("p"))

    def test_bound_vars_rejected(self):
        p = P("p <- ask(exists X . true) -> stop.")
        with pytest.raises(XformError):
            cons_ask_eliminate(p, path("p"))


class TestRemoveStop:
    def test_right_stop(self):
        p = P("p <- broadcast(a_quits) || stop.")
        out = remove_stop(p, path("p"))
        assert pretty_agent(out.decl("p").body) == "broadcast(a_quits)"

    def test_stop_stop(self):
        p = P("p <- stop || stop.")
        out = remove_stop(p, path("p"))
        assert pretty_agent(out.decl("p").body) == "stop"

    def test_bare_stop_rejected(self):
        p = P("p <- stop.")
        with pytest.raises(XformError):
            remove_stop(p, path("p"))


class TestDistribute:
    CD = (
        "cd <- get_token(Y) || collect(Ys) || ("
        "  ask(Y = eof) -> tell(Ys = [])"
        "+ ask(Y /= eof) -> (deliver_token(Y) || deliver(Ys)))."
    )

    def collect_program(self):
        base = open("programs/collect_deliver.ccp").read()
        return P(base + self.CD, stubs=["deliver_token", "get_token"])

    def test_certified_by_required_variable(self):
        p = self.collect_program()
        out, obligation = distribute(p, path("cd", ParR, ParL))
        assert obligation is None
        body = out.decl("cd").body
        assert alpha_ac_equal_agents(
            body,
            parse_agent(
                "get_token(Y) || ("
                "  ask(Y = eof) -> (collect(Ys) || tell(Ys = []))"
                "+ ask(Y /= eof) -> (collect(Ys) || deliver_token(Y) || deliver(Ys)))"
            ),
        )

    def test_blind_distribution_rejected(self):
        p = P(open("programs/contrived.ccp").read())
        with pytest.raises(XformError) as e:
            distribute(p, path("p", ParL))
        assert "not certified" in str(e.value)

    def test_blind_distribution_forced(self):
        p = P(open("programs/contrived.ccp").read())
        out, obligation = distribute(p, path("p", ParL), force=True)
        assert obligation is not None
        assert alpha_ac_equal_agents(
            out.decl("p").body,
            parse_agent("ask(X >= 0) -> (q(X) || tell(Y = 0))"),
        )

    def test_enabled_branch_condition(self):
        p = P("p <- tell(X = a) || ask(false) -> stop.")
        with pytest.raises(XformError) as e:
            distribute(p, path("p", ParL))
        assert "condition (a)" in str(e.value)


class TestFold:
    def test_collect_deliver_fold(self):
        d0 = P(open("programs/collect_deliver.ccp").read())
        p = P(
            open("programs/collect_deliver.ccp").read().replace(
                "collect_deliver <- collect(Xs) || deliver(Xs).",
                "collect_deliver <- get_token(Y) || ("
                "  ask(Y = eof) -> (collect(Ys) || tell(Ys = []))"
                "+ ask(Y /= eof) -> (collect(Ys2) || deliver_token(Y) || deliver(Ys2))).",
            )
        )
        out = fold(
            p,
            path("collect_deliver", ParR, Branch(1)),
            d0.decl("collect_deliver"),
        )
        assert alpha_ac_equal_agents(
            out.decl("collect_deliver").body.right.branches[1][1],
            parse_agent("collect_deliver || deliver_token(Y)"),
        )

    def test_variable_condition_reported(self):
        # Ys escapes into the other branch and is not in the folding head
        p = P(
            "f <- q(Xs) || r(Xs).  "
            "h <- ask(a = a) -> (q(Ys) || r(Ys)) + ask(b = b) -> q(Ys).",
            stubs=["q", "r"],
        )
        with pytest.raises(XformError) as e:
            fold(p, path("h", Branch(0)), p.decl("f"))
        assert "Ys" in str(e.value)

    def test_non_guarding_without_history(self):
        p = P("f <- q(Xs) || r(Xs).  h <- q(Ys) || r(Ys).", stubs=["q", "r"])
        with pytest.raises(XformError):
            fold(p, path("h"), p.decl("f"))

    def test_propagation_escape_with_clean_history(self):
        d0 = P("f <- q(Xs) || r(Xs).  h <- q(Ys) || r(Ys).", stubs=["q", "r"])
        history = History(d0)
        out = fold(d0, path("h"), d0.decl("f"), history)
        assert pretty_agent(out.decl("h").body) == "f"

    def test_not_alpha_equal(self):
        p = P(
            "f <- q(Xs) || r(Xs).  h <- ask(a = a) -> (q(Ys) || r(Zs)).",
            stubs=["q", "r"],
        )
        with pytest.raises(XformError):
            fold(p, path("h", Branch(0)), p.decl("f"))


class TestExtendedFold:
    def test_constant_instance(self):
        p = P(
            "ht(L, State) <- q(L) || m(L, State).  "
            "host <- ask(a = a) -> (q(W) || m(W, left)).",
            stubs=["q", "m"],
        )
        out = extended_fold(
            p, path("host", Branch(0)), p.decl("ht"), {"State": parse_term("left")}
        )
        assert pretty_agent(out.decl("host").body) == "ask(a = a) -> ht(W,left)"

    def test_identity_reduces_to_fold(self):
        p = P(
            "f <- q(Xs) || r(Xs).  h <- ask(a = a) -> (q(Ys) || r(Ys)).",
            stubs=["q", "r"],
        )
        out = extended_fold(p, path("h", Branch(0)), p.decl("f"), {})
        out2 = fold(p, path("h", Branch(0)), p.decl("f"))
        assert out == out2

    def test_matches_three_primitive_composition(self):
        p = P(
            "fd(X) <- q(X) || r(X).  h <- ask(a = a) -> (q(f(a)) || r(f(a))).",
            stubs=["q", "r"],
        )
        macro = extended_fold(
            p, path("h", Branch(0)), p.decl("fd"), {"X": parse_term("f(a)")}
        )
        manual = tell_introduce(
            p, path("h", Branch(0)), Subst.of({"X1": parse_term("f(a)")})
        )
        manual = fold(manual, path("h", Branch(0), ParR), p.decl("fd"))
        manual = tell_eliminate(manual, path("h", Branch(0), ParL))
        assert alpha_ac_equal(macro, manual)

    def test_local_substitution_rejected(self):
        p = P(
            "fd(X) <- q(X, Loc) || r(Loc).  h <- ask(a = a) -> (q(W, b) || r(b)).",
            stubs=["q", "r"],
        )
        with pytest.raises(XformError) as e:
            extended_fold(p, path("h", Branch(0)), p.decl("fd"), {"Loc": parse_term("b")})
        assert "head" in str(e.value)


class TestRenameBranchLocal:
    def test_renames_one_branch(self):
        p = P(
            "p <- ask(a = a) -> tell(Bs = [quit|Bs1]) + ask(b = b) -> tell(Bs = [x|Bs1]).",
        )
        out = rename_branch_local(p, path("p"), 0, ["Bs"])
        g0, b0 = out.decl("p").body.branches[0]
        g1, b1 = out.decl("p").body.branches[1]
        assert "Bs2" in pretty_agent(b0)
        assert "Bs =" in pretty_agent(b1)

    def test_occurrence_outside_choice_rejected(self):
        p = P("p <- q(Bs) || (ask(a = a) -> tell(Bs = []) + ask(b = b) -> stop).", stubs=["q"])
        with pytest.raises(XformError):
            rename_branch_local(p, path("p", ParR), 0, ["Bs"])

    def test_head_param_rejected(self):
        p = P("p(Bs) <- ask(a = a) -> tell(Bs = []) + ask(b = b) -> stop.")
        with pytest.raises(XformError):
            rename_branch_local(p, path("p"), 0, ["Bs"])


class TestApplyScript:
    def test_empty_script(self):
        p = P("p <- stop.")
        out, history = apply_script(p, [], [])
        assert out == p and not history.snapshots

    def test_error_reports_index(self):
        p = P("p <- stop.")
        with pytest.raises(XformError) as e:
            apply_script(p, [], [{"op": "unfold", "decl": "p", "path": []}])
        assert str(e.value).startswith("step 0")

    def test_restricted_flag_tracking(self):
        p = P("p <- tell(true) || q.  q <- stop.")
        script = [
            {"op": "tell_eliminate", "decl": "p", "path": ["parL"], "restricted": True},
            {"op": "unfold", "decl": "p", "path": []},
        ]
        out, history = apply_script(p, [], script)
        assert history.restricted_sequence()
        script2 = [
            {"op": "tell_eliminate", "decl": "p", "path": ["parL"]},
        ]
        _, h2 = apply_script(p, [], script2)
        assert not h2.restricted_sequence()
