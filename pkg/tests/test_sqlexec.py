import pytest

from tabenc.core import Table, ValidationError, derive_rng
from tabenc.datagen import ALL_TEMPLATES, build_query, instantiate_template
from tabenc.sqlexec import (
    Atom,
    ExecutionError,
    InCondition,
    Query,
    SqlSyntaxError,
    SubqueryCondition,
    WhereChain,
    denotation_accuracy,
    denotation_match,
    execute,
    parse_sql,
    unparse,
)

from conftest import make_table, naive_execute

T = Table(
    ("c1", "c2", "c3"),
    (
        ("1", "5", "9"),
        ("2", "5", "8"),
        ("1", "6", "9"),
        ("3", "5", "9"),
    ),
)


# ---------------------------------------------------------------------------
# execution semantics
# ---------------------------------------------------------------------------

def test_select_all_in_row_order():
    assert execute("select c2", T) == ["5", "5", "6", "5"]


def test_from_table_is_accepted():
    assert execute("select c1 from table", T) == execute("select c1", T)
    with pytest.raises(SqlSyntaxError):
        parse_sql("select c1 from tbl")


def test_single_atoms():
    assert execute("select c1 where c2 = 5", T) == ["1", "2", "3"]
    assert execute("select c1 where c2 != 5", T) == ["1"]


def test_left_associative_equal_precedence():
    # ((c2 = 6 or c3 = 8) and c1 = 9) is False everywhere; conventional
    # and-binds-tighter reading would instead keep rows 2 and 3
    assert execute("select c1 where c2 = 6 or c3 = 8 and c1 = 9", T) == []
    # flipped case where the two readings differ on row 1 ("1","5","9"):
    # left-assoc ((c2=5 and c3=8) or c1=1) keeps it; it matches
    assert "1" in execute("select c1 where c2 = 5 and c3 = 8 or c1 = 1", T)


def test_limit_truncates_in_order():
    assert execute("select c1 limit 2", T) == ["1", "2"]
    assert execute("select c1 where c2 = 5 limit 1", T) == ["1"]
    assert execute("select c1 limit 9", T) == ["1", "2", "1", "3"]


def test_in_membership():
    assert execute("select c3 where c1 in (1, 3)", T) == ["9", "9", "9"]
    assert execute("select c1 where c1 in (7)", T) == []


def test_subquery_membership():
    # inner: c2 values where c2 = 5 -> {"5"}; outer keeps rows whose c2 is in it
    got = execute("select c1 where c2 = ( select c2 where c2 = 5 )", T)
    assert got == ["1", "2", "3"]
    # inner result empty -> nothing matches
    assert execute("select c1 where c2 = ( select c2 where c2 = 7 )", T) == []


def test_cells_compare_as_strings():
    padded = Table(("c1",), (("07",), ("7",)))
    assert execute("select c1 where c1 = 7", padded) == ["7"]
    assert execute("select c1 where c1 = 07", padded) == ["07"]


def test_keywords_case_insensitive():
    assert execute("SELECT c1 WHERE c2 = 5 LIMIT 2", T) == ["1", "2"]


def test_unknown_column_is_execution_error():
    with pytest.raises(ExecutionError):
        execute("select nope", T)
    with pytest.raises(ExecutionError):
        execute("select c1 where nope = 5", T)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def test_parse_shapes():
    q = parse_sql("select c1 where c2 = 5 and c3 != 9 limit 2")
    assert q.select_col == "c1"
    assert isinstance(q.where, WhereChain)
    assert q.where.atoms == (Atom("c2", "=", "5"), Atom("c3", "!=", "9"))
    assert q.where.connectives == ("and",)
    assert q.limit == 2

    q = parse_sql("select c1 where c2 in (1, 2, 3)")
    assert q.where == InCondition("c2", ("1", "2", "3"))

    q = parse_sql("select c1 where c2 = ( select c2 where c2 = 4 )")
    assert q.where == SubqueryCondition("c2", "c2", Atom("c2", "=", "4"))


def test_syntax_error_offsets():
    with pytest.raises(SqlSyntaxError) as e:
        parse_sql("select c1 wher c2 = 5")
    assert e.value.offset == 10
    with pytest.raises(SqlSyntaxError) as e:
        parse_sql("select c1 where c2 =")
    assert e.value.offset == len("select c1 where c2 =")
    with pytest.raises(SqlSyntaxError) as e:
        parse_sql("select c1 %")
    assert e.value.offset == 10


def test_grammar_caps():
    parse_sql("select c1 where c1 = 1 and c1 = 2 and c1 = 3 and c1 = 4")
    with pytest.raises(SqlSyntaxError):
        parse_sql("select c1 where c1 = 1 and c1 = 2 and c1 = 3 and c1 = 4 and c1 = 5")
    parse_sql("select c1 where c1 in (1, 2, 3)")
    with pytest.raises(SqlSyntaxError):
        parse_sql("select c1 where c1 in (1, 2, 3, 4)")


def test_rejections():
    bad = [
        "",
        "select",
        "select c1 extra",
        "select c1 limit 0",
        "select c1 where c1 in ()",
        "select c1 where c1 = ( select c1 where c1 != 5 )",  # subquery wants =
        "select where",
        "select c1 where and = 3",
        "select c1 where c1 < 5",
    ]
    for text in bad:
        with pytest.raises(SqlSyntaxError):
            parse_sql(text)


def test_unparse_round_trip(rng):
    for _ in range(300):
        t = make_table(rng, n_cols=4)
        template = ALL_TEMPLATES[int(rng.integers(0, len(ALL_TEMPLATES)))]
        q = build_query(template, t, rng)
        assert parse_sql(unparse(q)) == q


# ---------------------------------------------------------------------------
# differential: package evaluator vs independent string-surgery oracle
# ---------------------------------------------------------------------------

def test_evaluator_matches_naive_oracle(rng):
    mismatches = 0
    for i in range(1500):
        t = make_table(rng, n_cols=max(4, int(rng.integers(4, 7))), value_max=12)
        template = ALL_TEMPLATES[i % len(ALL_TEMPLATES)]
        satisfiable = bool(rng.random() < 0.8)
        text = instantiate_template(template, t, rng, satisfiable=satisfiable, value_max=12)
        if execute(text, t) != naive_execute(text, t):
            mismatches += 1
    assert mismatches == 0


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def test_denotation_match_multiset_vs_set():
    assert denotation_match(["1", "2"], ["2", "1"])
    assert not denotation_match(["1", "1"], ["1"])
    assert denotation_match(["1", "1"], ["1"], set_semantics=True)
    assert denotation_match([], [])


def test_denotation_accuracy():
    preds = [["1"], ["2", "3"], []]
    golds = [["1"], ["3", "2"], ["4"]]
    assert denotation_accuracy(preds, golds) == pytest.approx(2 / 3)
    with pytest.raises(ValidationError):
        denotation_accuracy([["1"]], [])
    with pytest.raises(ValidationError):
        denotation_accuracy([], [])
    with pytest.raises(ValidationError):
        denotation_accuracy([["1"]], [["1"], ["2"]])
