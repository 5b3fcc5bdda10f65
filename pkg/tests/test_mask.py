import numpy as np
import pytest

from tabenc.core import Table, TabencError, ValidationError
from tabenc.linearize import TokenRole, linearize
from tabenc.mask import (
    BIAS_CLASSES,
    N_BIAS_CLASSES,
    block_area,
    blocks_cover,
    build_bias_map,
    build_mask,
    build_mask_bruteforce,
    export_blocks,
    read_blocks_file,
    sparsity,
    write_blocks_file,
)

from conftest import make_table, random_question

ALL_SCHEMES = ("M0", "M1", "M2", "M3", "M4", "M5", "M6")
STRUCTURAL = ("M4", "M5", "M6")


def legal_pairs():
    for t in ("T0", "T1", "T2"):
        for m in ALL_SCHEMES:
            if m in STRUCTURAL and t != "T2":
                continue
            yield t, m


# ---------------------------------------------------------------------------
# differential: vectorized construction vs the per-pair predicate
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("tokens,scheme", list(legal_pairs()))
def test_build_matches_bruteforce(rng, tokens, scheme):
    for _ in range(10):
        t = make_table(rng)
        enc = linearize(random_question(rng, t), t, tokens)
        fast = build_mask(enc, scheme)
        slow = build_mask_bruteforce(enc, scheme)
        assert np.array_equal(fast.dense, slow.dense)


# ---------------------------------------------------------------------------
# structural facts
# ---------------------------------------------------------------------------

def enc_t2(rng=None, rows=2, cols=2):
    t = Table(
        tuple(f"c{j+1}" for j in range(cols)),
        tuple(tuple(str((i * cols + j) % 10) for j in range(cols)) for i in range(rows)),
    )
    return linearize("select c1", t, "T2")


def test_m0_is_all_ones():
    enc = enc_t2()
    m = build_mask(enc, "M0")
    assert m.dense.all()
    assert sparsity(m) == 0.0
    assert export_blocks(m) == ((0, len(enc), 0, len(enc)),)


def test_masks_are_symmetric_with_diagonal(rng):
    for _ in range(10):
        t = make_table(rng)
        enc = linearize("select c1", t, "T2")
        for scheme in ALL_SCHEMES:
            d = build_mask(enc, scheme).dense
            assert np.array_equal(d, d.T)
            assert d.diagonal().all()


def test_containments(rng):
    # M2 and M3 allow subsets of M1; M6's non-question links are relays only,
    # so M6 is contained in M4 and in M5
    for _ in range(10):
        t = make_table(rng)
        enc = linearize(random_question(rng, t), t, "T2")
        m = {s: build_mask(enc, s).dense for s in ALL_SCHEMES}
        assert not (m["M2"] & ~m["M1"]).any()
        assert not (m["M3"] & ~m["M1"]).any()
        assert not (m["M6"] & ~m["M4"]).any()
        assert not (m["M6"] & ~m["M5"]).any()
        assert not (m["M2"] & ~m["M4"]).any()
        assert not (m["M3"] & ~m["M5"]).any()


def test_question_band_always_allowed(rng):
    for _ in range(5):
        t = make_table(rng)
        enc = linearize("select c1 where c1 = 5", t, "T2")
        q = enc.roles == TokenRole.QUESTION
        for scheme in ALL_SCHEMES:
            d = build_mask(enc, scheme).dense
            assert d[q, :].all()
            assert d[:, q].all()


def test_sep_outside_question_is_self_only():
    enc = linearize("select c1", Table(("c1", "c2"), (("1", "2"),)), "T0")
    d = build_mask(enc, "M3").dense
    q_len = enc.question_len
    sep_positions = np.flatnonzero(
        (enc.roles == TokenRole.BOUNDARY) & (np.arange(len(enc)) >= q_len)
    )
    for s in sep_positions:
        row = d[s].copy()
        row[:q_len] = False  # question band is always on
        row[s] = False
        assert not row.any()


def test_same_row_vs_same_column_split():
    t = Table(("c1", "c2"), (("1", "2"), ("3", "4")))
    enc = linearize("select c1", t, "T0")
    content = enc.roles == TokenRole.CELL_CONTENT
    d_row = build_mask(enc, "M3").dense
    d_col = build_mask(enc, "M2").dense
    idx = {
        (int(r), int(c)): i
        for i, (r, c) in enumerate(zip(enc.row_idx, enc.col_idx))
        if content[i]
    }
    # (1,1) and (1,2) share a row; (1,1) and (2,1) share a column
    assert d_row[idx[(1, 1)], idx[(1, 2)]]
    assert not d_row[idx[(1, 1)], idx[(2, 1)]]
    assert d_col[idx[(1, 1)], idx[(2, 1)]]
    assert not d_col[idx[(1, 1)], idx[(1, 2)]]
    # headers are content on row 0, so same-column reaches them
    assert d_col[idx[(0, 1)], idx[(1, 1)]]


def test_m6_relays_only():
    enc = enc_t2(rows=2, cols=2)
    d = build_mask(enc, "M6").dense
    content = enc.roles == TokenRole.CELL_CONTENT
    q = enc.roles == TokenRole.QUESTION
    pair = content[:, None] & content[None, :]
    off_diag = ~np.eye(len(enc), dtype=bool)
    qband = q[:, None] | q[None, :]
    # no direct content-content attention outside the question band
    assert not (d & pair & off_diag & ~qband).any()
    # [TAB] reaches every content token
    tab = int(np.flatnonzero(enc.roles == TokenRole.TABLE_TOK)[0])
    assert d[tab, content].all()


def test_structural_masks_need_t2(rng):
    enc = linearize("select c1", make_table(rng), "T1")
    for scheme in STRUCTURAL:
        with pytest.raises(ValidationError):
            build_mask(enc, scheme)
    with pytest.raises(ValidationError):
        build_mask(enc, "M9")


# ---------------------------------------------------------------------------
# block export
# ---------------------------------------------------------------------------

def test_blocks_tile_exactly(rng):
    for tokens, scheme in legal_pairs():
        t = make_table(rng)
        enc = linearize(random_question(rng, t), t, tokens)
        m = build_mask(enc, scheme)
        blocks = export_blocks(m)
        cover = blocks_cover(blocks, m.length)  # raises on overlap
        assert np.array_equal(cover, m.dense)
        assert block_area(blocks) == int(m.dense.sum())


def test_blocks_cover_detects_overlap():
    with pytest.raises(TabencError):
        blocks_cover([(0, 2, 0, 2), (1, 3, 1, 3)], 4)


def test_blocks_file_round_trip(tmp_path):
    enc = enc_t2(rows=3, cols=2)
    m = build_mask(enc, "M5")
    path = tmp_path / "m.blocks"
    write_blocks_file(path, m)
    meta, blocks = read_blocks_file(path)
    assert meta["L"] == m.length
    assert meta["scheme"] == "M5"
    assert meta["sparsity"] == pytest.approx(sparsity(m), abs=1e-6)
    assert blocks == export_blocks(m)
    first_line = path.read_text().splitlines()[0]
    assert first_line.startswith(f"L={m.length} scheme=M5 sparsity=")


def test_blocks_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.blocks"
    path.write_text("hello world\n")
    with pytest.raises(ValidationError):
        read_blocks_file(path)


# ---------------------------------------------------------------------------
# bias relation map
# ---------------------------------------------------------------------------

def test_bias_class_count():
    assert N_BIAS_CLASSES == 13
    assert len(set(BIAS_CLASSES)) == 13
    assert BIAS_CLASSES[0] == "self"
    assert BIAS_CLASSES[-1] == "other"


def test_bias_map_oracle_small():
    enc = linearize("select c1", Table(("c1",), (("5",),)), "T1")
    # tokens: select c1 SEP c1(hdr) [ROW 1] [CELL] 5
    rel = build_bias_map(enc).rel
    name = lambda i, j: BIAS_CLASSES[rel[i, j]]
    assert name(0, 0) == "self"
    assert name(0, 1) == "question-question"
    assert name(0, 3) == "question-header"
    assert name(3, 0) == "header-question"
    assert name(0, 6) == "question-cell"
    assert name(6, 0) == "cell-question"
    assert name(6, 6) == "self"
    assert name(6, 3) == "cell-to-column-header"
    assert name(3, 6) == "column-header-to-cell"
    assert name(0, 2) == "other"  # question vs SEP
    assert name(4, 5) == "other"  # [ROW 1] vs [CELL]


def test_bias_map_same_cell_beats_same_row():
    enc = linearize("select c1", Table(("c1", "c2"), (("12", "3"),)), "T0")
    rel = build_bias_map(enc).rel
    content = np.flatnonzero(enc.roles == TokenRole.CELL_CONTENT)
    by_coord = {}
    for i in content:
        by_coord.setdefault((int(enc.row_idx[i]), int(enc.col_idx[i])), []).append(int(i))
    a, b = by_coord[(1, 1)]  # the two digits of "12"
    c = by_coord[(1, 2)][0]
    assert BIAS_CLASSES[rel[a, b]] == "same-cell"
    assert BIAS_CLASSES[rel[a, c]] == "same-row"
    hdr1 = by_coord[(0, 1)][0]
    hdr2 = by_coord[(0, 2)][0]
    assert BIAS_CLASSES[rel[hdr1, hdr2]] == "same-row"
    assert BIAS_CLASSES[rel[hdr1, hdr1]] == "self"
    assert BIAS_CLASSES[rel[hdr1, a]] == "column-header-to-cell"
    assert BIAS_CLASSES[rel[a, hdr1]] == "cell-to-column-header"


def test_bias_map_header_same_column():
    # two header tokens in one column happens when a header splits into
    # multiple pieces
    enc = linearize("select c1", Table(("12",), (("5",),)), "T0")
    rel = build_bias_map(enc).rel
    hdr = np.flatnonzero(
        (enc.roles == TokenRole.CELL_CONTENT) & (enc.row_idx == 0)
    )
    assert len(hdr) == 2
    assert BIAS_CLASSES[rel[hdr[0], hdr[1]]] == "header-header-same-column"


def test_bias_map_values_in_range(rng):
    for _ in range(20):
        t = make_table(rng)
        enc = linearize(random_question(rng, t), t, "T2")
        rel = build_bias_map(enc).rel
        assert rel.dtype == np.int8
        assert rel.min() >= 0 and rel.max() < N_BIAS_CLASSES
        assert (rel.diagonal() == 0).all()
