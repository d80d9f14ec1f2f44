import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layoutattn.errors import ConfigError, ContradictionError, ParseError
from layoutattn.scene_dsl import (
    COLORS,
    NOUNS,
    DEFAULT_CELL_COUNTS,
    SUPER_CATEGORIES,
    ObjectSpec,
    RelationKind,
    RelationSpec,
    check_contradictions,
    generate_dataset,
    generate_item,
    item_from_json,
    item_to_json,
    paraphrase,
    parse_counts,
    parse_description,
    read_jsonl,
    render_description,
    render_local_description,
    write_jsonl,
)

L, R, A, B = RelationKind.LEFT_OF, RelationKind.RIGHT_OF, RelationKind.ABOVE, RelationKind.BELOW


def test_vocabulary_sizes():
    assert len(NOUNS) >= 20 and len(set(NOUNS)) == len(NOUNS)
    assert len(COLORS) >= 8
    assert len(SUPER_CATEGORIES) >= 2


def test_parse_red_car_left_of_black_mailbox():
    d = parse_description("a red car is to the left of a black mailbox")
    assert [(o.noun, o.color) for o in d.objects] == [("car", "red"), ("mailbox", "black")]
    assert d.relations == (RelationSpec(1, 2, L),)
    assert d.local_texts == ("A photo of a red car", "A photo of a black mailbox")


def test_parse_single_object():
    d = parse_description("a dog")
    assert d.objects == (ObjectSpec(1, "dog", None),)
    assert d.relations == ()


def test_two_cycle_is_a_contradiction():
    with pytest.raises(ContradictionError):
        parse_description("a cat is above a bed and the bed is above the cat")


@pytest.mark.parametrize("text", ["a flurble", "a red", "a car is left of", "car car", "a car is left of a car"])
def test_malformed_input_reports_offset(text):
    with pytest.raises(ParseError) as info:
        parse_description(text)
    assert 0 <= info.value.offset <= len(text.encode())


def test_unknown_token_offset_points_at_token():
    with pytest.raises(ParseError) as info:
        parse_description("a red car is left of a zebra")
    assert info.value.offset == len("a red car is left of a ")


def test_right_of_keeps_subject_order():
    d = parse_description("a blue bus is right of a car")
    assert d.relations == (RelationSpec(1, 2, R),)


@pytest.mark.parametrize(
    "obj,text",
    [
        (ObjectSpec(1, "car", "red"), "A photo of a red car"),
        (ObjectSpec(1, "mailbox", "black"), "A photo of a black mailbox"),
        (ObjectSpec(1, "dog"), "A photo of a dog"),
    ],
)
def test_local_descriptions(obj, text):
    assert render_local_description(obj) == text


def test_check_contradictions_examples():
    assert check_contradictions([RelationSpec(1, 2, L), RelationSpec(2, 3, L)])
    assert not check_contradictions([RelationSpec(1, 2, A), RelationSpec(2, 3, A), RelationSpec(3, 1, A)])
    assert check_contradictions([])
    # left-of and right-of normalise onto one axis
    assert not check_contradictions([RelationSpec(1, 2, L), RelationSpec(1, 2, R)])
    # the two axes are independent
    assert check_contradictions([RelationSpec(1, 2, L), RelationSpec(2, 1, A)])


def test_default_cell_counts():
    data = generate_dataset(seed=3)
    assert len(data) == 500
    cells = {}
    for item in data:
        cells[item.description.cell] = cells.get(item.description.cell, 0) + 1
    assert cells == DEFAULT_CELL_COUNTS


def test_generation_is_deterministic():
    a = generate_dataset({(2, 1): 1}, seed=11)
    b = generate_dataset({(2, 1): 1}, seed=11)
    assert a == b


@pytest.mark.parametrize("cell", [(1, 0), (2, 2), (6, 1), (3, 0)])
def test_infeasible_cells_are_rejected(cell):
    with pytest.raises(ConfigError):
        generate_dataset({cell: 3})


def test_parse_counts():
    assert parse_counts("2:1=10, 3:2=5") == {(2, 1): 10, (3, 2): 5}
    with pytest.raises(ConfigError):
        parse_counts("2-1=3")


def test_dataset_properties():
    data = generate_dataset({(n, m): 40 for n in range(2, 6) for m in range(1, n)}, seed=5)
    for item in data:
        d = item.description
        assert check_contradictions(d.relations)
        groups = {next(g for g, ns in SUPER_CATEGORIES.items() if o.noun in ns) for o in d.objects}
        assert len(groups) == 1
        assert len({o.noun for o in d.objects}) == d.n_objects
        for r in d.relations:
            assert r.kind.holds(item.layout[r.subject_id - 1], item.layout[r.object_id - 1])
        assert all(0.1 <= c <= 0.9 for xy in item.layout for c in xy)
        assert parse_description(d.global_text) == d


def test_colour_frequency_is_one_half():
    data = generate_dataset({(5, 4): 2000}, seed=9)
    objs = [o for it in data for o in it.description.objects]
    assert len(objs) >= 10_000
    assert abs(np.mean([o.color is not None for o in objs]) - 0.5) < 0.02


def test_jsonl_round_trip(tmp_path):
    data = generate_dataset({(3, 2): 5, (2, 1): 5}, seed=2)
    path = tmp_path / "d.jsonl"
    write_jsonl(data, path)
    assert read_jsonl(path) == data
    first = path.read_text().splitlines()[0]
    assert set(item_to_json(data[0])) == {"text", "objects", "relations", "layout"}
    assert item_from_json(__import__("json").loads(first)) == data[0]


def test_paraphrase_preserves_structure(rng):
    item = generate_item(rng, 4, 3, True)
    alt = paraphrase(rng, item)
    assert alt.description.cell == item.description.cell
    assert check_contradictions(alt.description.relations)
    for r in alt.description.relations:
        assert r.kind.holds(alt.layout[r.subject_id - 1], alt.layout[r.object_id - 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.data())
def test_render_parse_round_trip(seed, n, data):
    m = data.draw(st.integers(1, n - 1))
    item = generate_item(np.random.default_rng(seed), n, m, False)
    d = item.description
    assert parse_description(render_description(d)).relations == d.relations
    assert parse_description(d.global_text) == d
