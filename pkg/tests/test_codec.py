import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_schema
from f2p.codec import (
    CodecError,
    ContinuousParam,
    DiscreteSlot,
    LayoutError,
    ParameterSchema,
    ParseError,
    Recipe,
    RecipeValidationError,
    UnknownAssetError,
    UnknownRegionError,
    UnsupportedOperationError,
    combinatorial_complexity,
    decode,
    default_recipe,
    encode,
    group_slices,
    normalize_scale,
    parse_mhm,
    serialize_mhm,
)
from f2p.synthfaces import random_recipe

LASHES = "04a0718e-aaa4-4480-a013-ad51703bef6b"

SNIPPET = """version v1.1.1
tags t1
camera 0.0 0.0 0.0 0.0 0.0 1.0
modifier head/head-oval 0.255893
modifier head/head-round -0.100000
eyelashes eyelashes02 04a0718e-aaa4-4480-a013-ad51703bef6b
skinMaterial skins/default.mhmat
"""


@pytest.fixture
def mh_schema():
    return ParameterSchema(
        ["head", "eyes"],
        [ContinuousParam("head", "head-oval"), ContinuousParam("head", "head-round"), ContinuousParam("eyes", "size", 0, 2, 1)],
        [DiscreteSlot("eyes", "eyelashes", (("eyelashes01", "9c81fc4e-0000-0000-0000-000000000001"), ("eyelashes02", LASHES)))],
    )


def test_parse_modifier_and_slot(mh_schema):
    r = parse_mhm(SNIPPET, mh_schema)
    assert r.continuous["head/head-oval"] == 0.255893
    assert r.discrete["eyelashes"] == LASHES
    assert r.continuous["eyes/size"] == 1.0  # default fills omissions


def test_unrecognized_lines_kept_in_order(mh_schema):
    r = parse_mhm(SNIPPET, mh_schema)
    assert r.extras == (
        "version v1.1.1",
        "tags t1",
        "camera 0.0 0.0 0.0 0.0 0.0 1.0",
        "skinMaterial skins/default.mhmat",
    )


def test_empty_text_gives_defaults(mh_schema):
    r = parse_mhm("", mh_schema)
    assert r == default_recipe(mh_schema)
    assert r.extras == ()


def test_parse_errors(mh_schema):
    with pytest.raises(ParseError) as e:
        parse_mhm("tags x\nmodifier head/head-oval abc\n", mh_schema)
    assert e.value.lineno == 2
    with pytest.raises(UnknownAssetError):
        parse_mhm("eyelashes eyelashes09 not-a-guid\n", mh_schema)


def test_serialize_default_is_all_zero(schema):
    text = serialize_mhm(default_recipe(schema), schema)
    mods = [l for l in text.splitlines() if l.startswith("modifier")]
    assert len(mods) == len(schema.params)
    scale = schema.scale_param_name
    for line in mods:
        name, value = line.split()[1:]
        if name != scale:
            assert value == "0.000000"


def test_serialize_snippet_round_trip(mh_schema):
    r = parse_mhm(SNIPPET, mh_schema)
    text = serialize_mhm(r, mh_schema)
    assert "modifier head/head-oval 0.255893\n" in text
    assert text.endswith("skinMaterial skins/default.mhmat\n")
    assert parse_mhm(text, mh_schema) == r
    assert serialize_mhm(parse_mhm(text, mh_schema), mh_schema) == text


def test_serialize_rejects_invalid(mh_schema):
    bad = default_recipe(mh_schema).replace(**{"eyes/size": 3.0})
    with pytest.raises(RecipeValidationError) as e:
        serialize_mhm(bad, mh_schema)
    assert e.value.keys == ["eyes/size"]


def test_canonical_fixpoint_random(schema, rng):
    for _ in range(200):
        r = random_recipe(schema, rng)
        text = serialize_mhm(r, schema)
        back = parse_mhm(text, schema)
        assert back.discrete == r.discrete
        for k, v in r.continuous.items():
            assert abs(back.continuous[k] - v) <= 5e-7
        assert serialize_mhm(back, schema) == text


def test_encode_examples():
    s = ParameterSchema(
        ["r"],
        [ContinuousParam("r", "a"), ContinuousParam("r", "b", 0.0, 2.0, 0.0)],
        [DiscreteSlot("r", "k", (("x", "1"), ("y", "2"), ("z", "3")))],
    )
    v = encode(default_recipe(s), s).values
    assert v.tolist() == [0.0, -1.0, 1.0, 0.0, 0.0]
    r = default_recipe(s).replace(**{"r/a": 0.255893, "r/b": 1.5})
    v = encode(r, s).values
    assert v[0] == 0.255893
    assert v[1] == pytest.approx(0.5, abs=1e-15)


def _argmax_lowest(xs):
    best = 0
    for i, x in enumerate(xs):
        if x > xs[best]:
            best = i
    return best


def test_decode_argmax_and_ties():
    s = make_schema([3], params_per_region=0, regions=("a",))
    assert s.slot("slot0").index_of(decode(np.array([0.2, 0.5, 0.3]), s).discrete["slot0"]) == 1
    s2 = make_schema([2], params_per_region=0, regions=("a",))
    assert s2.slot("slot0").index_of(decode(np.array([0.5, 0.5]), s2).discrete["slot0"]) == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0, -1.0]), min_size=1, max_size=6))
def test_decode_tie_rule_matches_bruteforce(values):
    s = make_schema([len(values)], params_per_region=0, regions=("a",))
    got = s.slot("slot0").index_of(decode(np.array(values), s).discrete["slot0"])
    assert got == _argmax_lowest(values)


def test_decode_clamps_and_checks_length(schema):
    v = encode(default_recipe(schema), schema).values.copy()
    v[schema.continuous_indices()] = 5.0
    r = decode(v, schema)
    for p in schema.params:
        assert r.continuous[p.full_name] == p.max
    with pytest.raises(LayoutError):
        decode(v[:-1], schema)


def test_round_trip_1000(schema, rng):
    for _ in range(1000):
        r = random_recipe(schema, rng)
        back = decode(encode(r, schema), schema)
        assert back.discrete == r.discrete
        for k, v in r.continuous.items():
            assert abs(back.continuous[k] - v) <= 1e-9


def test_one_hot_slices(schema, rng):
    r = random_recipe(schema, rng)
    v = encode(r, schema).values
    for lay in schema.layout:
        for _, a, b in lay.slots:
            assert sorted(v[a:b].tolist()) == [0.0] * (b - a - 1) + [1.0]
    assert np.all(np.abs(v[schema.continuous_indices()]) <= 1.0)


def test_normalize_scale(schema, rng):
    name = schema.scale_param_name
    r = random_recipe(schema, rng)
    n = normalize_scale(r, schema)
    assert n.continuous[name] == schema.scale_reference
    assert normalize_scale(n, schema) == n
    at_ref = r.replace(**{name: schema.scale_reference})
    assert normalize_scale(at_ref, schema) is at_ref
    for c in schema.scale_coupled:
        assert n.continuous[c] == schema.effective_value(r, c)


def test_normalize_needs_scale_param():
    s = make_schema([2])
    with pytest.raises(UnsupportedOperationError):
        normalize_scale(default_recipe(s), s)


def test_complexity_examples():
    assert combinatorial_complexity(make_schema([])) == 1
    assert combinatorial_complexity(make_schema([3, 4, 5])) == 60


def _brute_force(schema):
    return sum(1 for _ in itertools.product(*(s.guids for s in schema.slots)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 9), max_size=6))
def test_complexity_matches_enumeration(counts):
    s = make_schema(counts)
    if math.prod(counts) <= 10**6:
        assert combinatorial_complexity(s) == _brute_force(s)


def test_complexity_order_of_magnitude():
    # 11 regions with 10 mutually exclusive sculpts each, plus a few smaller slots
    s = make_schema([10] * 10 + [3], params_per_region=0, regions=tuple(f"r{i}" for i in range(11)))
    c = combinatorial_complexity(s)
    assert 10**10 <= c <= 10**12


def test_group_slices_partition(schema):
    covered = []
    for r in schema.regions:
        cont, disc = group_slices(schema, r)
        for a, b in cont + disc:
            covered.extend(range(a, b))
    assert sorted(covered) == list(range(schema.size))
    assert len(covered) == len(set(covered))


def test_group_slices_cases(schema):
    single = make_schema([2, 3], regions=("only",))
    cont, disc = group_slices(single, "only")
    assert sorted(i for a, b in cont + disc for i in range(a, b)) == list(range(single.size))
    assert group_slices(schema, "head")[1] == []
    with pytest.raises(UnknownRegionError):
        group_slices(schema, "ears")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), max_size=5), st.integers(0, 3))
def test_layout_partition_property(counts, per_region):
    s = make_schema(counts, params_per_region=per_region)
    idx = []
    for r in s.regions:
        cont, disc = group_slices(s, r)
        idx.extend(i for a, b in cont + disc for i in range(a, b))
    assert sorted(idx) == list(range(s.size))


def test_schema_invariants():
    with pytest.raises(CodecError):
        ParameterSchema(["a", "a"])
    with pytest.raises(CodecError):
        ParameterSchema(["a"], [ContinuousParam("a", "x", 1.0, 1.0, 1.0)])
    with pytest.raises(CodecError):
        ParameterSchema(["a"], slots=[DiscreteSlot("a", "k", ())])
    with pytest.raises(CodecError):
        ParameterSchema(["a"], slots=[DiscreteSlot("a", "k", (("x", "g"), ("y", "g")))])


def test_schema_json_round_trip(schema, tmp_path):
    schema.dump(tmp_path / "s.json")
    assert ParameterSchema.load(tmp_path / "s.json") == schema


def test_recipe_validation_lists_keys(schema):
    r = Recipe({"eyes/nope": 0.0}, {})
    with pytest.raises(RecipeValidationError) as e:
        encode(r, schema)
    assert "eyes/nope" in e.value.keys
