import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picircuits.pic import (InputUnit, IntegralUnit, InvalidRegionGraphError, LatentMismatchError, PicGraph,
                            ProductUnit, SumUnit, assign_groups, merge, rg_to_pic, validate_structure)
from picircuits.region_graph import Partition, RegionGraph, build_quad_rg


def test_quad_graph_cp_census():
    pic = rg_to_pic(build_quad_rg(2, 2, False), "cp")
    assert pic.census() == {"input": 4, "sum": 1, "product": 6, "integral": 12}
    assert validate_structure(pic) == []


def test_quad_tree_tucker_census():
    pic = rg_to_pic(build_quad_rg(2, 1, True), "tucker")
    assert pic.census() == {"input": 2, "sum": 0, "product": 1, "integral": 1}
    root = pic.units[pic.root]
    assert isinstance(root, IntegralUnit) and root.out_lvs == () and len(root.in_lvs) == 2


def test_leaf_root_is_wrapped():
    pic = rg_to_pic(build_quad_rg(1, 1, True), "cp")
    root = pic.units[pic.root]
    assert isinstance(root, IntegralUnit) and root.out_lvs == ()
    assert pic.census()["input"] == 1


def test_root_scopes():
    pic = rg_to_pic(build_quad_rg(3, 2, False), "tucker")
    assert pic.scopes[pic.root] == frozenset(range(6))
    assert pic.latent_scopes[pic.root] == ()


def _two_inputs(lv1, lv2):
    return PicGraph([InputUnit(0, lv1), InputUnit(1, lv2)], 1, num_lvs=max(lv1, lv2) + 1)


def test_cp_merge_shape():
    pic, uid = merge(_two_inputs(0, 0), 0, 1, False, "cp")
    prod = pic.units[uid]
    assert isinstance(prod, ProductUnit)
    a, b = (pic.units[c] for c in prod.children)
    assert isinstance(a, IntegralUnit) and isinstance(b, IntegralUnit)
    assert a.out_lvs == b.out_lvs == (1,)


def test_tucker_root_merge_shape():
    pic, uid = merge(_two_inputs(0, 1), 0, 1, True, "tucker")
    unit = pic.units[uid]
    assert isinstance(unit, IntegralUnit) and unit.out_lvs == () and len(unit.in_lvs) == 2


@pytest.mark.parametrize("mode,lvs", [("cp", (0, 1)), ("tucker", (0, 0))])
def test_merge_lv_preconditions(mode, lvs):
    with pytest.raises(LatentMismatchError):
        merge(_two_inputs(*lvs), 0, 1, False, mode)


def test_merge_rejects_overlapping_scopes():
    pic = PicGraph([InputUnit(0, 0), InputUnit(0, 0)], 1)
    with pytest.raises(ValueError):
        merge(pic, 0, 1, False, "cp")


def test_invalid_rg_names_region():
    rg = RegionGraph([[0, 1], [0], [0, 1]], [Partition(0, (1, 2))], 0)
    with pytest.raises(InvalidRegionGraphError) as exc:
        rg_to_pic(rg, "cp")
    assert exc.value.region is not None


def test_validate_structure_counterexamples():
    bad_sum = PicGraph([InputUnit(0, 0), InputUnit(1, 0), SumUnit((0, 1))], 2)
    assert "smoothness" in {v.code for v in validate_structure(bad_sum)}
    bad_prod = PicGraph([InputUnit(3, 0), InputUnit(3, 1), ProductUnit((0, 1))], 2)
    assert "decomposability" in {v.code for v in validate_structure(bad_prod)}
    bad_int = PicGraph([InputUnit(0, 0), IntegralUnit(0, (), (5,))], 1)
    assert "latent-scope" in {v.code for v in validate_structure(bad_int)}
    loose_root = PicGraph([InputUnit(0, 0)], 0)
    assert "root" in {v.code for v in validate_structure(loose_root)}


def _product_lv_condition(pic, mode):
    for uid, u in enumerate(pic.units):
        if isinstance(u, ProductUnit):
            assert pic.product_is_hadamard(uid) == (mode == "cp")


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.booleans(), st.sampled_from(["cp", "tucker"]))
def test_compiled_pics_are_valid(H, W, tree, mode):
    pic = rg_to_pic(build_quad_rg(H, W, tree), mode)
    assert validate_structure(pic) == []
    assert pic.scopes[pic.root] == frozenset(range(H * W))
    _product_lv_condition(pic, mode)
    for u in pic.units:
        if isinstance(u, IntegralUnit):
            assert 1 <= u.arity <= 3 and len(u.out_lvs) <= 1 and 1 <= len(u.in_lvs) <= 2


def test_compilation_is_deterministic():
    rg = build_quad_rg(4, 3, False)
    assert rg_to_pic(rg, "cp").to_json() == rg_to_pic(rg, "cp").to_json()


def test_groups_quad_graph_cp():
    pic = rg_to_pic(build_quad_rg(2, 2, False), "cp")
    g = assign_groups(pic, "F", "C")
    inputs = [i for i, k in enumerate(g.kinds) if k == "input"]
    assert len(inputs) == 1 and len(g.members[inputs[0]]) == 4 and g.heads[inputs[0]] == 1
    integral = [i for i, k in enumerate(g.kinds) if k == "integral"]
    assert sorted(len(g.members[i]) for i in integral) == [4, 8]
    for i in integral:
        assert len({pic.units[u].arity for u in g.members[i]}) == 1
        assert list(g.members[i]) == sorted(g.members[i])


def test_groups_no_sharing():
    pic = rg_to_pic(build_quad_rg(2, 2, False), "cp")
    g = assign_groups(pic, "N", "N")
    assert len(g) == pic.census()["input"] + pic.census()["integral"]


def test_groups_reject_unknown_policy():
    pic = rg_to_pic(build_quad_rg(2, 1, True), "cp")
    with pytest.raises(ValueError):
        assign_groups(pic, "X", "C")
    with pytest.raises(ValueError):
        assign_groups(pic, "F", "F")


def test_pic_document_has_groups():
    pic = rg_to_pic(build_quad_rg(2, 1, True), "cp")
    doc = pic.with_groups(assign_groups(pic)).to_dict()
    tagged = [u for u in doc["units"] if u["kind"] in ("input", "integral")]
    assert all("group" in u and "head" in u for u in tagged)
