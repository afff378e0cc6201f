import numpy as np
import pytest

from partforge.augment import (
    AugmentError,
    CaptionTemplate,
    adjust_inter,
    adjust_intra,
    center_parts,
    derive_seed,
    fill_template,
    generate_pair,
    generate_pair_detailed,
    generate_stream,
    load_dataset,
    merge_parts,
    pairwise_axis_distances,
    write_dataset,
)
from partforge.geometry import (
    PointCloud,
    aabb,
    axis_gap,
    centroid,
    containment_fraction,
)
from partforge.library import AssemblySchema, Slot, default_table_schema


def _box(extents, center=(0, 0, 0)):
    ex = np.asarray(extents, dtype=float) / 2
    pts = np.array([[sx * ex[0], sy * ex[1], sz * ex[2]]
                    for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return PointCloud(pts + np.asarray(center, dtype=float))


def _stack_schema(margin=0.0):
    return AssemblySchema("table", [
        Slot("top", "tabletop", "root"),
        Slot("base", "base", "below", anchor="top", margin=margin),
    ], cover_pairs=[("base", "top")])


def test_center_parts_moves_centroids_to_origin(rng):
    parts = [PointCloud(rng.normal(loc=3.0, size=(12, 3))) for _ in range(3)]
    centered = center_parts(parts)
    for p in centered:
        assert np.all(np.abs(centroid(p)) < 1e-9)


def test_center_parts_idempotent(rng):
    parts = [PointCloud(rng.normal(size=(12, 3)))]
    once = center_parts(parts)
    twice = center_parts(once)
    assert np.allclose(once[0].points, twice[0].points, atol=1e-12)


def test_pairwise_axis_distances_symmetric_with_extent_diagonal():
    parts = [_box((1, 1, 1)), _box((1, 1, 1), center=(3, 0, 0))]
    d = pairwise_axis_distances(parts)
    assert d.shape == (2, 2, 3)
    assert np.allclose(d, d.transpose(1, 0, 2))
    assert np.allclose(d[0, 0], (-1, -1, -1))
    assert d[0, 1, 0] == pytest.approx(2.0)


def test_adjust_inter_stacks_below_exactly():
    parts = [_box((1, 1, 1)), _box((1, 1, 1))]
    out = adjust_inter(parts, _stack_schema(margin=0.0))
    assert np.allclose(out[0].points, parts[0].points)  # root untouched
    assert np.allclose(aabb(out[1]).center, (0, 0, -1.0))
    out = adjust_inter(parts, _stack_schema(margin=0.1))
    assert np.allclose(aabb(out[1]).center, (0, 0, -1.1))


def test_adjust_inter_beside_with_align():
    schema = AssemblySchema("chair", [
        Slot("seat", "seat", "root"),
        Slot("arm", "arm", "beside_pos_x", anchor="seat", margin=0.02, align=0.5),
    ])
    seat = _box((0.5, 0.5, 0.1))
    arm = _box((0.08, 0.4, 0.1), center=(5, 5, 5))
    out = adjust_inter([seat, arm], schema)
    gap = axis_gap(aabb(out[0]), aabb(out[1]), 0)
    assert gap == pytest.approx(0.02, abs=1e-9)
    # align 0.5 puts the arm's z center at the seat's z center
    assert aabb(out[1]).center[2] == pytest.approx(aabb(out[0]).center[2], abs=1e-9)


def test_adjust_inter_single_root_identity():
    part = _box((1, 2, 3))
    schema = AssemblySchema("t", [Slot("top", "tabletop", "root")])
    out = adjust_inter([part], schema)
    assert np.array_equal(out[0].points, part.points)


def test_adjust_inter_chains_through_adjusted_anchor():
    schema = AssemblySchema("t", [
        Slot("a", "x", "root"),
        Slot("b", "y", "below", anchor="a", margin=0.0),
        Slot("c", "z", "below", anchor="b", margin=0.0),
    ])
    parts = [_box((1, 1, 1)), _box((1, 1, 1)), _box((1, 1, 1))]
    out = adjust_inter(parts, schema)
    assert aabb(out[2]).center[2] == pytest.approx(-2.0)


def test_adjust_intra_shrinks_to_cover():
    top = _box((1, 1, 0.1))
    base = _box((2, 2, 0.2))
    out = adjust_intra([top, base], _stack_schema(), theta=0.95)
    box = aabb(out[1])
    assert box.max[0] == pytest.approx(0.5, abs=1e-6)
    assert box.max[1] == pytest.approx(0.5, abs=1e-6)
    assert box.extent[2] == pytest.approx(0.2)  # z untouched
    assert containment_fraction(out[1], aabb(out[0])) >= 0.95


def test_adjust_intra_noop_when_covered():
    top = _box((2, 2, 0.1))
    base = _box((1, 1, 0.2))
    out = adjust_intra([top, base], _stack_schema(), theta=0.95)
    assert np.array_equal(out[1].points, base.points)


def test_adjust_intra_skips_unplaced_cover_pair():
    schema = _stack_schema()
    top = _box((1, 1, 0.1))
    out = adjust_intra([top], schema, theta=0.95, slot_names=["top"])
    assert np.array_equal(out[0].points, top.points)


def test_fill_template_joining(template):
    assert fill_template(template, "table", ["a top"]) == "a table with a top"
    assert (fill_template(template, "chair", ["a seat", "legs", "a back"])
            == "a chair with a seat, legs and a back")
    with pytest.raises(AugmentError):
        fill_template(template, "table", [])


def test_template_placeholder_validation():
    with pytest.raises(AugmentError):
        CaptionTemplate(pattern="no placeholders here")
    with pytest.raises(AugmentError):
        CaptionTemplate(pattern="{category} {category} {part_captions}")


def test_merge_parts_labels_are_placed_indices():
    merged = merge_parts([_box((1, 1, 1)), _box((2, 2, 2))])
    assert len(merged) == 16
    assert np.array_equal(np.unique(merged.labels), [0, 1])
    assert np.all(merged.labels[:8] == 0) and np.all(merged.labels[8:] == 1)


def test_generate_pair_deterministic(synth_library, schemas, template):
    a = generate_pair(synth_library, schemas[0], template, 128, 0.95, seed=123)
    b = generate_pair(synth_library, schemas[0], template, 128, 0.95, seed=123)
    assert np.array_equal(a.shape.points, b.shape.points)
    assert np.array_equal(a.shape.labels, b.shape.labels)
    assert a.caption == b.caption
    assert a.provenance == b.provenance


def test_generate_pair_contract(synth_library, schemas, template):
    for schema in schemas:
        res = generate_pair_detailed(synth_library, schema, template,
                                     n_points=128, theta=0.95, seed=7)
        pair = res.pair
        assert len(pair.shape) == 128
        assert pair.shape.labels.min() >= 0
        assert pair.shape.labels.max() < len(res.placed_parts)
        assert schema.category in pair.caption
        # placed parts satisfy the schema gaps exactly (pre-downsample)
        boxes = {n: aabb(p) for n, p in zip(res.slot_names, res.placed_parts)}
        for name in res.slot_names:
            slot = schema.slot(name)
            if slot.relation in ("below", "above"):
                assert axis_gap(boxes[name], boxes[slot.anchor], 2) == pytest.approx(
                    slot.margin, abs=1e-6)
            elif slot.relation.startswith("beside"):
                assert axis_gap(boxes[name], boxes[slot.anchor], 0) == pytest.approx(
                    slot.margin, abs=1e-6)


def test_generate_pair_disable_flags(synth_library, template):
    schema = default_table_schema()
    adj = generate_pair(synth_library, schema, template, 64, 0.95, 5)
    raw = generate_pair(synth_library, schema, template, 64, 0.95, 5,
                        inter=False, intra=False)
    assert adj.caption == raw.caption  # same sampled parts
    assert not np.array_equal(adj.shape.points, raw.shape.points)


def test_derive_seed_xor():
    assert derive_seed(12, 0) == 12
    assert derive_seed(12, 5) == 12 ^ 5
    seeds = {derive_seed(100, k) for k in range(64)}
    assert len(seeds) == 64


def test_generate_stream_matches_itemwise_seeds(synth_library, schemas, template):
    stream = list(generate_stream(synth_library, schemas[0], template, 5, 42,
                                  n_points=64))
    for k, pair in enumerate(stream):
        solo = generate_pair(synth_library, schemas[0], template, 64, 0.95,
                             derive_seed(42, k))
        assert np.array_equal(pair.shape.points, solo.shape.points)
        assert pair.caption == solo.caption
    with pytest.raises(AugmentError):
        list(generate_stream(synth_library, schemas[0], template, 0, 1))


def test_dataset_roundtrip(tmp_path, synth_library, schemas, template):
    pairs = list(generate_stream(synth_library, schemas[1], template, 4, 3,
                                 n_points=64))
    write_dataset(pairs, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert len(back) == 4
    for a, b in zip(pairs, back):
        assert a.caption == b.caption
        assert a.provenance == b.provenance
        assert np.allclose(a.shape.points, b.shape.points, atol=1e-6)
        assert np.array_equal(a.shape.labels, b.shape.labels)
