"""Online shape/caption pair generation: part assembly with inter/intra
distance adjustment plus caption templating.

Assembly works in centered frames: every sampled part is first moved so
its centroid sits at the origin. Intra adjustment (XY shrink of a support
toward the origin) runs before inter adjustment (stack/offset translation),
because covering is defined on centered XY projections.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (
    Aabb,
    GeometryError,
    PointCloud,
    aabb,
    axis_gap,
    centroid,
    containment_fraction,
    downsample,
    load_xyz,
    save_xyz,
    scale_xy_about_origin,
    translate,
)
from .library import AssemblySchema, ComponentLibrary, PartRecord, Slot, placed_slots, sample_parts


class AugmentError(ValueError):
    pass


@dataclass
class CaptionTemplate:
    """Pattern with {category} and {part_captions}, plus the joining rule."""

    pattern: str = "a {category} with {part_captions}"
    separator: str = ", "
    conjunction: str = " and "

    def __post_init__(self):
        for ph in ("{category}", "{part_captions}"):
            if self.pattern.count(ph) != 1:
                raise AugmentError(f"template must contain {ph} exactly once")


@dataclass
class GeneratedPair:
    shape: PointCloud  # labeled, N_p points
    caption: str
    provenance: dict = field(default_factory=dict)


def center_parts(parts: list[PointCloud]) -> list[PointCloud]:
    """Translate each part so its centroid is at the origin."""
    return [translate(p, -centroid(p)) for p in parts]


def pairwise_axis_distances(parts: list[PointCloud]) -> np.ndarray:
    """N x N x 3 tensor of signed AABB gaps; diagonal holds -extent."""
    boxes = [aabb(p) for p in parts]
    n = len(parts)
    out = np.empty((n, n, 3))
    for i in range(n):
        for j in range(n):
            for k in range(3):
                out[i, j, k] = axis_gap(boxes[i], boxes[j], k)
    return out


def _shrink_ratio(sup: Aabb, cov: Aabb) -> float:
    """Largest XY scale about the origin putting sup's box inside cov's.

    Evaluated side by side so slightly asymmetric (centered) boxes are
    handled; for symmetric boxes this reduces to the half-extent ratio
    min(cov_half_x / sup_half_x, cov_half_y / sup_half_y).
    """
    s = 1.0
    for k in (0, 1):
        if sup.max[k] > cov.max[k] and sup.max[k] > 0:
            s = min(s, cov.max[k] / sup.max[k])
        if sup.min[k] < cov.min[k] and sup.min[k] < 0:
            s = min(s, cov.min[k] / sup.min[k])
    # one-ulp headroom so boundary points stay inside the closed box
    return s * (1.0 - 1e-12)


def adjust_intra(
    parts: list[PointCloud],
    schema: AssemblySchema,
    theta: float = 0.95,
    slot_names: Optional[list[str]] = None,
) -> list[PointCloud]:
    """Shrink each support part on XY until its cover part covers it.

    Expects centered parts. A support left uncovered by less than theta of
    its points is scaled uniformly about the origin; afterwards the
    containment fraction is at least theta (1.0 for box-like parts).
    """
    names = slot_names or [s.name for s in schema.slots]
    out = list(parts)
    for sup_name, cov_name in schema.cover_pairs:
        if sup_name not in names or cov_name not in names:
            continue  # optional slot not placed this draw
        i, j = names.index(sup_name), names.index(cov_name)
        cov_box = aabb(out[j])
        if cov_box.extent[0] <= 0 or cov_box.extent[1] <= 0:
            raise AugmentError(f"cover part {cov_name!r} has zero XY extent")
        if containment_fraction(out[i], cov_box) >= theta:
            continue
        out[i] = scale_xy_about_origin(out[i], _shrink_ratio(aabb(out[i]), cov_box))
    return out


def adjust_inter(
    parts: list[PointCloud],
    schema: AssemblySchema,
    slot_names: Optional[list[str]] = None,
) -> list[PointCloud]:
    """Translate parts into their schema relations; the root stays put.

    below/above set the Z face gap to the slot margin exactly. beside_*
    set the X face gap to the margin and, when align is given, put the
    part's Z center at that fraction of the anchor's Z extent. For
    above/below, align (when given) places the part's Y center at that
    fraction of the anchor's Y extent.
    """
    names = slot_names or [s.name for s in schema.slots]
    placed: dict[str, PointCloud] = {}
    out: list[PointCloud] = []
    for name, part in zip(names, parts):
        slot = schema.slot(name)
        if slot.relation == "root":
            placed[name] = part
            out.append(part)
            continue
        if slot.anchor not in placed:
            raise AugmentError(f"slot {name!r}: anchor {slot.anchor!r} not placed")
        abox = aabb(placed[slot.anchor])
        pbox = aabb(part)
        t = np.zeros(3)
        if slot.relation == "below":
            t[2] = abox.min[2] - slot.margin - pbox.max[2]
            if slot.align is not None:
                t[1] = abox.min[1] + slot.align * abox.extent[1] - pbox.center[1]
        elif slot.relation == "above":
            t[2] = abox.max[2] + slot.margin - pbox.min[2]
            if slot.align is not None:
                t[1] = abox.min[1] + slot.align * abox.extent[1] - pbox.center[1]
        elif slot.relation == "beside_pos_x":
            t[0] = abox.max[0] + slot.margin - pbox.min[0]
            if slot.align is not None:
                t[2] = abox.min[2] + slot.align * abox.extent[2] - pbox.center[2]
        elif slot.relation == "beside_neg_x":
            t[0] = abox.min[0] - slot.margin - pbox.max[0]
            if slot.align is not None:
                t[2] = abox.min[2] + slot.align * abox.extent[2] - pbox.center[2]
        else:
            raise AugmentError(f"slot {name!r}: unknown relation {slot.relation!r}")
        moved = translate(part, t)
        placed[name] = moved
        out.append(moved)
    return out


def fill_template(tmpl: CaptionTemplate, category: str, captions: list[str]) -> str:
    """Substitute the placeholders, joining captions in slot order."""
    if not captions:
        raise AugmentError("fill_template: no captions")
    if len(captions) == 1:
        joined = captions[0]
    else:
        joined = tmpl.separator.join(captions[:-1]) + tmpl.conjunction + captions[-1]
    return tmpl.pattern.replace("{category}", category).replace("{part_captions}", joined)


def merge_parts(parts: list[PointCloud]) -> PointCloud:
    """Concatenate parts; per-point labels are placed-slot indices."""
    pts = np.vstack([p.points for p in parts])
    labels = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(parts)])
    return PointCloud(pts, labels)


@dataclass
class AssemblyResult:
    """generate_pair plus the pre-downsample placed parts (for audits)."""

    pair: GeneratedPair
    placed_parts: list[PointCloud]
    slot_names: list[str]


def generate_pair_detailed(
    lib: ComponentLibrary,
    schema: AssemblySchema,
    tmpl: CaptionTemplate,
    n_points: int,
    theta: float,
    seed: int,
    inter: bool = True,
    intra: bool = True,
) -> AssemblyResult:
    rng = np.random.default_rng(seed)
    mask = placed_slots(schema, rng)
    records = sample_parts(lib, schema, rng, include_optional=mask)
    slot_names = [s.name for s, m in zip(schema.slots, mask) if m]
    parts = center_parts([r.cloud for r in records])
    if intra:
        parts = adjust_intra(parts, schema, theta, slot_names)
    if inter:
        parts = adjust_inter(parts, schema, slot_names)
    merged = merge_parts(parts)
    shape = downsample(merged, n_points, rng)
    caption = fill_template(tmpl, schema.category, [r.caption for r in records])
    pair = GeneratedPair(
        shape=shape,
        caption=caption,
        provenance={
            "category": schema.category,
            "part_ids": [r.part_id for r in records],
            "slots": slot_names,
            "seed": int(seed),
        },
    )
    return AssemblyResult(pair, parts, slot_names)


def generate_pair(
    lib: ComponentLibrary,
    schema: AssemblySchema,
    tmpl: CaptionTemplate,
    n_points: int,
    theta: float,
    seed: int,
    inter: bool = True,
    intra: bool = True,
) -> GeneratedPair:
    """Run the full generation chain for one seeded draw."""
    return generate_pair_detailed(lib, schema, tmpl, n_points, theta, seed, inter, intra).pair


def derive_seed(base_seed: int, k: int) -> int:
    """Per-item seed for streams: base_seed XOR k (order-independent)."""
    return int(base_seed) ^ int(k)


def generate_stream(
    lib: ComponentLibrary,
    schema: AssemblySchema,
    tmpl: CaptionTemplate,
    count: int,
    base_seed: int,
    n_points: int = 256,
    theta: float = 0.95,
    inter: bool = True,
    intra: bool = True,
):
    """Yield count pairs; pair k is reproducible from derive_seed(base, k)."""
    if count < 1:
        raise AugmentError("generate_stream: count must be >= 1")
    for k in range(count):
        yield generate_pair(
            lib, schema, tmpl, n_points, theta, derive_seed(base_seed, k), inter, intra
        )


def write_dataset(pairs: list[GeneratedPair], out_dir) -> None:
    """pair_<k>.xyz (labeled points) plus pairs.jsonl with captions/provenance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, pair in enumerate(pairs):
        fname = f"pair_{k}.xyz"
        save_xyz(pair.shape, out / fname)
        rows.append(
            json.dumps(
                {"index": k, "file": fname, "caption": pair.caption,
                 "provenance": pair.provenance},
                sort_keys=True,
            )
        )
    (out / "pairs.jsonl").write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_dataset(in_dir) -> list[GeneratedPair]:
    src = Path(in_dir)
    pairs = []
    for line in (src / "pairs.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        cloud = load_xyz(src / row["file"])
        pairs.append(GeneratedPair(cloud, row["caption"], row.get("provenance", {})))
    return pairs
