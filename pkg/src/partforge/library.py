"""Component library: part records, assembly schemas, ingest and sampling.

On-disk layout::

    library/<category>/<part_type>/<part_id>.xyz
    library/manifest.jsonl          # one JSON record per part
    schemas/<category>.json         # slot/relation/margin rules
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import PointCloud, aabb, load_xyz, save_xyz

MANIFEST_VERSION = "1"

RELATIONS = ("root", "below", "above", "beside_pos_x", "beside_neg_x")


class LibraryError(ValueError):
    pass


@dataclass
class PartRecord:
    part_id: str
    category: str
    part_type: str
    cloud: PointCloud
    caption: str
    source: str = "human"  # "human" | "mllm" | "synthetic"
    seed: Optional[int] = None

    def validate(self) -> None:
        if len(self.cloud) == 0:
            raise LibraryError(f"{self.part_id}: empty cloud")
        if not self.caption.strip():
            raise LibraryError(f"{self.part_id}: empty caption")


@dataclass
class Slot:
    """One placement rule inside an assembly schema."""

    name: str
    part_type: str
    relation: str = "root"
    anchor: Optional[str] = None  # name of an earlier slot
    margin: float = 0.0
    align: Optional[float] = None  # fraction of the anchor's extent
    probability: float = 1.0  # inclusion probability for optional slots


@dataclass
class AssemblySchema:
    category: str
    slots: list[Slot]
    cover_pairs: list[tuple[str, str]] = field(default_factory=list)

    def validate(self) -> None:
        names = [s.name for s in self.slots]
        if len(set(names)) != len(names):
            raise LibraryError(f"{self.category}: duplicate slot names")
        roots = [s for s in self.slots if s.relation == "root"]
        if len(roots) != 1:
            raise LibraryError(f"{self.category}: exactly one root slot required")
        seen: set[str] = set()
        for s in self.slots:
            if s.relation not in RELATIONS:
                raise LibraryError(f"{self.category}/{s.name}: unknown relation {s.relation}")
            if s.relation == "root":
                if s.anchor is not None:
                    raise LibraryError(f"{self.category}/{s.name}: root slot has an anchor")
            elif s.anchor not in seen:
                raise LibraryError(
                    f"{self.category}/{s.name}: anchor {s.anchor!r} must be an earlier slot"
                )
            seen.add(s.name)
        for sup, cov in self.cover_pairs:
            if sup not in names or cov not in names:
                raise LibraryError(f"{self.category}: cover pair ({sup}, {cov}) names unknown slots")

    def slot(self, name: str) -> Slot:
        for s in self.slots:
            if s.name == name:
                return s
        raise LibraryError(f"{self.category}: no slot named {name!r}")


@dataclass
class ComponentLibrary:
    """Part records indexed by (category, part_type); immutable after ingest."""

    records: dict[tuple[str, str], list[PartRecord]] = field(default_factory=dict)

    def add(self, rec: PartRecord) -> None:
        rec.validate()
        self.records.setdefault((rec.category, rec.part_type), []).append(rec)

    def bucket(self, category: str, part_type: str) -> list[PartRecord]:
        key = (category, part_type)
        if key not in self.records:
            raise LibraryError(f"empty bucket ({category}, {part_type})")
        return self.records[key]

    def all_records(self) -> list[PartRecord]:
        out: list[PartRecord] = []
        for key in sorted(self.records):
            out.extend(self.records[key])
        return out

    def taxonomy(self) -> dict[str, list[str]]:
        tax: dict[str, list[str]] = {}
        for cat, pt in sorted(self.records):
            tax.setdefault(cat, []).append(pt)
        return tax

    def __len__(self) -> int:
        return sum(len(v) for v in self.records.values())


def manifest_rows(lib: ComponentLibrary) -> list[dict]:
    rows = []
    for rec in lib.all_records():
        rows.append(
            {
                "part_id": rec.part_id,
                "category": rec.category,
                "part_type": rec.part_type,
                "caption": rec.caption,
                "path": f"{rec.category}/{rec.part_type}/{rec.part_id}.xyz",
                "source": rec.source,
                "seed": rec.seed,
            }
        )
    return rows


def save_library(lib: ComponentLibrary, root_dir) -> None:
    """Write the on-disk layout (clouds as .xyz, manifest.jsonl)."""
    root = Path(root_dir)
    root.mkdir(parents=True, exist_ok=True)
    for rec in lib.all_records():
        d = root / rec.category / rec.part_type
        d.mkdir(parents=True, exist_ok=True)
        save_xyz(rec.cloud, d / f"{rec.part_id}.xyz")
    lines = [json.dumps({"version": MANIFEST_VERSION})]
    lines += [json.dumps(r, sort_keys=True) for r in manifest_rows(lib)]
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def ingest(root_dir, taxonomy: Optional[dict[str, list[str]]] = None):
    """Load and validate a library directory.

    Returns (library, errors) where errors is a list of per-record messages.
    Raises LibraryError only if zero valid records are found.
    """
    root = Path(root_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise LibraryError(f"{root}: missing manifest.jsonl")
    lib = ComponentLibrary()
    errors: list[str] = []
    seen_ids: set[str] = set()
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        row = json.loads(line)
        if "version" in row and "part_id" not in row:
            continue
        path = root / row["path"]
        try:
            if row["part_id"] in seen_ids:
                raise LibraryError(f"duplicate part_id {row['part_id']}")
            if taxonomy is not None:
                allowed = taxonomy.get(row["category"], [])
                if row["part_type"] not in allowed:
                    raise LibraryError(
                        f"unknown part_type {row['part_type']!r} for category {row['category']!r}"
                    )
            rec = PartRecord(
                part_id=row["part_id"],
                category=row["category"],
                part_type=row["part_type"],
                cloud=load_xyz(path),
                caption=row.get("caption", ""),
                source=row.get("source", "human"),
                seed=row.get("seed"),
            )
            rec.validate()
        except (LibraryError, OSError, ValueError) as exc:
            errors.append(f"{path}: {exc}")
            continue
        seen_ids.add(rec.part_id)
        lib.add(rec)
    if len(lib) == 0:
        raise LibraryError(f"{root}: no valid records ({len(errors)} errors)")
    return lib, errors


def sample_parts(
    lib: ComponentLibrary,
    schema: AssemblySchema,
    rng: np.random.Generator,
    include_optional: Optional[list[bool]] = None,
) -> list[PartRecord]:
    """Draw one record per schema slot, uniformly and independently.

    Optional slots (probability < 1) are included with their configured
    probability unless include_optional pins the choice per slot.
    """
    schema.validate()
    picks: list[PartRecord] = []
    for i, slot in enumerate(schema.slots):
        if include_optional is not None:
            included = include_optional[i]
        elif slot.probability < 1.0:
            included = bool(rng.random() < slot.probability)
        else:
            included = True
        if not included:
            continue
        bucket = lib.bucket(schema.category, slot.part_type)
        picks.append(bucket[int(rng.integers(len(bucket)))])
    return picks


def placed_slots(
    schema: AssemblySchema, rng: np.random.Generator
) -> list[bool]:
    """Sample the optional-slot inclusion mask for one assembly."""
    mask = []
    for slot in schema.slots:
        mask.append(True if slot.probability >= 1.0 else bool(rng.random() < slot.probability))
    return mask


def synth_part(
    part_type: str,
    extents,
    point_count: int,
    caption_phrase: str,
    rng: np.random.Generator,
    part_id: Optional[str] = None,
    category: str = "synthetic",
    seed: Optional[int] = None,
) -> PartRecord:
    """Generate a box-surface part (or a four-post frame for base/leg types).

    The first 8 points are the exact corners of the bounding box, so the
    part's AABB equals +/- extents/2 exactly. The remaining points are
    sampled in mirrored pairs, keeping the centroid near the origin.
    """
    ex = np.asarray(extents, dtype=np.float64).reshape(3)
    if np.any(ex <= 0):
        raise LibraryError(f"synth_part: nonpositive extents {extents}")
    if point_count < 8:
        raise LibraryError("synth_part: point_count must be >= 8")
    half = ex / 2.0
    corners = np.array(
        [[sx * half[0], sy * half[1], sz * half[2]]
         for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=np.float64,
    )
    frame = "base" in part_type or "leg" in part_type
    n_rest = point_count - 8
    n_half = n_rest // 2
    sampled = _sample_surface(half, n_half + n_rest % 2, rng, frame)
    pts = [corners, sampled]
    if n_half > 0:
        pts.append(-sampled[:n_half])
    cloud = PointCloud(np.vstack(pts))
    pid = part_id or f"{part_type}-{rng.integers(1 << 31)}"
    return PartRecord(pid, category, part_type, cloud, caption_phrase, "synthetic", seed)


def _sample_surface(half: np.ndarray, n: int, rng: np.random.Generator, frame: bool) -> np.ndarray:
    """Uniform samples on a box surface, or on four corner posts."""
    if n == 0:
        return np.zeros((0, 3))
    if frame:
        # posts are thin boxes spanning the z extent at the four xy corners
        post_half = np.array([0.08 * half[0], 0.08 * half[1], half[2]])
        centers = np.array(
            [[sx * (half[0] - post_half[0]), sy * (half[1] - post_half[1]), 0.0]
             for sx in (-1, 1) for sy in (-1, 1)]
        )
        which = rng.integers(4, size=n)
        return centers[which] + _box_surface(post_half, n, rng)
    return _box_surface(half, n, rng)


def _box_surface(half: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    areas = np.array(
        [half[1] * half[2], half[1] * half[2],
         half[0] * half[2], half[0] * half[2],
         half[0] * half[1], half[0] * half[1]]
    )
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    for i in range(n):
        f = face[i]
        axis, sign = f // 2, 1.0 if f % 2 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[i, axis] = sign * half[axis]
        pts[i, others[0]] = u[i, 0] * half[others[0]]
        pts[i, others[1]] = u[i, 1] * half[others[1]]
    return pts


# ---------------------------------------------------------------------------
# schemas

def schema_to_dict(schema: AssemblySchema) -> dict:
    return {
        "category": schema.category,
        "slots": [
            {
                "name": s.name,
                "part_type": s.part_type,
                "relation": s.relation,
                "anchor": s.anchor,
                "margin": s.margin,
                "align": s.align,
                "probability": s.probability,
            }
            for s in schema.slots
        ],
        "cover_pairs": [list(p) for p in schema.cover_pairs],
    }


def schema_from_dict(d: dict) -> AssemblySchema:
    slots = [
        Slot(
            name=s["name"],
            part_type=s["part_type"],
            relation=s.get("relation", "root"),
            anchor=s.get("anchor"),
            margin=float(s.get("margin", 0.0)),
            align=s.get("align"),
            probability=float(s.get("probability", 1.0)),
        )
        for s in d["slots"]
    ]
    schema = AssemblySchema(
        category=d["category"],
        slots=slots,
        cover_pairs=[tuple(p) for p in d.get("cover_pairs", [])],
    )
    schema.validate()
    return schema


def save_schema(schema: AssemblySchema, path) -> None:
    Path(path).write_text(json.dumps(schema_to_dict(schema), indent=2) + "\n", encoding="utf-8")


def load_schema(path) -> AssemblySchema:
    return schema_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_table_schema() -> AssemblySchema:
    return AssemblySchema(
        category="table",
        slots=[
            Slot("tabletop", "tabletop", "root"),
            Slot("base", "base", "below", anchor="tabletop", margin=0.0),
        ],
        cover_pairs=[("base", "tabletop")],
    )


def default_chair_schema() -> AssemblySchema:
    return AssemblySchema(
        category="chair",
        slots=[
            Slot("seat", "seat", "root"),
            Slot("base", "base", "below", anchor="seat", margin=0.0),
            Slot("back", "back", "above", anchor="seat", margin=0.0, align=0.12),
            Slot("arm_left", "arm", "beside_neg_x", anchor="seat", margin=0.02,
                 align=0.5, probability=0.5),
            Slot("arm_right", "arm", "beside_pos_x", anchor="seat", margin=0.02,
                 align=0.5, probability=0.5),
        ],
        cover_pairs=[("base", "seat")],
    )


DEFAULT_SCHEMAS = {
    "table": default_table_schema,
    "chair": default_chair_schema,
}


# desk-scale synthetic corpus: 4 parts per bucket, captions describe geometry
_SYNTH_SPECS = {
    ("table", "tabletop"): [
        ((1.2, 1.2, 0.08), "a wide square wooden top"),
        ((0.7, 0.7, 0.06), "a small compact glass top"),
        ((1.6, 0.8, 0.10), "a long rectangular oak top"),
        ((0.9, 0.9, 0.16), "a thick heavy marble top"),
    ],
    ("table", "base"): [
        ((1.0, 1.0, 0.70), "four tall slender metal legs"),
        ((0.6, 0.6, 0.35), "four short stubby legs"),
        ((1.4, 0.7, 0.75), "a long narrow steel frame"),
        ((0.8, 0.8, 0.50), "a boxy pedestal base"),
    ],
    ("chair", "seat"): [
        ((0.5, 0.5, 0.08), "a square padded seat"),
        ((0.7, 0.6, 0.06), "a broad flat bench seat"),
        ((0.45, 0.45, 0.14), "a thick cushioned seat"),
        ((0.55, 0.5, 0.05), "a thin plastic seat"),
    ],
    ("chair", "base"): [
        ((0.45, 0.45, 0.45), "four straight wooden legs"),
        ((0.5, 0.5, 0.60), "four tall chrome legs"),
        ((0.4, 0.4, 0.30), "four squat angled legs"),
        ((0.48, 0.48, 0.50), "a sturdy swivel base"),
    ],
    ("chair", "back"): [
        ((0.5, 0.08, 0.55), "a tall slatted backrest"),
        ((0.55, 0.06, 0.35), "a low curved backrest"),
        ((0.45, 0.12, 0.60), "a high upholstered backrest"),
        ((0.5, 0.05, 0.45), "a mesh ventilated backrest"),
    ],
    ("chair", "arm"): [
        ((0.08, 0.45, 0.10), "a flat wooden armrest"),
        ((0.06, 0.4, 0.08), "a slim metal armrest"),
        ((0.1, 0.42, 0.12), "a padded leather armrest"),
        ((0.07, 0.38, 0.09), "a simple tubular armrest"),
    ],
}


def build_synthetic_library(seed: int = 0, point_count: int = 512) -> ComponentLibrary:
    """Desk-scale two-category corpus built from synth_part."""
    rng = np.random.default_rng(seed)
    lib = ComponentLibrary()
    for (category, part_type), variants in _SYNTH_SPECS.items():
        for k, (extents, phrase) in enumerate(variants):
            lib.add(
                synth_part(
                    part_type,
                    extents,
                    point_count,
                    phrase,
                    rng,
                    part_id=f"{category}-{part_type}-{k}",
                    category=category,
                    seed=seed,
                )
            )
    return lib
