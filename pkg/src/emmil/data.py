"""Synthetic planted-concept bags and the on-disk dataset format.

On disk a dataset is a directory holding ``index.json`` and
``features/<bag_id>.bin``. Each ``.bin`` file is a 16-byte header of two
little-endian uint64 (T, d) followed by T*d little-endian float32 values in
row-major order. ``index.json`` carries labels, clip durations and, when
known, ground-truth segments and planted per-clip key-instance flags.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from emmil.errors import DataError
from emmil.mil_core import Bag, FeatureSequence, Segment

HEADER = struct.Struct("<QQ")
INDEX_NAME = "index.json"
FORMAT_VERSION = 1


@dataclass
class SynthSpec:
    num_classes: int = 3
    feature_dim: int = 16
    num_positive: int = 40
    num_negative: int = 20
    length_range: tuple[int, int] = (20, 60)
    segments_per_bag: tuple[int, int] = (1, 3)
    segment_length: tuple[int, int] = (4, 10)
    concept_norm: float = 6.0
    sigma_pos: float = 0.5
    sigma_neg: float = 1.0
    # fraction of in-segment clips that actually carry the concept signal
    witness_rate: float = 1.0
    # concept strength at segment edges relative to the centre (1 = flat)
    edge_strength: float = 1.0
    cooccurrence: float = 0.2
    clip_duration_sec: float = 1.25
    separable: bool = True
    seed: int = 0
    # splits of one seed share concept points but draw different bags
    split: int = 0

    def validate(self) -> None:
        def bad(name, why):
            raise DataError(f"invalid synth spec field '{name}': {why}")

        if self.num_classes < 1:
            bad("num_classes", "must be >= 1")
        if self.feature_dim < 1:
            bad("feature_dim", "must be >= 1")
        if self.num_positive < 0 or self.num_negative < 0 or self.num_positive + self.num_negative < 1:
            bad("num_positive", "need at least one bag")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            bad("length_range", "need 1 <= min <= max")
        slo, shi = self.segments_per_bag
        if not 1 <= slo <= shi:
            bad("segments_per_bag", "need 1 <= min <= max")
        llo, lhi = self.segment_length
        if not 1 <= llo <= lhi:
            bad("segment_length", "need 1 <= min <= max")
        if lhi > lo:
            bad("segment_length", f"segments up to {lhi} clips are longer than T_min={lo}")
        # the most segments at minimum length, one-clip gaps between, must fit
        if shi * llo + shi - 1 > lo:
            bad("segments_per_bag", f"{shi} segments of length {llo} do not fit in T_min={lo}")
        if not 0 < self.witness_rate <= 1:
            bad("witness_rate", "must be in (0, 1]")
        if not 0 < self.edge_strength <= 1:
            bad("edge_strength", "must be in (0, 1]")
        if not 0 <= self.cooccurrence <= 1:
            bad("cooccurrence", "must be in [0, 1]")
        if self.sigma_pos <= 0 or self.sigma_neg <= 0:
            bad("sigma_pos", "noise scales must be positive")
        if not self.clip_duration_sec > 0:
            bad("clip_duration_sec", "must be positive")
        if self.separable and self.concept_norm <= 4 * max(self.sigma_pos, self.sigma_neg):
            bad("concept_norm", "separable preset needs concept_norm > 4 * max(sigma_pos, sigma_neg)")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"invalid synth spec field '{sorted(unknown)[0]}': unknown field")
        kw = dict(d)
        for k in ("length_range", "segments_per_bag", "segment_length"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, SynthSpec] = {
    "separable-default": SynthSpec(),
    # weaker edges and missing witnesses: the discriminative-peak regime
    "peaked": SynthSpec(edge_strength=0.35, witness_rate=0.85, concept_norm=5.0,
                        segment_length=(5, 12), length_range=(40, 80), separable=True),
}


def preset(name: str, **overrides) -> SynthSpec:
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class Dataset:
    bags: list[Bag]
    num_classes: int
    spec: SynthSpec | None = None
    concepts: np.ndarray | None = None  # (C, d) planted concept points
    background: np.ndarray | None = None  # (d,)

    def __post_init__(self):
        dims = {b.seq.d for b in self.bags}
        if len(dims) > 1:
            raise DataError(f"inconsistent feature dimensions {sorted(dims)}")
        for b in self.bags:
            if b.num_classes != self.num_classes:
                raise DataError(f"bag {b.bag_id}: label length {b.num_classes} != {self.num_classes}")

    def __len__(self):
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    @property
    def feature_dim(self) -> int:
        return self.bags[0].seq.d

    def by_id(self) -> dict[str, Bag]:
        return {b.bag_id: b for b in self.bags}


def _concept_points(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    background = np.zeros(spec.feature_dim)
    need = 4 * max(spec.sigma_pos, spec.sigma_neg)
    for _ in range(1000):
        dirs = rng.standard_normal((spec.num_classes, spec.feature_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        concepts = background + spec.concept_norm * dirs
        pts = np.vstack([concepts, background])
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        dist[np.diag_indices_from(dist)] = np.inf
        if not spec.separable or dist.min() > need:
            return concepts, background
    raise DataError("could not place separable concepts; raise concept_norm or feature_dim")


def _place_segments(T: int, lengths: list[int], rng: np.random.Generator) -> list[int]:
    """Random non-overlapping starts with at least one background clip between segments."""
    slack = T - sum(lengths) - (len(lengths) - 1)
    # distribute slack into len+1 gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
    gaps = np.diff(np.concatenate([[0], cuts]))
    starts, pos = [], 0
    for gap, length in zip(gaps, lengths):
        pos += gap
        starts.append(pos)
        pos += length + 1
    return starts


def generate(spec: SynthSpec) -> Dataset:
    """Draw a dataset of positive and negative bags with planted segments."""
    spec.validate()
    concepts, background = _concept_points(spec, np.random.default_rng(spec.seed))
    rng = np.random.default_rng([spec.seed, spec.split])
    C, d = spec.num_classes, spec.feature_dim
    kinds = [True] * spec.num_positive + [False] * spec.num_negative
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    bags = []
    for i, positive in enumerate(kinds):
        T = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        x = background + spec.sigma_neg * rng.standard_normal((T, d))
        z = np.zeros(T, dtype=np.int64)
        label = np.zeros(C, dtype=np.int64)
        segments: list[Segment] = []
        if positive:
            classes = [int(rng.integers(C))]
            if C > 1 and spec.segments_per_bag[1] > 1 and rng.random() < spec.cooccurrence:
                others = [c for c in range(C) if c != classes[0]]
                classes.append(int(rng.choice(others)))
            n_seg = int(rng.integers(max(spec.segments_per_bag[0], len(classes)),
                                     spec.segments_per_bag[1] + 1))
            seg_classes = classes + [int(rng.choice(classes)) for _ in range(n_seg - len(classes))]
            seg_classes = [seg_classes[j] for j in rng.permutation(n_seg)]
            longest = min(spec.segment_length[1], (T - n_seg + 1) // n_seg)
            lengths = [int(rng.integers(spec.segment_length[0], longest + 1))
                       for _ in range(n_seg)]
            for c, start, length in zip(seg_classes, _place_segments(T, lengths, rng), lengths):
                label[c] = 1
                pos = np.arange(length)
                # triangular profile from edge_strength at the ends to 1 in the middle
                centre = (length - 1) / 2
                ramp = 1.0 - (1.0 - spec.edge_strength) * (
                    np.abs(pos - centre) / centre if centre > 0 else np.zeros(length))
                witness = rng.random(length) < spec.witness_rate
                noise = spec.sigma_pos * rng.standard_normal((length, d))
                sig = background + ramp[:, None] * (concepts[c] - background) + noise
                rows = slice(start, start + length)
                x[rows] = np.where(witness[:, None], sig, x[rows])
                z[rows] = 1
                segments.append(Segment(c, start * spec.clip_duration_sec,
                                        (start + length) * spec.clip_duration_sec))
            segments.sort(key=lambda s: (s.start, s.label))
        # store what the file format can hold exactly
        x = x.astype(np.float32).astype(np.float64)
        seq = FeatureSequence(f"s{spec.split}bag{i:04d}", x, spec.clip_duration_sec)
        bags.append(Bag(seq, label, segments, z))
    return Dataset(bags, C, spec, concepts, background)


# ---------------------------------------------------------------------------
# disk format


def write_features(path: Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    T, d = features.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(T, d))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise DataError(f"{path}: truncated header")
    T, d = HEADER.unpack_from(raw)
    if T < 1 or d < 1:
        raise DataError(f"{path}: header declares T={T}, d={d}; both must be >= 1")
    expected = HEADER.size + 4 * T * d
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for T={T}, d={d}, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(T, d)
    return arr.astype(np.float64)


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for b in ds.bags:
        write_features(out / "features" / f"{b.bag_id}.bin", b.features)
        e = {
            "bag_id": b.bag_id,
            "label": b.label.tolist(),
            "clip_duration_sec": b.seq.clip_duration_sec,
        }
        if b.segments is not None:
            e["segments"] = [[s.label, s.start, s.end] for s in b.segments]
        if b.key_instances is not None:
            e["key_instances"] = b.key_instances.tolist()
        entries.append(e)
    index = {
        "format_version": FORMAT_VERSION,
        "num_classes": ds.num_classes,
        "feature_dim": ds.feature_dim,
        "bags": entries,
    }
    if ds.spec is not None:
        index["synth_spec"] = ds.spec.to_dict()
    (out / INDEX_NAME).write_text(json.dumps(index, indent=1) + "\n")
    return out


def load_features(path: str | Path) -> Dataset:
    """Load a dataset directory written by :func:`save_dataset` (or by hand)."""
    root = Path(path)
    index_path = root / INDEX_NAME
    if not index_path.exists():
        raise DataError(f"{root}: missing {INDEX_NAME}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{index_path}: {e}") from None
    C = int(index["num_classes"])
    d_expected = index.get("feature_dim")
    bags = []
    for e in index["bags"]:
        bag_id = e["bag_id"]
        feats = read_features(root / "features" / f"{bag_id}.bin")
        if d_expected is None:
            d_expected = feats.shape[1]
        if feats.shape[1] != d_expected:
            raise DataError(f"bag {bag_id}: feature dim {feats.shape[1]} != {d_expected}")
        if len(e["label"]) != C:
            raise DataError(f"bag {bag_id}: label length {len(e['label'])} != num_classes {C}")
        segs = None
        if "segments" in e:
            segs = []
            for c, s, t in e["segments"]:
                if not 0 <= int(c) < C:
                    raise DataError(f"bag {bag_id}: annotation class {c} outside [0, {C})")
                segs.append(Segment(int(c), float(s), float(t)))
        seq = FeatureSequence(bag_id, feats, float(e.get("clip_duration_sec", 1.25)))
        bags.append(Bag(seq, np.asarray(e["label"]), segs, e.get("key_instances")))
    if not bags:
        raise DataError(f"{root}: no bags in index")
    spec = SynthSpec.from_dict(index["synth_spec"]) if "synth_spec" in index else None
    return Dataset(bags, C, spec)


def fingerprint(path: str | Path) -> str:
    """SHA-256 over the index and every feature file, in index order."""
    root = Path(path)
    h = hashlib.sha256()
    index_bytes = (root / INDEX_NAME).read_bytes()
    h.update(index_bytes)
    for e in json.loads(index_bytes)["bags"]:
        h.update((root / "features" / f"{e['bag_id']}.bin").read_bytes())
    return h.hexdigest()
