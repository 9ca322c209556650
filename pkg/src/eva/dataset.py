"""Synthetic compositional dataset generator and split-manifest I/O.

An image is a matrix of patch tokens.  For the pair (s, o), half the
patches carry the object latent ``w_o`` and half carry the state-object
interaction ``u_s * w_o``, so how a state looks depends on the object.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .labels import LabelSpace, Pair

SPLITS = ("train", "val_seen", "val_unseen", "test_seen", "test_unseen")
PAYLOAD_MAGIC = b"EVAT"

# |S|, |O|, |C|, train |C^s|, val |C^s|, val |C^u|, test |C^s|, test |C^u|
BENCHMARK_SIZES = {
    "MIT-States": (115, 245, 28175, 1262, 300, 300, 400, 400),
    "UT-Zappos": (16, 12, 192, 83, 15, 15, 18, 18),
    "C-GQA": (413, 674, 278362, 5592, 1252, 1040, 888, 923),
}


class SplitError(ValueError):
    pass


@dataclass
class SplitSpec:
    n_states: int = 8
    n_objects: int = 10
    n_train_pairs: int = 40
    n_val_seen: int = 20
    n_val_unseen: int = 20
    n_test_seen: int = 20
    n_test_unseen: int = 20
    images_per_pair: int = 20
    noise: float = 0.3
    n_patches: int = 16
    d_in: int = 16
    # Mean of the object latents.  With a positive mean u_s * w_o keeps the sign
    # pattern of u_s, and state becomes linearly decodable across objects.
    object_offset: float = 0.0
    seed: int = 0

    @classmethod
    def from_benchmark(cls, name: str, **overrides) -> "SplitSpec":
        n_s, n_o, _, tr, vs, vu, ts, tu = BENCHMARK_SIZES[name]
        return cls(n_states=n_s, n_objects=n_o, n_train_pairs=tr, n_val_seen=vs,
                   n_val_unseen=vu, n_test_seen=ts, n_test_unseen=tu, **overrides)

    @property
    def n_compositions(self) -> int:
        return self.n_states * self.n_objects

    def validate(self) -> None:
        if min(self.n_states, self.n_objects) < 1:
            raise SplitError("need at least one state and one object")
        used = self.n_train_pairs + self.n_val_unseen + self.n_test_unseen
        if used > self.n_compositions:
            raise SplitError(
                f"{used} seen+unseen pairs requested but only {self.n_compositions} exist")
        if self.n_train_pairs < max(self.n_states, self.n_objects):
            raise SplitError("too few training pairs to cover every state and object")
        if max(self.n_val_seen, self.n_test_seen) > self.n_train_pairs:
            raise SplitError("seen evaluation pairs must be drawn from the training pairs")
        if self.images_per_pair < 1 or self.noise < 0:
            raise SplitError("images_per_pair must be >= 1 and noise >= 0")


@dataclass
class Sample:
    tokens: np.ndarray
    state: int
    object: int
    composition: int
    split: str


@dataclass
class CZSLDataset:
    n_states: int
    n_objects: int
    pairs: dict[str, list[Pair]]
    tokens: dict[str, np.ndarray]
    states: dict[str, np.ndarray]
    objects: dict[str, np.ndarray]
    ids: dict[str, list[str]] = field(default_factory=dict)
    state_names: list[str] | None = None
    object_names: list[str] | None = None

    def __len__(self) -> int:
        return sum(len(v) for v in self.states.values())

    @property
    def train_pairs(self) -> list[Pair]:
        return self.pairs["train"]

    def label_space(self, phase: str = "test", mode: str = "closed") -> LabelSpace:
        """Seen pairs are the training pairs; unseen pairs come from ``phase``."""
        if phase not in ("val", "test", "train"):
            raise ValueError(f"unknown phase {phase!r}")
        unseen = [] if phase == "train" else self.pairs[f"{phase}_unseen"]
        return LabelSpace(self.n_states, self.n_objects, self.train_pairs, unseen, mode,
                          state_names=self.state_names, object_names=self.object_names)

    def phase(self, phase: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tokens, states and objects of a phase's seen and unseen images."""
        if phase == "train":
            return self.tokens["train"], self.states["train"], self.objects["train"]
        keys = [f"{phase}_seen", f"{phase}_unseen"]
        return (np.concatenate([self.tokens[k] for k in keys]),
                np.concatenate([self.states[k] for k in keys]),
                np.concatenate([self.objects[k] for k in keys]))

    def samples(self, split: str):
        for x, s, o in zip(self.tokens[split], self.states[split], self.objects[split]):
            yield Sample(x, int(s), int(o), int(s) * self.n_objects + int(o), split)


# ---------------------------------------------------------------- generation


def assign_pairs(spec: SplitSpec) -> dict[str, list[Pair]]:
    """Deterministic split of S x O into train / val / test pair sets."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    n_s, n_o = spec.n_states, spec.n_objects
    ps, po = rng.permutation(n_s), rng.permutation(n_o)
    train: list[Pair] = []
    for i in range(max(n_s, n_o)):
        p = (int(ps[i % n_s]), int(po[i % n_o]))
        if p not in train:
            train.append(p)
    taken = set(train)
    rest = [(s, o) for s in range(n_s) for o in range(n_o) if (s, o) not in taken]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    need = spec.n_train_pairs - len(train)
    train += rest[:need]
    rest = rest[need:]
    val_unseen = rest[: spec.n_val_unseen]
    test_unseen = rest[spec.n_val_unseen: spec.n_val_unseen + spec.n_test_unseen]
    train = sorted(train)
    val_seen = sorted(train[i] for i in rng.choice(len(train), spec.n_val_seen, replace=False))
    test_seen = sorted(train[i] for i in rng.choice(len(train), spec.n_test_seen, replace=False))
    return {"train": train, "val_seen": val_seen, "val_unseen": sorted(val_unseen),
            "test_seen": test_seen, "test_unseen": sorted(test_unseen)}


def latents(spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1])
    u = rng.normal(0.0, 1.0, size=(spec.n_states, spec.d_in))
    w = spec.object_offset + rng.normal(0.0, 1.0, size=(spec.n_objects, spec.d_in))
    return u, w


def pair_images(spec: SplitSpec, u: np.ndarray, w: np.ndarray, pair: Pair, split: str) -> np.ndarray:
    """Images for one (pair, split); seeded by (seed, pair, split) so order does not matter."""
    s, o = pair
    rng = np.random.default_rng([spec.seed, 2, s * spec.n_objects + o, SPLITS.index(split)])
    n, p, d = spec.images_per_pair, spec.n_patches, spec.d_in
    half = p // 2
    clean = np.empty((p, d))
    clean[:half] = w[o]
    clean[half:] = u[s] * w[o]
    return clean[None] + spec.noise * rng.normal(0.0, 1.0, size=(n, p, d))


def generate(spec: SplitSpec) -> CZSLDataset:
    pairs = assign_pairs(spec)
    u, w = latents(spec)
    tokens, states, objects, ids = {}, {}, {}, {}
    for split in SPLITS:
        blocks = [pair_images(spec, u, w, p, split) for p in pairs[split]]
        n = spec.images_per_pair
        tokens[split] = (np.concatenate(blocks) if blocks
                         else np.zeros((0, spec.n_patches, spec.d_in)))
        states[split] = np.repeat([p[0] for p in pairs[split]], n).astype(np.int64)
        objects[split] = np.repeat([p[1] for p in pairs[split]], n).astype(np.int64)
        ids[split] = [f"{split}-{s}-{o}-{k}" for s, o in pairs[split] for k in range(n)]
    return CZSLDataset(spec.n_states, spec.n_objects, pairs, tokens, states, objects, ids,
                       [f"s{i}" for i in range(spec.n_states)],
                       [f"o{i}" for i in range(spec.n_objects)])


# ---------------------------------------------------------------- verification


def verify_split(ds: CZSLDataset) -> dict:
    """Check split invariants; returns a report with a list of violations."""
    violations = []
    train = set(ds.pairs.get("train", []))
    for key in ("val_unseen", "test_unseen"):
        bad = train & set(ds.pairs.get(key, []))
        if bad:
            violations.append(f"{key} pairs also in train: {sorted(bad)}")
    for key in ("val_seen", "test_seen"):
        extra = set(ds.pairs.get(key, [])) - train
        if extra:
            violations.append(f"{key} pairs missing from train: {sorted(extra)}")
    missing_s = set(range(ds.n_states)) - {s for s, _ in train}
    missing_o = set(range(ds.n_objects)) - {o for _, o in train}
    if missing_s:
        violations.append(f"states never seen in train: {sorted(missing_s)}")
    if missing_o:
        violations.append(f"objects never seen in train: {sorted(missing_o)}")
    report = {"ok": not violations, "violations": violations,
              "n_states": ds.n_states, "n_objects": ds.n_objects,
              "open_world_size": ds.n_states * ds.n_objects,
              "pairs": {k: len(v) for k, v in ds.pairs.items()},
              "images": {k: int(len(v)) for k, v in ds.states.items()}}
    if not violations:
        closed = ds.label_space("test", "closed")
        report["closed_world_size"] = len(closed)
        if set(closed.target) != train | set(ds.pairs["test_unseen"]):
            violations.append("closed-world test space is not C^s | C^u")
            report["ok"] = False
        report["open_world_check"] = len(ds.label_space("test", "open")) == ds.n_states * ds.n_objects
    return report


# ---------------------------------------------------------------- manifest I/O


def write_payload(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(PAYLOAD_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_payload(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != PAYLOAD_MAGIC:
        raise SplitError(f"{path}: not a token payload file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)
    start = 8 + 8 * ndim
    count = int(np.prod(shape))
    if len(raw) - start != 8 * count:
        raise SplitError(f"{path}: payload holds {len(raw) - start} bytes, expected {8 * count}")
    return np.frombuffer(raw, dtype="<f8", offset=start, count=count).reshape(shape).astype(np.float64)


def save(ds: CZSLDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    sn = ds.state_names or [f"s{i}" for i in range(ds.n_states)]
    on = ds.object_names or [f"o{i}" for i in range(ds.n_objects)]
    with open(manifest, "w") as fh:
        for split in SPLITS:
            ids = ds.ids.get(split) or [f"{split}-{i}" for i in range(len(ds.states[split]))]
            for rid, s, o in zip(ids, ds.states[split], ds.objects[split]):
                fh.write(json.dumps({"id": rid, "state": sn[s], "object": on[o],
                                     "split": split}) + "\n")
    for split in SPLITS:
        write_payload(out / f"tokens_{split}.bin", ds.tokens[split])
    meta = {"states": sn, "objects": on,
            "pairs": {k: [list(p) for p in v] for k, v in ds.pairs.items()}}
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    return manifest


def load_split(manifest, load_tokens: bool = True) -> CZSLDataset:
    """Read a JSON-lines split manifest (and token payloads next to it, if present)."""
    manifest = Path(manifest)
    lines = manifest.read_text().splitlines()
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rid, state, obj, split = rec["id"], rec["state"], rec["object"], rec["split"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SplitError(f"{manifest}:{lineno}: malformed record ({exc})") from None
        if split not in SPLITS:
            raise SplitError(f"{manifest}:{lineno}: unknown split tag {split!r}")
        records.append((lineno, str(rid), str(state), str(obj), split))
    if not records:
        raise SplitError(f"{manifest}: no records")

    meta_path = manifest.parent / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    state_names = list(meta.get("states") or dict.fromkeys(r[2] for r in records))
    object_names = list(meta.get("objects") or dict.fromkeys(r[3] for r in records))
    s_idx = {n: i for i, n in enumerate(state_names)}
    o_idx = {n: i for i, n in enumerate(object_names)}

    seen_ids: dict[str, int] = {}
    unseen_pairs = set()
    for lineno, rid, s, o, split in records:
        if rid in seen_ids:
            raise SplitError(f"{manifest}:{lineno}: duplicate id {rid!r} (first on line {seen_ids[rid]})")
        seen_ids[rid] = lineno
        if s not in s_idx or o not in o_idx:
            raise SplitError(f"{manifest}:{lineno}: unknown primitive {s!r}/{o!r}")
        if split.endswith("unseen"):
            unseen_pairs.add((s_idx[s], o_idx[o]))
    for lineno, rid, s, o, split in records:
        if split == "train" and (s_idx[s], o_idx[o]) in unseen_pairs:
            raise SplitError(f"{manifest}:{lineno}: train record uses unseen pair ({s}, {o})")

    states = {k: [] for k in SPLITS}
    objects = {k: [] for k in SPLITS}
    ids = {k: [] for k in SPLITS}
    for _, rid, s, o, split in records:
        states[split].append(s_idx[s])
        objects[split].append(o_idx[o])
        ids[split].append(rid)
    pairs = {k: sorted(set(zip(states[k], objects[k]))) for k in SPLITS}
    # keep the generator's pair order when meta.json agrees with the records
    for k, listed in (meta.get("pairs") or {}).items():
        listed = [tuple(p) for p in listed]
        if k in pairs and sorted(listed) == pairs[k]:
            pairs[k] = listed
    tokens = {}
    for split in SPLITS:
        path = manifest.parent / f"tokens_{split}.bin"
        if load_tokens and path.exists():
            tokens[split] = read_payload(path)
            if len(tokens[split]) != len(states[split]):
                raise SplitError(f"{path}: {len(tokens[split])} images but manifest lists "
                                 f"{len(states[split])}")
        else:
            tokens[split] = np.zeros((len(states[split]), 0, 0))
    return CZSLDataset(len(state_names), len(object_names), pairs, tokens,
                       {k: np.asarray(v, dtype=np.int64) for k, v in states.items()},
                       {k: np.asarray(v, dtype=np.int64) for k, v in objects.items()},
                       ids, state_names, object_names)


def spec_dict(spec: SplitSpec) -> dict:
    return asdict(spec)
