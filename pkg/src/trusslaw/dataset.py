"""Sample records, the binary dataset format, split manifests and the
resumable dataset build."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .beam import BeamMaterial
from .design import DesignRecord, TessellationError, design_key, tessellate
from .homogenize import CellModel, PathError, SolverConfig, run_path
from .kinematics import (
    DeformationPath,
    extrapolation_paths,
    green_lagrange,
    path_F,
    to_voigt,
    training_paths,
    unseen_load_paths,
)

log = logging.getLogger(__name__)

MAGIC = b"HCDS"
VERSION = 1
FLAG_CONVERGED = 1
FLAG_PERTURBED = 2

# 4 + 4 + 2 + 2 + 22 * 8 = 188 bytes of payload; padded to the 200-byte frame
RECORD_DTYPE = np.dtype(
    [
        ("design", "<u4"),
        ("path", "<u4"),
        ("t", "<u2"),
        ("flags", "<u2"),
        ("F", "<f8", (9,)),
        ("E", "<f8", (6,)),
        ("S", "<f8", (6,)),
        ("W", "<f8"),
        ("reserved", "V12"),
    ]
)
assert RECORD_DTYPE.itemsize == 200
_HEADER = struct.Struct("<4sHH8s")


def layout_hash() -> bytes:
    text = ";".join(f"{n}:{RECORD_DTYPE.fields[n][0].str}" for n in RECORD_DTYPE.names)
    return hashlib.sha256(text.encode()).digest()[:8]


class FormatError(IOError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    design_id: int
    path_id: int
    t: int
    F: np.ndarray
    E: np.ndarray
    S: np.ndarray
    W: float
    converged: bool = True

    def to_row(self, perturbed: bool = False) -> np.ndarray:
        row = np.zeros((), dtype=RECORD_DTYPE)
        row["design"], row["path"], row["t"] = self.design_id, self.path_id, self.t
        row["flags"] = (FLAG_CONVERGED if self.converged else 0) | (FLAG_PERTURBED if perturbed else 0)
        row["F"] = np.asarray(self.F, float).ravel()
        row["E"] = np.asarray(self.E, float)
        row["S"] = np.asarray(self.S, float)
        row["W"] = self.W
        return row

    @classmethod
    def from_row(cls, row) -> "SampleRecord":
        return cls(
            int(row["design"]), int(row["path"]), int(row["t"]),
            np.array(row["F"]).reshape(3, 3), np.array(row["E"]), np.array(row["S"]),
            float(row["W"]), bool(row["flags"] & FLAG_CONVERGED),
        )


def write_records(path, rows: np.ndarray) -> None:
    rows = np.asarray(rows, dtype=RECORD_DTYPE)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, layout_hash()))
        fh.write(rows.tobytes())
    os.replace(tmp, path)


def read_records(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, _, lh = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if lh != layout_hash():
        raise FormatError(f"{path}: record layout hash mismatch")
    body = data[_HEADER.size :]
    if len(body) % RECORD_DTYPE.itemsize:
        raise FormatError(f"{path}: body is not a whole number of records")
    return np.frombuffer(body, dtype=RECORD_DTYPE).copy()


# --------------------------------------------------------------------------
# splits and manifest

SPLIT_NAMES = ("train", "test_L", "test_G", "test_GL")


@dataclass
class DatasetSplit:
    """Named split: for each design id, the path ids it is run on."""

    name: str
    entries: dict = field(default_factory=dict)

    @property
    def design_ids(self) -> list:
        return sorted(self.entries)

    def pairs(self):
        for d in self.design_ids:
            for p in self.entries[d]:
                yield d, p


@dataclass
class DatasetPlan:
    paths: dict  # path id -> DeformationPath
    splits: dict  # name -> DatasetSplit

    def check(self) -> None:
        train = set(self.splits["train"].design_ids) if "train" in self.splits else set()
        for name in ("test_G", "test_GL"):
            if name in self.splits and set(self.splits[name].design_ids) & train:
                raise ValueError(f"{name} designs overlap the training designs")
        if "test_L" in self.splits and "train" in self.splits:
            tl = self.splits["test_L"]
            if not set(tl.design_ids) <= train:
                raise ValueError("test_L designs must be training designs")
            train_params = {self.paths[p].endpoint().tobytes() for _, p in self.splits["train"].pairs()}
            for _, p in tl.pairs():
                if self.paths[p].endpoint().tobytes() in train_params:
                    raise ValueError("test_L reuses a training loading")


def plan_splits(design_ids, n_test_g: int, n_test_l: int, k_gl: int, steps: int,
                rng: np.random.Generator, k_l: int = 7) -> DatasetPlan:
    """Random design partition into train / held-out plus the path table.

    Held-out designs serve both test_G (training paths) and test_GL (k_gl
    random extrapolation paths each); test_L runs k_l unseen loadings on a
    subset of the training designs.
    """
    ids = np.array(sorted(design_ids), dtype=int)
    perm = rng.permutation(len(ids))
    held = sorted(ids[perm[:n_test_g]].tolist())
    train = sorted(ids[perm[n_test_g:]].tolist())
    paths: dict = {}
    for p in training_paths(steps):
        paths[len(paths)] = p
    train_pids = tuple(range(len(paths)))
    l_pids = []
    for p in unseen_load_paths(rng, steps, k_l):
        l_pids.append(len(paths))
        paths[len(paths)] = p
    splits = {
        "train": DatasetSplit("train", {d: train_pids for d in train}),
        "test_L": DatasetSplit("test_L", {}),
        "test_G": DatasetSplit("test_G", {d: train_pids for d in held}),
        "test_GL": DatasetSplit("test_GL", {}),
    }
    if n_test_l and train:
        chosen = sorted(rng.choice(train, size=min(n_test_l, len(train)), replace=False).tolist())
        splits["test_L"].entries = {d: tuple(l_pids) for d in chosen}
    for d in held:
        pids = []
        for p in extrapolation_paths(rng, k_gl, steps):
            pids.append(len(paths))
            paths[len(paths)] = p
        splits["test_GL"].entries[d] = tuple(pids)
    plan = DatasetPlan(paths, splits)
    plan.check()
    return plan


def _ranges(values) -> str:
    values = sorted(values)
    if not values:
        return "-"
    out, start, prev = [], values[0], values[0]
    for v in values[1:] + [None]:
        if v is not None and v == prev + 1:
            prev = v
            continue
        out.append(str(start) if start == prev else f"{start}-{prev}")
        if v is not None:
            start = prev = v
    return ",".join(out)


def _parse_ranges(text: str) -> list:
    if text.strip() == "-":
        return []
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


MANIFEST_HEADER = "# trusslaw-manifest v1"


def write_manifest(path, plan: DatasetPlan) -> None:
    lines = [MANIFEST_HEADER, "[paths]"]
    lines += [f"{pid} {plan.paths[pid].descriptor()}" for pid in sorted(plan.paths)]
    for name in SPLIT_NAMES:
        if name not in plan.splits:
            continue
        lines.append(f"[split {name}]")
        split = plan.splits[name]
        # group designs sharing the same path list into ranges
        groups: dict = {}
        for d in split.design_ids:
            groups.setdefault(split.entries[d], []).append(d)
        for pids, ds in sorted(groups.items(), key=lambda kv: min(kv[1])):
            lines.append(f"{_ranges(ds)}: {_ranges(list(pids))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetPlan:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: not a manifest")
    paths, splits, section = {}, {}, None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("["):
            section = line.strip("[]")
            if section.startswith("split "):
                splits[section[6:]] = DatasetSplit(section[6:])
            continue
        if section == "paths":
            pid, desc = line.split(maxsplit=1)
            paths[int(pid)] = DeformationPath.parse(desc)
        elif section and section.startswith("split "):
            ds, ps = line.split(":")
            pids = tuple(_parse_ranges(ps))
            for d in _parse_ranges(ds):
                splits[section[6:]].entries[d] = pids
    plan = DatasetPlan(paths, splits)
    plan.check()
    return plan


# --------------------------------------------------------------------------
# build


@dataclass(frozen=True)
class HomogenizeConfig:
    rho: float = 0.025
    youngs_modulus: float = 1.0
    poisson_ratio: float = 0.3
    solver: SolverConfig = SolverConfig()

    def material(self) -> BeamMaterial:
        return BeamMaterial(self.youngs_modulus, self.poisson_ratio)


def path_records(design_id: int, path_id: int, path: DeformationPath, model: CellModel | None,
                 config: HomogenizeConfig) -> np.ndarray:
    """Records for t = 1..T; unconverged steps keep F and E with NaN S, W."""
    points, perturbed = {}, set()
    if model is not None:
        try:
            result = run_path(model, path, config.solver)
            points = {pt.step: pt for pt in result.points}
            perturbed = set(result.perturbed_steps)
        except PathError as exc:
            log.warning("design %d path %d excluded: %s", design_id, path_id, exc)
    rows = np.zeros(path.steps, dtype=RECORD_DTYPE)
    for t in range(1, path.steps + 1):
        F = path_F(path, t)
        pt = points.get(t)
        rec = SampleRecord(
            design_id, path_id, t, F, to_voigt(green_lagrange(F)),
            to_voigt(pt.S) if pt else np.full(6, np.nan),
            pt.W if pt else np.nan, pt is not None,
        )
        rows[t - 1] = rec.to_row(perturbed=t in perturbed)
    return rows


def _part_name(design: DesignRecord, path: DeformationPath, config: HomogenizeConfig) -> str:
    h = hashlib.sha256()
    h.update(design_key(design.graph))
    h.update(path.descriptor().encode())
    h.update(repr(config).encode())
    return h.hexdigest()[:24] + ".part"


def _design_task(args):
    design, items, config, part_dir = args
    try:
        model = CellModel(tessellate(design.graph), config.material(), rho=config.rho,
                          subdivision=config.solver.subdivision)
    except (TessellationError, ValueError) as exc:
        log.warning("design %d cannot be meshed: %s", design.id, exc)
        model = None
    for pid, path in items:
        target = Path(part_dir) / _part_name(design, path, config)
        if target.exists():
            continue
        write_records(target, path_records(design.id, pid, path, model, config))
    return design.id


def build_dataset(designs: list, plan: DatasetPlan, out_dir, config: HomogenizeConfig = HomogenizeConfig(),
                  workers: int = 1) -> dict:
    """Homogenize every (design, path) of every split and write one record
    file per split plus the manifest.

    Each finished (design, path) is stored as a content-addressed part file,
    so an interrupted build resumes where it stopped; the merged split files
    are assembled in sorted key order and are independent of scheduling.
    """
    out = Path(out_dir)
    part_dir = out / "parts"
    part_dir.mkdir(parents=True, exist_ok=True)
    by_id = {d.id: d for d in designs}
    work: dict = {}
    for split in plan.splits.values():
        for d, p in split.pairs():
            work.setdefault(d, set()).add(p)
    tasks = [
        (by_id[d], [(p, plan.paths[p]) for p in sorted(ps)], config, str(part_dir))
        for d, ps in sorted(work.items())
    ]
    if workers > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            for _ in pool.imap_unordered(_design_task, tasks):
                pass
    else:
        for task in tasks:
            _design_task(task)

    counts = {}
    for name, split in plan.splits.items():
        chunks = [
            read_records(part_dir / _part_name(by_id[d], plan.paths[p], config))
            for d, p in split.pairs()
        ]
        rows = np.concatenate(chunks) if chunks else np.zeros(0, dtype=RECORD_DTYPE)
        write_records(out / f"{name}.hcds", rows)
        bad = int(np.sum((rows["flags"] & FLAG_CONVERGED) == 0))
        counts[name] = (len(rows), bad)
        log.info("split %s: %d records, %d unconverged", name, len(rows), bad)
    write_manifest(out / "manifest.txt", plan)
    return counts


def load_split(out_dir, name: str, converged_only: bool = True) -> np.ndarray:
    rows = read_records(Path(out_dir) / f"{name}.hcds")
    if converged_only:
        rows = rows[(rows["flags"] & FLAG_CONVERGED) != 0]
    return rows
