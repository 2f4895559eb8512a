"""On-disk formats: tensor container, text tables and the run manifest.

Container layout (all integers little-endian)::

    8 bytes   magic  b"BITBUDGT"
    4 bytes   format version (uint32)
    4 bytes   header length in bytes (uint32)
    header    UTF-8 JSON: {"kind", "meta", "sections": [{"name", "shape", "offset", "nbytes"}]}
    data      concatenated float64 ("<f8") tensors; offsets are relative to the data start
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from .allocate import DiscreteAssignment
from .baselines import TraceEstimate
from .errors import IntegrityError, InputError
from .masks import SoftScores
from .model import FullPrecisionModel, ModelSpec, ModuleId
from .quant import CandidatePool

MAGIC = b"BITBUDGT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
MANIFEST = "manifest.json"
TOOL_VERSION = "0.1.0"


def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- container -----------------------------------------------------------


def pack_container(kind, meta, tensors):
    """Serialize ``[(name, array), ...]`` into container bytes."""
    sections, chunks, offset = [], [], 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        sections.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": kind, "meta": meta, "sections": sections}, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def unpack_container(data, kind=None):
    """Inverse of :func:`pack_container`; returns ``(meta, {name: array})``."""
    if len(data) < _PREFIX.size:
        raise InputError("container truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise InputError("not a bitbudget container (bad magic)")
    if version != VERSION:
        raise InputError(f"unsupported container version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(data[_PREFIX.size:start].decode())
    if kind is not None and header["kind"] != kind:
        raise InputError(f"expected a {kind} container, found {header['kind']}")
    body = data[start:]
    declared = sum(s["nbytes"] for s in header["sections"])
    if declared != len(body):
        raise InputError(f"container body is {len(body)} bytes, header declares {declared}")
    tensors = {}
    for s in header["sections"]:
        raw = body[s["offset"]:s["offset"] + s["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(s["shape"]).astype(np.float64)
        arr.setflags(write=False)
        tensors[s["name"]] = arr
    return header["meta"], tensors


def model_bytes(model):
    meta = {"spec": model.spec.to_dict(), "spec_hash": model.spec.spec_hash()}
    return pack_container("model", meta, model.arrays())


def model_from_bytes(data):
    meta, tensors = unpack_container(data, "model")
    spec = ModelSpec.from_dict(meta["spec"])
    if spec.spec_hash() != meta["spec_hash"]:
        raise IntegrityError("model spec hash does not match its spec")
    return FullPrecisionModel.from_arrays(spec, tensors)


def pool_bytes(pool):
    meta = {"spec_hash": pool.spec_hash, "bits": list(pool.bits), "group_size": pool.group_size}
    tensors = []
    for m in pool.module_ids():
        for k, b in enumerate(pool.bits):
            tensors.append((f"{m}.b{b}", pool.candidates[m][k]))
    return pack_container("pool", meta, tensors)


def pool_from_bytes(data, model):
    meta, tensors = unpack_container(data, "pool")
    if meta["spec_hash"] != model.spec.spec_hash():
        raise IntegrityError("pool was built for a different model spec")
    bits = tuple(meta["bits"])
    candidates = {}
    for m in model.spec.module_ids():
        stacked = np.stack([tensors[f"{m}.b{b}"] for b in bits])
        stacked.setflags(write=False)
        candidates[m] = stacked
    return CandidatePool(bits, meta["group_size"], meta["spec_hash"], dict(model.weights), candidates)


# -- text tables ---------------------------------------------------------


def _g(x):
    return f"{float(x):.17g}"


def _split_header(text, kind):
    lines = text.splitlines()
    if not lines or lines[0] != f"# bitbudget {kind} v1":
        raise InputError(f"not a bitbudget {kind} table")
    header, rows, in_rows = {}, [], False
    for line in lines[1:]:
        if not line.strip():
            continue
        if in_rows:
            rows.append(line.split())
            continue
        key, _, value = line.partition(" ")
        if key == "columns":
            in_rows = True
        header[key] = value
    return header, rows


def format_scores(scores, spec_hash):
    meta = scores.meta
    lines = [
        "# bitbudget scores v1",
        f"spec_hash {spec_hash}",
        "bits " + " ".join(str(b) for b in scores.bits),
        f"b_target {_g(scores.b_target)}",
        f"steps {meta.get('steps', 0)}",
        f"seed {meta.get('seed', 0)}",
        f"mode {meta.get('mode', 'unknown')}",
        f"expected_avg_bits {_g(scores.expected_avg_bits)}",
        "counts " + " ".join(str(int(c)) for c in scores.counts),
        "columns layer proj " + " ".join(f"s_{b}" for b in scores.bits) + " expected_bits",
    ]
    eb = scores.expected_bits()
    for m, row in zip(scores.modules, scores.scores):
        lines.append(f"{m.layer} {m.proj} " + " ".join(_g(v) for v in row) + f" {_g(eb[m])}")
    return "\n".join(lines) + "\n"


def parse_scores(text):
    header, rows = _split_header(text, "scores")
    bits = tuple(int(b) for b in header["bits"].split())
    modules = [ModuleId(int(r[0]), r[1]) for r in rows]
    table = np.array([[float(v) for v in r[2:2 + len(bits)]] for r in rows])
    meta = {
        "spec_hash": header["spec_hash"],
        "steps": int(header["steps"]),
        "seed": int(header["seed"]),
        "mode": header["mode"],
    }
    counts = [int(c) for c in header["counts"].split()]
    return SoftScores(modules, bits, table, counts, float(header["b_target"]), meta)


def format_assignment(assignment, spec_hash):
    lines = [
        "# bitbudget assignment v1",
        f"spec_hash {spec_hash}",
        "bits " + " ".join(str(b) for b in assignment.bits),
        f"b_target {_g(assignment.b_target)}",
        f"solver {assignment.solver}",
        f"optimal {str(assignment.optimal).lower()}",
        f"objective {_g(assignment.objective_value)}",
        f"realized_bits {_g(assignment.realized_avg_bits)}",
        f"used_bits {assignment.used_bits}",
        f"capacity {assignment.capacity}",
        "counts " + " ".join(str(int(c)) for c in assignment.counts),
        "columns layer proj chosen_bit",
    ]
    for m, b in zip(assignment.modules, assignment.chosen_bits):
        lines.append(f"{m.layer} {m.proj} {b}")
    return "\n".join(lines) + "\n"


def parse_assignment(text):
    header, rows = _split_header(text, "assignment")
    bits = tuple(int(b) for b in header["bits"].split())
    choices = np.array([bits.index(int(r[2])) for r in rows], dtype=np.int64)
    return DiscreteAssignment(
        modules=[ModuleId(int(r[0]), r[1]) for r in rows],
        bits=bits,
        choices=choices,
        counts=np.array([int(c) for c in header["counts"].split()], dtype=np.int64),
        b_target=float(header["b_target"]),
        objective_value=float(header["objective"]),
        solver=header["solver"],
        optimal=header["optimal"] == "true",
        capacity=int(header["capacity"]),
    )


def format_traces(traces, spec_hash):
    lines = [
        "# bitbudget traces v1",
        f"spec_hash {spec_hash}",
        f"num_probes {traces.num_probes}",
        f"probe_seed {traces.probe_seed}",
        "columns layer proj trace",
    ]
    for m, t in traces.traces.items():
        lines.append(f"{m.layer} {m.proj} {_g(t)}")
    return "\n".join(lines) + "\n"


def parse_traces(text):
    header, rows = _split_header(text, "traces")
    traces = {ModuleId(int(r[0]), r[1]): float(r[2]) for r in rows}
    return TraceEstimate(traces, int(header["num_probes"]), int(header["probe_seed"]))


def format_csv(header, rows):
    def cell(v):
        if isinstance(v, Fraction):
            v = float(v)
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

    out = [",".join(header)]
    out += [",".join(cell(v) for v in row) for row in rows]
    return "\n".join(out) + "\n"


# -- manifest ------------------------------------------------------------


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


class RunDirectory:
    """Output directory whose files are tracked in ``manifest.json``."""

    def __init__(self, root, config_hash=None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / MANIFEST
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"tool_version": TOOL_VERSION, "config_hash": config_hash, "files": {}}
        if config_hash is not None:
            self.manifest["config_hash"] = config_hash

    def path(self, name):
        return self.root / name

    def write(self, name, data, tracked=True):
        if isinstance(data, str):
            data = data.encode()
        _atomic_write(self.root / name, data)
        if tracked:
            self.manifest["files"][name] = {
                "sha256": sha256_bytes(data),
                "bytes": len(data),
                "written": _timestamp(),
            }
            self._save()

    def read(self, name):
        """Bytes of ``name`` after checking them against the manifest."""
        entry = self.manifest["files"].get(name)
        if entry is None:
            raise IntegrityError(f"{name} is not listed in {self.manifest_path}")
        path = self.root / name
        if not path.exists():
            raise IntegrityError(f"{name} is listed in the manifest but missing")
        data = path.read_bytes()
        if sha256_bytes(data) != entry["sha256"]:
            raise IntegrityError(f"hash mismatch for {name}: file changed since it was written")
        return data

    def read_text(self, name):
        return self.read(name).decode()

    def has(self, name):
        return name in self.manifest["files"]

    def validate(self):
        """Check every listed file; returns the list of checked names."""
        names = sorted(self.manifest["files"])
        for name in names:
            self.read(name)
        return names

    def _save(self):
        blob = json.dumps(self.manifest, indent=2, sort_keys=True) + "\n"
        _atomic_write(self.manifest_path, blob.encode())


def _timestamp():
    from datetime import datetime, timezone

    return datetime.now(timezone.utc).isoformat(timespec="seconds")
