"""Self-describing binary container for numeric artifacts.

Layout::

    TTRELIAB <format-version>
    kind <kind>
    meta <json object>
    array <name> <dim0>x<dim1>x... <offset> <count>
    ...
    sha256 <hex digest of payload>
    end
    <payload: little-endian float64 values of all arrays, concatenated>

The header is plain text so manifests can be read and diffed; the payload is
checked against the digest before any array is returned. Writes go to a
temporary file that is renamed into place.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_MAGIC = "TTRELIAB"


class ArtifactError(ValueError):
    pass


class ChecksumError(ArtifactError):
    pass


class VersionMismatchError(ArtifactError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def encode(kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    lines = [f"{_MAGIC} {FORMAT_VERSION}", f"kind {kind}",
             "meta " + json.dumps(meta or {}, sort_keys=True, separators=(",", ":"))]
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        a = np.array(arr, dtype="<f8", order="C")
        shape = "x".join(str(s) for s in a.shape) if a.ndim else "scalar"
        lines.append(f"array {name} {shape} {offset} {a.size}")
        chunks.append(a.tobytes())
        offset += a.size
    payload = b"".join(chunks)
    lines.append("sha256 " + hashlib.sha256(payload).hexdigest())
    lines.append("end")
    return ("\n".join(lines) + "\n").encode() + payload


def decode(data: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    head_end = data.find(b"\nend\n")
    if head_end < 0:
        raise ArtifactError("artifact header is incomplete")
    header = data[:head_end].decode().splitlines()
    payload = data[head_end + 5:]
    first = header[0].split()
    if len(first) != 2 or first[0] != _MAGIC:
        raise ArtifactError("not a ttreliab artifact")
    if int(first[1]) != FORMAT_VERSION:
        raise VersionMismatchError(
            f"artifact format version {first[1]} is not supported (expected {FORMAT_VERSION}); "
            "regenerate it with the current release")
    got_kind = header[1].split(maxsplit=1)[1]
    if kind is not None and got_kind != kind:
        raise ArtifactError(f"expected a {kind!r} artifact, found {got_kind!r}")
    meta = json.loads(header[2].split(maxsplit=1)[1])
    digest = header[-1].split()[1]
    if hashlib.sha256(payload).hexdigest() != digest:
        raise ChecksumError("artifact payload does not match its checksum")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for line in header[3:-1]:
        _, name, shape, offset, count = line.split()
        shp = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        off, cnt = int(offset), int(count)
        arrays[name] = flat[off:off + cnt].reshape(shp).astype(float)
    return arrays, meta


def save(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode(kind, arrays, meta))


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes(), kind)


# -- transport maps ----------------------------------------------------------


class DimensionMismatchError(ArtifactError):
    pass


def save_map(path, transport, meta: dict | None = None) -> None:
    """Persist a :class:`~ttreliab.dirt.DeepTransport` bit-exactly."""
    arrays = {}
    layers = []
    for k, q in enumerate(transport.layers):
        bases = []
        for j, b in enumerate(q.bases):
            arrays[f"L{k}.b{j}.nodes"] = b.nodes
            arrays[f"L{k}.b{j}.nodes_c"] = b.nodes_c
            bases.append({"kind": b.kind, "domain": None if b.domain is None else list(b.domain)})
        for j, c in enumerate(q._cores):
            arrays[f"L{k}.core{j}"] = c
        layers.append({"tau": q.tau, "scale": q.scale, "bases": bases})
    diags = [dataclasses.asdict(d) for d in transport.diagnostics]
    head = {"dim": transport.dim, "reference": transport.reference.kind, "layers": layers,
            "diagnostics": diags, "extra_model_evals": transport.extra_model_evals,
            "user": meta or {}}
    save(path, "deep-transport", arrays, head)


def load_map(path, dim: int | None = None):
    """Load a transport saved by :func:`save_map`; ``dim`` guards against a wrong run."""
    from .dirt import DeepTransport, LayerDiagnostics
    from .sirt import Basis1D, Reference, SquaredFTTDensity

    arrays, head = load(path, "deep-transport")
    if dim is not None and head["dim"] != dim:
        raise DimensionMismatchError(
            f"map has dimension {head['dim']} but the run expects {dim}")
    layers = []
    for k, lay in enumerate(head["layers"]):
        bases = []
        for j, b in enumerate(lay["bases"]):
            dom = None if b["domain"] is None else tuple(b["domain"])
            bases.append(Basis1D(arrays[f"L{k}.b{j}.nodes"], b["kind"], dom,
                                 arrays[f"L{k}.b{j}.nodes_c"]))
        cores = [arrays[f"L{k}.core{j}"] for j in range(len(bases))]
        layers.append(SquaredFTTDensity.from_normalized_cores(cores, bases, lay["tau"], lay["scale"]))
    diags = []
    for d in head["diagnostics"]:
        d = dict(d)
        d["ranks"] = tuple(d["ranks"])
        d["cross_errors"] = tuple(d.get("cross_errors", ()))
        diags.append(LayerDiagnostics(**d))
    return DeepTransport(head["dim"], tuple(layers), Reference(head["reference"]), tuple(diags),
                         head["extra_model_evals"])
