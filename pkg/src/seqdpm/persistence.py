"""
Binary supermodel files.

Layout (little-endian)::

    header   "SDPM" | u32 format_version | u32 dim | u32 n_particles
    body     config | prior | rng states | registry | particles
    trailer  u32 CRC-32 of the body

Particles are written in full, one record each; identical records are
shared again on load, so a collapsed ensemble stays cheap in memory.
Writing to a path goes through a temporary file and an atomic rename.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .mathcore import ComponentStats, NiwPrior
from .particle import MODES, Particle
from .supermodel import FORMAT_VERSION, RESAMPLERS, DpmConfig, ExperimentRecord, Supermodel

MAGIC = b"SDPM"
_HEADER = struct.Struct("<4sIII")


class ModelFormatError(Exception):
    """The bytes are not a readable supermodel file."""


class VersionError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def floats(self, a):
        self.buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def text(self, s: str):
        b = s.encode("utf-8")
        self.pack("I", len(b))
        self.buf.write(b)

    def u128(self, v: int):
        self.buf.write(int(v).to_bytes(16, "little"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends early (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        vals = st.unpack(self.take(st.size))
        return vals[0] if len(vals) == 1 else vals

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float)

    def text(self) -> str:
        return self.take(self.unpack("I")).decode("utf-8")

    def u128(self) -> int:
        return int.from_bytes(self.take(16), "little")


def _tri(p):
    return np.triu_indices(p)


def _sym_from_upper(vals: np.ndarray, p: int) -> np.ndarray:
    m = np.zeros((p, p))
    iu = _tri(p)
    m[iu] = vals
    m[(iu[1], iu[0])] = vals
    return m


def _write_rng(w: _Writer, rng: np.random.Generator):
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generator state can be persisted")
    w.u128(st["state"]["state"])
    w.u128(st["state"]["inc"])
    w.pack("II", st["has_uint32"], st["uinteger"])


def _read_rng(r: _Reader) -> np.random.Generator:
    state, inc = r.u128(), r.u128()
    has, uint = r.unpack("II")
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64", "state": {"state": state, "inc": inc},
                "has_uint32": has, "uinteger": uint}
    return np.random.Generator(bg)


def to_bytes(model: Supermodel) -> bytes:
    p = model.dim
    iu = _tri(p)
    cfg = model.config
    w = _Writer()
    w.pack("dBBQI", cfg.alpha, MODES.index(cfg.mode), RESAMPLERS.index(cfg.resampler),
           int(cfg.seed), cfg.recompute_period)
    w.pack("dd", model.prior.kappa, model.prior.nu)
    w.floats(model.prior.lam)
    w.floats(model.prior.omega[iu])
    _write_rng(w, model.resample_rng)
    _write_rng(w, model.allocation_rng)

    w.pack("I", len(model.registry))
    index = {}
    for i, rec in enumerate(model.registry):
        index[rec.id] = i
        w.text(rec.id)
        w.pack("B", rec.label is not None)
        w.text(rec.label or "")
        w.pack("Q", rec.n_samples)

    for part in model.particles:
        w.pack("QI", part.total, len(part.components))
        for c in part.components:
            w.pack("Q", c.count)
            w.floats(c.mean)
            w.floats(c.scatter[iu])
        xi = sorted(part.xi.items(), key=lambda kv: index[kv[0]])
        w.pack("I", len(xi))
        for eid, vec in xi:
            w.pack("II", index[eid], vec.size)
            w.buf.write(np.ascontiguousarray(vec, dtype="<u8").tobytes())

    body = w.buf.getvalue()
    header = _HEADER.pack(MAGIC, model.format_version, p, model.n_particles)
    return header + body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> Supermodel:
    if len(data) < _HEADER.size:
        raise TruncatedError("file shorter than the header")
    magic, version, p, n_particles = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise VersionError(f"not a supermodel file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if len(data) < _HEADER.size + 4:
        raise TruncatedError("file has no checksum")
    body = data[_HEADER.size:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch; the file is corrupt or truncated")

    r = _Reader(body)
    tri = p * (p + 1) // 2
    alpha, mode, resampler, seed, period = r.unpack("dBBQI")
    kappa, nu = r.unpack("dd")
    lam = r.floats(p)
    omega = _sym_from_upper(r.floats(tri), p)
    prior = NiwPrior(lam, kappa, omega, nu)
    cfg = DpmConfig(n_particles=n_particles, alpha=alpha, prior=prior, mode=MODES[mode],
                    resampler=RESAMPLERS[resampler], seed=seed, recompute_period=period)
    model = Supermodel(p, cfg)
    model.resample_rng = _read_rng(r)
    model.allocation_rng = _read_rng(r)

    n_exp = r.unpack("I")
    for _ in range(n_exp):
        eid = r.text()
        has_label = r.unpack("B")
        label = r.text()
        model.registry.append(ExperimentRecord(eid, label if has_label else None, r.unpack("Q")))
    ids = [rec.id for rec in model.registry]

    seen_parts: dict[bytes, Particle] = {}
    seen_comps: dict[bytes, ComponentStats] = {}
    particles = []
    for _ in range(n_particles):
        start = r.pos
        total, n_comp = r.unpack("QI")
        comps = []
        for _ in range(n_comp):
            cstart = r.pos
            count = r.unpack("Q")
            mean = r.floats(p)
            scatter = _sym_from_upper(r.floats(tri), p)
            key = body[cstart:r.pos]
            comp = seen_comps.get(key)
            if comp is None:
                comp = seen_comps[key] = ComponentStats(int(count), mean, scatter)
            comps.append(comp)
        xi = {}
        for _ in range(r.unpack("I")):
            i, size = r.unpack("II")
            if i >= len(ids):
                raise ModelFormatError(f"assignment table refers to unknown experiment #{i}")
            xi[ids[i]] = np.frombuffer(r.take(8 * size), dtype="<u8").astype(np.int64)
        key = body[start:r.pos]
        part = seen_parts.get(key)
        if part is None:
            part = seen_parts[key] = Particle(comps, total, xi)
        particles.append(part)
    if r.pos != len(body):
        raise ModelFormatError(f"{len(body) - r.pos} unexpected trailing bytes")
    model.particles = particles
    return model


def save(model: Supermodel, sink) -> None:
    """Write ``model`` to a path (atomically) or a binary file object."""
    data = to_bytes(model)
    if hasattr(sink, "write"):
        sink.write(data)
        return
    path = Path(sink)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(source) -> Supermodel:
    if hasattr(source, "read"):
        return from_bytes(source.read())
    return from_bytes(Path(source).read_bytes())
