"""``TKNv1`` binary checkpoint container.

Layout: the 5-byte magic ``TKNv1`` followed by one or more sections. Each
section is a 4-byte ASCII tag, a little-endian u32 header length, a UTF-8
``key=value`` header, then the section's arrays as little-endian float64 in
the order the header's ``arrays`` entry declares.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TKNv1"


class CheckpointError(ValueError):
    pass


@dataclass
class Section:
    tag: str
    meta: dict[str, str] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.tag.encode("ascii")) != 4:
            raise CheckpointError(f"section tag must be 4 ASCII bytes, got {self.tag!r}")


def _encode_header(section: Section) -> bytes:
    lines = []
    for k, v in section.meta.items():
        v = str(v)
        if "\n" in k or "=" in k or "\n" in v:
            raise CheckpointError(f"header entry {k!r} is not a single key=value line")
        lines.append(f"{k}={v}")
    decl = ";".join(f"{name}:{'x'.join(map(str, a.shape)) or 'scalar'}"
                    for name, a in section.arrays.items())
    lines.append(f"arrays={decl}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_shapes(decl: str) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for item in filter(None, decl.split(";")):
        name, _, shape = item.rpartition(":")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        out.append((name, dims))
    return out


def write(path: str | Path, sections: list[Section]) -> None:
    buf = bytearray(MAGIC)
    for s in sections:
        header = _encode_header(s)
        buf += s.tag.encode("ascii") + struct.pack("<I", len(header)) + header
        for a in s.arrays.values():
            buf += np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def read(path: str | Path) -> list[Section]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a TKNv1 checkpoint")
    pos, out = len(MAGIC), []
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise CheckpointError(f"{path}: truncated section header")
        tag = raw[pos:pos + 4].decode("ascii")
        (n,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        pos += 8
        meta = {}
        for line in raw[pos:pos + n].decode("utf-8").splitlines():
            k, _, v = line.partition("=")
            meta[k] = v
        pos += n
        arrays = {}
        for name, shape in _parse_shapes(meta.pop("arrays", "")):
            count = int(np.prod(shape, dtype=np.int64))
            end = pos + 8 * count
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated array {name}")
            arrays[name] = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
            pos = end
        out.append(Section(tag, meta, arrays))
    return out


def find(sections: list[Section], tag: str) -> Section:
    for s in sections:
        if s.tag == tag:
            return s
    raise CheckpointError(f"no {tag} section in checkpoint")
