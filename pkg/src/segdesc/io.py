"""Dataset, manifest and config file formats.

Dataset files hold one segment per line::

    SDS1 <run_id> <frame_index> <segment_id> <group_id> <ox> <oy> <oz> <n_points> <payload>

Observer coordinates are written with ``repr`` (exact round trip); the payload
is base64 of ``n_points`` little-endian float64 xyz triples.
"""

from __future__ import annotations

import base64
import binascii
import json
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError
from .geometry import Segment, SegmentGroup

FORMAT_VERSION = "SDS1"
MANIFEST_VERSION = 1


def format_segment(seg: Segment) -> str:
    if not seg.run_id or any(c.isspace() for c in seg.run_id):
        raise ValueError(f"run_id {seg.run_id!r} must be nonempty without whitespace")
    payload = base64.b64encode(np.ascontiguousarray(seg.points, dtype="<f8").tobytes()).decode("ascii")
    ox, oy, oz = (repr(float(v)) for v in seg.observer_position)
    return (
        f"{FORMAT_VERSION} {seg.run_id} {seg.frame_index} {seg.segment_id} {seg.group_id} "
        f"{ox} {oy} {oz} {seg.n_points} {payload}"
    )


def write_dataset(path, segments: list[Segment]) -> None:
    seen = set()
    with open(path, "w", newline="\n") as fh:
        for seg in segments:
            if seg.segment_id in seen:
                raise DataFormatError(f"duplicate segment_id {seg.segment_id}")
            seen.add(seg.segment_id)
            fh.write(format_segment(seg) + "\n")


def read_dataset(path) -> list[Segment]:
    data = Path(path).read_bytes()
    segments, seen = [], set()
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        start, offset = offset, offset + len(raw) + 1
        if not raw.strip():
            continue
        try:
            fields = raw.decode("ascii").split(" ")
        except UnicodeDecodeError:
            raise DataFormatError("non-ASCII bytes in record", line=lineno, offset=start) from None
        if fields[0] != FORMAT_VERSION:
            raise DataFormatError(f"unsupported format version {fields[0]!r}", line=lineno, offset=start)
        if len(fields) != 10:
            raise DataFormatError(f"expected 10 fields, found {len(fields)}", line=lineno, offset=start)
        try:
            frame, sid, gid, n = int(fields[2]), int(fields[3]), int(fields[4]), int(fields[8])
            obs = [float(v) for v in fields[5:8]]
            blob = base64.b64decode(fields[9], validate=True)
        except (ValueError, binascii.Error) as exc:
            raise DataFormatError(f"malformed record: {exc}", line=lineno, offset=start) from None
        if len(blob) != 24 * n:
            raise DataFormatError(
                f"payload holds {len(blob)} bytes, expected {24 * n} for {n} points (truncated?)",
                line=lineno, offset=start,
            )
        if sid in seen:
            raise DataFormatError(f"duplicate segment_id {sid}", line=lineno, offset=start)
        seen.add(sid)
        pts = np.frombuffer(blob, dtype="<f8").reshape(n, 3).astype(np.float64)
        try:
            segments.append(Segment(sid, pts, obs, frame, fields[1], gid))
        except ValueError as exc:
            raise DataFormatError(str(exc), line=lineno, offset=start) from None
    return segments


def groups_from_segments(segments: list[Segment]) -> list[SegmentGroup]:
    members: dict[int, list[int]] = {}
    for s in segments:
        members.setdefault(s.group_id, []).append(s.segment_id)
    return [SegmentGroup(g, ids) for g, ids in sorted(members.items())]


# --------------------------------------------------------------------------
# manifest


def build_manifest(split_of_group: dict[int, str], segment_groups: dict[int, int],
                   segment_splits: dict[int, str] | None = None, **extra) -> dict:
    """Manifest with a group-atomic split. ``segment_groups`` maps every
    segment id to its group; each group must have exactly one split, and when
    ``segment_splits`` is given every segment must sit in its group's split."""
    for sid, gid in segment_groups.items():
        if gid not in split_of_group:
            raise DataFormatError(f"group {gid} of segment {sid} has no split")
        if segment_splits is not None and segment_splits[sid] != split_of_group[gid]:
            raise DataFormatError(
                f"group {gid} spans splits {split_of_group[gid]!r} and {segment_splits[sid]!r} (segment {sid})"
            )
    return {
        "format_version": MANIFEST_VERSION,
        "splits": {str(g): s for g, s in sorted(split_of_group.items())},
        **extra,
    }


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataFormatError(f"unsupported manifest version {manifest.get('format_version')!r}")
    return manifest


# --------------------------------------------------------------------------
# key=value config


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path) -> dict:
    """Parse ``section.key = value`` lines (``#`` starts a comment) into
    ``{section: {key: value}}``. Comma-separated values become tuples."""
    out: dict[str, dict] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError("expected key=value", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.rpartition(".")
        if not section or not name:
            raise DataFormatError(f"key {key!r} must look like section.name", line=lineno)
        out.setdefault(section, {})[name] = parse_value(value)
    return out
