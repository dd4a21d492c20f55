"""
On-disk formats: checkpoint container, batch dumps, run JSONL, CSV and manifests
"""
import os
import csv
import json
import struct
import hashlib
import logging
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from helpers.errors import CheckpointIOError, ConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FOMEMO01"
_U32 = struct.Struct("<I")


def derive_seed(master_seed: int, *parts: Any) -> int:
    """
    Derive a u64 seed as a pure function of a master seed and a key

    Args:
        master_seed: Seed given by the user
        parts: Anything that identifies the derived stream (problem, algo, replicate, ...)

    Returns:
        A 64-bit unsigned integer seed
    """
    key = json.dumps([int(master_seed), *[str(p) for p in parts]], separators=(",", ":"))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def config_hash(payload: Any) -> str:
    """Stable short hash of a JSON-serializable payload"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def file_hash(path: str) -> str:
    """Short content hash of a file, used as checkpoint id"""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_checkpoint(path: str, header: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> None:
    """
    Write a checkpoint container

    Layout: magic "FOMEMO01", u32 header length, UTF-8 JSON header, then the raw
    little-endian f32 data of every tensor in manifest order.

    Args:
        path: Destination file
        header: JSON-serializable metadata (config, support, ...); the tensor manifest is added here
        tensors: Named arrays, written as f32

    Raises:
        CheckpointIOError: If the file cannot be written
    """
    manifest = []
    offset = 0
    blobs = []
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes

    full_header = dict(header)
    full_header["tensors"] = manifest
    header_bytes = json.dumps(full_header).encode("utf-8")

    tmp_path = f"{path}.tmp"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp_path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(_U32.pack(len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp_path, path)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise CheckpointIOError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Wrote checkpoint {path} ({len(manifest)} tensors, {offset} bytes)")


def read_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Read a checkpoint container

    Args:
        path: Checkpoint file

    Returns:
        (header without the tensor manifest, tensors by name as f32 arrays)

    Raises:
        CheckpointIOError: On a missing file, bad magic or truncated data
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointIOError(f"Cannot read checkpoint {path}: {e}") from e

    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointIOError(f"{path} is not a fomemo checkpoint (bad magic)")
    (header_len,) = _U32.unpack_from(blob, 8)
    start = 12 + header_len
    try:
        header = json.loads(blob[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointIOError(f"Corrupt checkpoint header in {path}: {e}") from e

    tensors = {}
    for entry in header.pop("tensors", []):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        begin = start + entry["offset"]
        end = begin + 4 * count
        if end > len(blob):
            raise CheckpointIOError(f"Checkpoint {path} is truncated at tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(blob[begin:end], dtype="<f4").reshape(entry["shape"]).copy()
    return header, tensors


def write_batch_records(path: str, records: Iterable[Dict[str, np.ndarray]]) -> int:
    """
    Append length-prefixed batch records to a dump file

    Each record is u32 total length, u32 header length, a JSON header with the
    array names and shapes, then the arrays as little-endian f32.

    Returns:
        Number of records written
    """
    count = 0
    with open(path, "ab") as fh:
        for record in records:
            arrays = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in record.items()}
            header = json.dumps({"arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]}).encode("utf-8")
            body = b"".join(v.tobytes() for v in arrays.values())
            payload = _U32.pack(len(header)) + header + body
            fh.write(_U32.pack(len(payload)))
            fh.write(payload)
            count += 1
    return count


def read_batch_records(path: str) -> Iterator[Dict[str, np.ndarray]]:
    """Iterate over the records of a batch dump file"""
    with open(path, "rb") as fh:
        while True:
            prefix = fh.read(4)
            if not prefix:
                return
            (length,) = _U32.unpack(prefix)
            payload = fh.read(length)
            (header_len,) = _U32.unpack_from(payload, 0)
            header = json.loads(payload[4:4 + header_len].decode("utf-8"))
            offset = 4 + header_len
            record = {}
            for entry in header["arrays"]:
                count = int(np.prod(entry["shape"])) if entry["shape"] else 1
                record[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(entry["shape"]).copy()
                offset += 4 * count
            yield record


def append_jsonl(path: str, rows: Iterable[str]) -> None:
    """Append pre-serialized JSON lines and flush so partial runs survive a crash"""
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row)
            fh.write("\n")
        fh.flush()


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    """
    Read a JSONL file

    Raises:
        ConfigError: Naming file:line of the first malformed line
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{lineno}: malformed JSON line ({e.msg})") from e
    return rows


def write_csv(path: str, header: List[str], rows: Iterable[Iterable[Any]], append: bool = False) -> None:
    """Write (or append) CSV rows, emitting the header only for a new file"""
    new_file = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_manifest(directory: str, manifest: Any) -> str:
    """Write manifest.json (a pydantic RunManifest) into the output directory"""
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(manifest.model_dump_json(indent=2))
    return path


def read_manifest(directory: str) -> Optional[Dict[str, Any]]:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
