"""Durable block storage, step records, and the native block file format.

Block file layout (little-endian, fixed 64-byte header):

    offset  size  field
    0       4     magic "XSVD"
    4       4     format version (u32, currently 1)
    8       8     matrix key (u64, blake2b-8 of the matrix id string)
    16      32    row0, row1, col0, col1 (u64 each)
    48      1     density (0 dense, 1 sparse)
    49      1     precision code (0 half, 1 single, 2 double)
    50      1     index width code (0 -> 32-bit, 1 -> 64-bit)
    51      1     pad (zero)
    52      4     payload length (u32)
    56      8     payload checksum (u64, blake2b-8)

Dense payload: row-major scalars. Sparse payload: row indices, then column
indices, then values, each contiguous. A failed checksum or a structurally
impossible header reports the block as corrupt; a missing file reports it as
absent. Neither ever returns wrong data.

Write ordering is payload -> fsync -> record, so a step record marked done
always points at durable bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import Density, DenseBlock, IndexWidth, MatrixDescriptor, Precision, SparseBlock
from .errors import BlockAbsentError, BlockCorruptError, FormatError

MAGIC = b"XSVD"
VERSION = 1
_HEADER = struct.Struct("<4sIQ4Q3BxIQ")
assert _HEADER.size == 64

_PREC_CODE = {Precision.HALF: 0, Precision.SINGLE: 1, Precision.DOUBLE: 2}
_PREC_FROM = {v: k for k, v in _PREC_CODE.items()}
_IW_CODE = {IndexWidth.I32: 0, IndexWidth.I64: 1}
_IW_FROM = {v: k for k, v in _IW_CODE.items()}


def checksum64(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def matrix_key(matrix_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(matrix_id.encode(), digest_size=8).digest(), "little")


def _precision_of(block) -> Precision:
    return {2: Precision.HALF, 4: Precision.SINGLE, 8: Precision.DOUBLE}[block.values.dtype.itemsize]


def encode_block(matrix_id: str, block) -> bytes:
    """Serialize a DenseBlock or SparseBlock to header + payload bytes."""
    prec = _precision_of(block)
    if isinstance(block, DenseBlock):
        density, iw = 0, 0
        payload = np.ascontiguousarray(block.values, dtype=prec.storage_dtype).tobytes()
    else:
        density = 1
        iw_enum = IndexWidth.I32 if block.rows.dtype.itemsize == 4 else IndexWidth.I64
        iw = _IW_CODE[iw_enum]
        payload = (
            np.ascontiguousarray(block.rows, dtype=iw_enum.dtype).tobytes()
            + np.ascontiguousarray(block.cols, dtype=iw_enum.dtype).tobytes()
            + np.ascontiguousarray(block.values, dtype=prec.storage_dtype).tobytes()
        )
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        matrix_key(matrix_id),
        block.row0,
        block.row1,
        block.col0,
        block.col1,
        density,
        _PREC_CODE[prec],
        iw,
        len(payload),
        checksum64(payload),
    )
    return header + payload


def decode_block(raw: bytes):
    """Parse header + payload bytes back into a block. Raises BlockCorruptError."""
    if len(raw) < _HEADER.size:
        raise BlockCorruptError("block file shorter than its header")
    try:
        magic, version, _key, r0, r1, c0, c1, density, prec_code, iw_code, plen, csum = _HEADER.unpack(
            raw[: _HEADER.size]
        )
    except struct.error as e:  # pragma: no cover - length checked above
        raise BlockCorruptError(str(e))
    if magic != MAGIC:
        raise BlockCorruptError("bad magic")
    if version != VERSION:
        raise BlockCorruptError(f"unsupported block format version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != plen:
        raise BlockCorruptError(f"payload length {len(payload)} != declared {plen}")
    if checksum64(payload) != csum:
        raise BlockCorruptError("payload checksum mismatch")
    if prec_code not in _PREC_FROM or density not in (0, 1) or iw_code not in _IW_FROM:
        raise BlockCorruptError("unknown precision/density/index-width code")
    prec = _PREC_FROM[prec_code]
    try:
        if density == 0:
            shape = (r1 - r0, c1 - c0)
            values = np.frombuffer(payload, dtype=prec.storage_dtype).reshape(shape).copy()
            return DenseBlock(r0, r1, c0, c1, values)
        iw = _IW_FROM[iw_code]
        entry = 2 * iw.nbytes + prec.nbytes
        if plen % entry:
            raise BlockCorruptError("sparse payload not a whole number of entries")
        n = plen // entry
        rows = np.frombuffer(payload, dtype=iw.dtype, count=n).copy()
        cols = np.frombuffer(payload, dtype=iw.dtype, count=n, offset=n * iw.nbytes).copy()
        values = np.frombuffer(payload, dtype=prec.storage_dtype, count=n, offset=2 * n * iw.nbytes).copy()
        return SparseBlock(r0, r1, c0, c1, rows, cols, values)
    except BlockCorruptError:
        raise
    except (ValueError, FormatError) as e:
        # reshape failure, range/sortedness violation: structurally corrupt
        raise BlockCorruptError(str(e))


@dataclass
class StepRecord:
    """Durable record of one plan step."""

    plan_id: str
    step_id: int
    op: str
    inputs: list[str]
    outputs: list[str]
    status: str = "pending"  # "pending" | "done"
    rng_seed: int | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "step_id": self.step_id,
            "op": self.op,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "status": self.status,
            "rng_seed": self.rng_seed,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "StepRecord":
        return cls(
            plan_id=d["plan_id"],
            step_id=d["step_id"],
            op=d["op"],
            inputs=list(d["inputs"]),
            outputs=list(d["outputs"]),
            status=d["status"],
            rng_seed=d.get("rng_seed"),
            meta=d.get("meta", {}),
        )


class BlockStore:
    """File-backed block and record storage under one workdir.

    `fault_hook(barrier, path)` fires at write barriers so tests can simulate
    a crash between any two syscalls; production leaves it None.
    """

    def __init__(self, workdir: str):
        self.workdir = workdir
        self.block_dir = os.path.join(workdir, "blocks")
        self.matrix_dir = os.path.join(workdir, "matrices")
        self.plan_dir = os.path.join(workdir, "plan")
        for d in (self.block_dir, self.matrix_dir, self.plan_dir):
            os.makedirs(d, exist_ok=True)
        self.fault_hook = None

    # -- blocks ------------------------------------------------------------

    def block_path(self, matrix_id: str, ti: int, tj: int) -> str:
        return os.path.join(self.block_dir, f"{matrix_id}__{ti}_{tj}.blk")

    def _barrier(self, name: str, path: str):
        if self.fault_hook is not None:
            self.fault_hook(name, path)

    def _write_file(self, path: str, data: bytes):
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(data)
            self._barrier("payload-written", path)
            f.flush()
            os.fsync(f.fileno())
        self._barrier("payload-synced", path)
        os.replace(tmp, path)
        self._barrier("payload-visible", path)

    def store_block(self, matrix_id: str, ti: int, tj: int, block):
        self._write_file(self.block_path(matrix_id, ti, tj), encode_block(matrix_id, block))

    def load_block(self, matrix_id: str, ti: int, tj: int):
        path = self.block_path(matrix_id, ti, tj)
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except FileNotFoundError:
            raise BlockAbsentError(f"block {matrix_id}[{ti},{tj}] not in store") from None
        return decode_block(raw)

    def has_block(self, matrix_id: str, ti: int, tj: int) -> bool:
        return os.path.exists(self.block_path(matrix_id, ti, tj))

    def verify_block(self, matrix_id: str, ti: int, tj: int) -> bool:
        """True only if the block is present and passes all checks."""
        try:
            self.load_block(matrix_id, ti, tj)
            return True
        except (BlockAbsentError, BlockCorruptError):
            return False

    def delete_matrix_blocks(self, matrix_id: str):
        prefix = f"{matrix_id}__"
        for name in os.listdir(self.block_dir):
            if name.startswith(prefix):
                os.unlink(os.path.join(self.block_dir, name))

    # -- descriptors -------------------------------------------------------

    def save_descriptor(self, desc: MatrixDescriptor):
        path = os.path.join(self.matrix_dir, f"{desc.matrix_id}.json")
        self._write_file(path, json.dumps(desc.to_json(), indent=1).encode())

    def load_descriptor(self, matrix_id: str) -> MatrixDescriptor:
        path = os.path.join(self.matrix_dir, f"{matrix_id}.json")
        try:
            with open(path) as f:
                return MatrixDescriptor.from_json(json.load(f))
        except FileNotFoundError:
            raise BlockAbsentError(f"no descriptor for matrix {matrix_id}") from None
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise BlockCorruptError(f"descriptor for {matrix_id} unreadable: {e}")

    def has_descriptor(self, matrix_id: str) -> bool:
        return os.path.exists(os.path.join(self.matrix_dir, f"{matrix_id}.json"))

    # -- step records ------------------------------------------------------

    def _step_path(self, step_id: int) -> str:
        return os.path.join(self.plan_dir, f"step_{step_id:05d}.json")

    def write_step(self, record: StepRecord):
        """Persist a record. Callers mark done only after outputs are durable."""
        path = self._step_path(record.step_id)
        data = json.dumps(record.to_json(), indent=1).encode()
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(data)
            self._barrier("record-written", path)
            f.flush()
            os.fsync(f.fileno())
        self._barrier("record-synced", path)
        os.replace(tmp, path)
        self._barrier("record-visible", path)

    def scan_plan(self) -> dict[int, StepRecord]:
        """All step records in step-id order, downgraded to pending where unsafe.

        A record that is unreadable, or marked done while any output matrix
        lacks a verifiable descriptor or block, comes back as pending. Scanning
        never fails on a damaged record.
        """
        records: dict[int, StepRecord] = {}
        try:
            names = sorted(n for n in os.listdir(self.plan_dir) if n.startswith("step_") and n.endswith(".json"))
        except FileNotFoundError:
            return records
        for name in names:
            path = os.path.join(self.plan_dir, name)
            try:
                with open(path) as f:
                    rec = StepRecord.from_json(json.load(f))
            except (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError):
                try:
                    step_id = int(name[len("step_"):-len(".json")])
                except ValueError:
                    continue
                records[step_id] = StepRecord("?", step_id, "?", [], [], status="pending")
                continue
            if rec.status == "done" and not self._outputs_intact(rec):
                rec.status = "pending"
            records[rec.step_id] = rec
        return records

    def _outputs_intact(self, rec: StepRecord) -> bool:
        for matrix_id in rec.outputs:
            try:
                desc = self.load_descriptor(matrix_id)
            except (BlockAbsentError, BlockCorruptError):
                return False
            for ti, tj in desc.partition.tiles():
                if not self.verify_block(matrix_id, ti, tj):
                    return False
        return True

    # -- plan config -------------------------------------------------------

    def save_plan_config(self, config: dict):
        self._write_file(os.path.join(self.plan_dir, "config.json"), json.dumps(config, indent=1).encode())

    def load_plan_config(self) -> dict | None:
        try:
            with open(os.path.join(self.plan_dir, "config.json")) as f:
                return json.load(f)
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            return None

    def clear_plan(self):
        for d in (self.plan_dir, self.block_dir, self.matrix_dir):
            for name in os.listdir(d):
                os.unlink(os.path.join(d, name))


def store_sparse_soa(dirpath: str, desc: MatrixDescriptor, rows: np.ndarray, cols: np.ndarray, values: np.ndarray):
    """Whole-matrix sparse spill: separate row/col/value files plus descriptor.

    Keeping indices and values in their own files means each is a flat typed
    array that can be appended and mapped independently.
    """
    if not (len(rows) == len(cols) == len(values)):
        raise FormatError("SoA arrays differ in length")
    os.makedirs(dirpath, exist_ok=True)
    iw = desc.index_width
    np.ascontiguousarray(rows, dtype=iw.dtype).tofile(os.path.join(dirpath, "rows.idx"))
    np.ascontiguousarray(cols, dtype=iw.dtype).tofile(os.path.join(dirpath, "cols.idx"))
    np.ascontiguousarray(values, dtype=desc.precision.storage_dtype).tofile(
        os.path.join(dirpath, "values.val")
    )
    with open(os.path.join(dirpath, "descriptor.json"), "w") as f:
        json.dump(desc.to_json(), f, indent=1)


def load_sparse_soa(dirpath: str):
    """Load a SoA spill directory; validates the three counts agree."""
    try:
        with open(os.path.join(dirpath, "descriptor.json")) as f:
            desc = MatrixDescriptor.from_json(json.load(f))
    except FileNotFoundError:
        raise BlockAbsentError(f"no SoA matrix at {dirpath}") from None
    iw = desc.index_width
    rows = np.fromfile(os.path.join(dirpath, "rows.idx"), dtype=iw.dtype)
    cols = np.fromfile(os.path.join(dirpath, "cols.idx"), dtype=iw.dtype)
    values = np.fromfile(os.path.join(dirpath, "values.val"), dtype=desc.precision.storage_dtype)
    if not (len(rows) == len(cols) == len(values)):
        raise BlockCorruptError("SoA index/value files disagree on entry count")
    return desc, rows, cols, values
