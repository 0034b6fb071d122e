"""Matrix Market and PGM input/output.

The Matrix Market reader is a strict, single-pass, chunked parser. Every
rejection names the offending physical line. Bodies larger than the parse
buffer are sorted and spilled as structure-of-arrays runs, then the matrix
tiles are assembled by rectangle queries against the memory-mapped runs, so
parsing never needs the whole triplet list in memory at once.
"""

from __future__ import annotations

import io
import itertools
import json
import os
import shutil
import struct
import tempfile
from dataclasses import replace

import numpy as np
import pandas as pd

from .core import (
    Density,
    IndexWidth,
    MatrixDescriptor,
    Precision,
    SparseBlock,
    coo_combine,
)
from .errors import FormatError, ParseError
from .pool import BlockPool, StoredMatrix, create_matrix, matrix_from_coo, matrix_from_dense
from .store import decode_block, encode_block

_MM_BANNER = "%%MatrixMarket"
# generous default: criterion-scale files never spill, tests force it down
DEFAULT_SPILL_BYTES = 256 << 20
DEFAULT_CHUNK_LINES = 500_000


def _first_bad_field_count(lines, start_line, want):
    for k, raw in enumerate(lines):
        n = len(raw.split())
        if n != want:
            return start_line + k, f"expected {want} fields, found {n}"
    return None


def _token(lines, pos, col):
    parts = lines[pos].split()
    return parts[col] if col < len(parts) else "<missing>"


class _RunWriter:
    """Accumulates triplets; past the byte threshold, sorts and spills a run."""

    def __init__(self, rows, cols, spill_bytes, spill_root):
        self.shape = (rows, cols)
        self.spill_bytes = spill_bytes
        self.spill_root = spill_root
        self.buf_r, self.buf_c, self.buf_v = [], [], []
        self.buf_bytes = 0
        self.run_dirs: list[str] = []
        self._tmp_owned = None

    def append(self, r, c, v):
        if len(r) == 0:
            return
        self.buf_r.append(r)
        self.buf_c.append(c)
        self.buf_v.append(v)
        self.buf_bytes += r.nbytes + c.nbytes + v.nbytes
        if self.buf_bytes > self.spill_bytes:
            self._spill()

    def _gather(self):
        if not self.buf_v:
            e = np.empty(0, dtype=np.int64)
            return e, e.copy(), np.empty(0, dtype=np.float64)
        r = np.concatenate(self.buf_r)
        c = np.concatenate(self.buf_c)
        v = np.concatenate(self.buf_v)
        self.buf_r, self.buf_c, self.buf_v = [], [], []
        self.buf_bytes = 0
        return coo_combine(r, c, v)

    def _spill(self):
        from .store import store_sparse_soa

        r, c, v = self._gather()
        if self.spill_root is None:
            self._tmp_owned = tempfile.mkdtemp(prefix="xsvd-parse-")
            self.spill_root = self._tmp_owned
        desc = MatrixDescriptor(
            matrix_id=f"run{len(self.run_dirs)}",
            rows=self.shape[0],
            cols=self.shape[1],
            density=Density.SPARSE,
            precision=Precision.DOUBLE,
            index_width=IndexWidth.I64,
            nnz=len(v),
        )
        d = os.path.join(self.spill_root, f"parse-run-{len(self.run_dirs):04d}")
        store_sparse_soa(d, desc, r, c, v)
        self.run_dirs.append(d)

    def finish(self):
        """Returns either ("memory", r, c, v) or ("runs", run_dirs, total_nnz)."""
        if not self.run_dirs:
            return ("memory", *self._gather())
        if self.buf_v:
            self._spill()
        total = 0
        for d in self.run_dirs:
            total += os.path.getsize(os.path.join(d, "values.val")) // 8
        return "runs", self.run_dirs, total

    def cleanup(self):
        for d in self.run_dirs:
            shutil.rmtree(d, ignore_errors=True)
        if self._tmp_owned is not None:
            shutil.rmtree(self._tmp_owned, ignore_errors=True)


def _run_query(run_dir, r0, r1, c0, c1):
    """Entries of one spilled run inside a rectangle, without loading the run."""
    rows = np.memmap(os.path.join(run_dir, "rows.idx"), dtype="<i8", mode="r")
    cols = np.memmap(os.path.join(run_dir, "cols.idx"), dtype="<i8", mode="r")
    vals = np.memmap(os.path.join(run_dir, "values.val"), dtype="<f8", mode="r")
    lo = int(np.searchsorted(rows, r0, side="left"))
    hi = int(np.searchsorted(rows, r1, side="left"))
    if lo == hi:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), np.empty(0, dtype=np.float64)
    r = np.asarray(rows[lo:hi])
    c = np.asarray(cols[lo:hi])
    v = np.asarray(vals[lo:hi])
    mask = (c >= c0) & (c < c1)
    return r[mask], c[mask], v[mask]


def _parse_header(line: str) -> tuple[str, bool]:
    """Returns (field, symmetric) or raises with line 1 context."""
    parts = line.split()
    if not parts or parts[0] != _MM_BANNER:
        raise ParseError("not a Matrix Market file (missing %%MatrixMarket banner)", 1)
    if len(parts) != 5:
        raise ParseError(f"banner has {len(parts)} tokens, expected 5", 1)
    _, obj, fmt, field, symmetry = (p.lower() for p in parts)
    if obj != "matrix":
        raise ParseError(f"unsupported object {obj!r}", 1)
    if fmt != "coordinate":
        raise ParseError(f"unsupported format {fmt!r}, only coordinate is handled", 1)
    if field not in ("real", "integer", "pattern"):
        raise ParseError(f"unsupported field {field!r}", 1)
    if symmetry not in ("general", "symmetric"):
        raise ParseError(f"unsupported symmetry {symmetry!r}", 1)
    return field, symmetry == "symmetric"


def _parse_size_line(f, lineno: int) -> tuple[int, int, int, int]:
    for raw in f:
        lineno += 1
        if raw.startswith("%"):
            continue
        if not raw.strip():
            raise ParseError("blank line before the size line", lineno)
        parts = raw.split()
        if len(parts) != 3:
            raise ParseError(f"size line has {len(parts)} fields, expected 3", lineno)
        try:
            rows, cols, nnz = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"size line is not three integers: {raw.strip()!r}", lineno) from None
        if rows < 1 or cols < 1:
            raise ParseError(f"matrix dimensions {rows}x{cols} are not positive", lineno)
        if nnz < 0:
            raise ParseError(f"negative entry count {nnz}", lineno)
        return rows, cols, nnz, lineno
    raise ParseError("file ends before the size line", lineno)


def _coerce_float(series) -> np.ndarray:
    """Column to float64, bad tokens to NaN, good tokens correctly rounded."""
    if series.dtype != object:
        return series.to_numpy(np.float64)
    out = np.empty(len(series), dtype=np.float64)
    for idx, tok in enumerate(series.to_numpy()):
        try:
            out[idx] = float(tok)
        except (TypeError, ValueError):
            out[idx] = np.nan
    return out


def _parse_chunk(lines, start_line, field, symmetric, rows, cols):
    """One chunk of body lines -> validated 0-based (r, c, v) float64 triplets."""
    want = 2 if field == "pattern" else 3
    # the round_trip converter is the only pandas float path that is
    # correctly rounded; the default xstrtod is off by 1 ulp on long inputs
    df = pd.read_csv(
        io.StringIO("".join(lines)),
        sep=r"\s+",
        header=None,
        engine="c",
        float_precision="round_trip",
        skip_blank_lines=False,
        comment=None,
        na_filter=False,
    )
    if df.shape[1] != want:
        found = _first_bad_field_count(lines, start_line, want)
        if found is None:
            raise ParseError(f"body lines do not have {want} fields", start_line)
        raise ParseError(found[1], found[0])
    df.columns = ["i", "j"] if want == 2 else ["i", "j", "v"]

    ii = _coerce_float(df["i"])
    jj = _coerce_float(df["j"])
    if want == 3:
        vv = _coerce_float(df["v"])
    else:
        vv = np.ones(len(ii), dtype=np.float64)

    for col, name, arr in ((0, "row index", ii), (1, "column index", jj)):
        bad = np.isnan(arr) | (arr != np.floor(arr))
        if bad.any():
            found = _first_bad_field_count(lines, start_line, want)
            if found is not None:
                raise ParseError(found[1], found[0])
            p = int(np.flatnonzero(bad)[0])
            raise ParseError(f"malformed {name} {_token(lines, p, col)!r}", start_line + p)
    if want == 3:
        bad = np.isnan(vv)
        if bad.any():
            found = _first_bad_field_count(lines, start_line, want)
            if found is not None:
                raise ParseError(found[1], found[0])
            p = int(np.flatnonzero(bad)[0])
            raise ParseError(f"malformed value {_token(lines, p, 2)!r}", start_line + p)

    r = ii.astype(np.int64) - 1
    c = jj.astype(np.int64) - 1
    for name, arr, n in (("row index", r, rows), ("column index", c, cols)):
        bad = (arr < 0) | (arr >= n)
        if bad.any():
            p = int(np.flatnonzero(bad)[0])
            raise ParseError(
                f"{name} {arr[p] + 1} outside 1..{n}", start_line + p
            )

    if symmetric:
        above = r < c
        if above.any():
            p = int(np.flatnonzero(above)[0])
            raise ParseError("entry above the diagonal in a symmetric matrix", start_line + p)
    return r, c, vv


def parse_matrix_market(
    path: str,
    pool: BlockPool,
    matrix_id: str,
    *,
    precision: Precision = Precision.SINGLE,
    spill_bytes: int = DEFAULT_SPILL_BYTES,
    chunk_lines: int = DEFAULT_CHUNK_LINES,
) -> StoredMatrix:
    """Parse a Matrix Market coordinate file into a pooled sparse matrix."""
    with open(path, "rt", encoding="utf-8", errors="replace") as f:
        banner = f.readline()
        if not banner:
            raise ParseError("empty file", 1)
        field, symmetric = _parse_header(banner)
        rows, cols, declared, lineno = _parse_size_line(f, 1)

        spill_root = None
        if pool.store is not None:
            spill_root = os.path.join(pool.store.workdir, "parse")
        writer = _RunWriter(rows, cols, spill_bytes, spill_root)
        try:
            seen = 0
            while True:
                lines = list(itertools.islice(f, chunk_lines))
                if not lines:
                    break
                start_line = lineno + 1
                lineno += len(lines)
                if seen + len(lines) > declared:
                    raise ParseError(
                        f"more entries than the {declared} declared on the size line",
                        start_line + (declared - seen),
                    )
                r, c, v = _parse_chunk(lines, start_line, field, symmetric, rows, cols)
                if symmetric:
                    off = r > c
                    if off.any():
                        mr, mc, mv = c[off], r[off], v[off]
                        r = np.concatenate([r, mr])
                        c = np.concatenate([c, mc])
                        v = np.concatenate([v, mv])
                writer.append(r, c, v)
                seen += len(lines)
            if seen < declared:
                raise ParseError(
                    f"size line declared {declared} entries but the file ends after {seen}",
                    lineno,
                )

            result = writer.finish()
            if result[0] == "memory":
                _, r, c, v = result
                return matrix_from_coo(
                    pool, matrix_id, rows, cols, r, c, v, precision=precision
                )
            _, run_dirs, total_bound = result
            return _matrix_from_runs(
                pool, matrix_id, rows, cols, run_dirs, total_bound, precision
            )
        finally:
            writer.cleanup()


def _matrix_from_runs(pool, matrix_id, rows, cols, run_dirs, nnz_bound, precision):
    """Assemble tiles by rectangle queries over sorted, memory-mapped runs."""
    mat = create_matrix(
        pool,
        matrix_id,
        rows,
        cols,
        precision=precision,
        density=Density.SPARSE,
        nnz=nnz_bound,
    )
    part = mat.desc.partition
    idt = mat.desc.index_width.dtype
    vdt = precision.storage_dtype
    exact = 0
    for ti in range(part.n_row_tiles):
        r0, r1 = part.row_span(ti)
        for tj in range(part.n_col_tiles):
            c0, c1 = part.col_span(tj)
            parts_r, parts_c, parts_v = [], [], []
            for d in run_dirs:
                qr, qc, qv = _run_query(d, r0, r1, c0, c1)
                if len(qv):
                    parts_r.append(qr)
                    parts_c.append(qc)
                    parts_v.append(qv)
            if parts_v:
                # run order preserves file order, so duplicate sums fold the
                # same way they would have in one flat pass
                tr, tc, tv = coo_combine(
                    np.concatenate(parts_r),
                    np.concatenate(parts_c),
                    np.concatenate(parts_v),
                )
            else:
                tr = np.empty(0, dtype=np.int64)
                tc = np.empty(0, dtype=np.int64)
                tv = np.empty(0, dtype=np.float64)
            exact += len(tv)
            mat.set_tile(
                ti,
                tj,
                SparseBlock(
                    r0, r1, c0, c1,
                    tr.astype(idt), tc.astype(idt),
                    np.ascontiguousarray(tv, dtype=vdt),
                ),
            )
    if exact != mat.desc.nnz:
        from dataclasses import replace

        mat.desc = replace(mat.desc, nnz=exact)
        pool.update_descriptor(mat.desc)
    return mat


def read_matrix_market_info(path: str) -> dict:
    """Header and size line only; never touches the body."""
    with open(path, "rt", encoding="utf-8", errors="replace") as f:
        banner = f.readline()
        if not banner:
            raise ParseError("empty file", 1)
        field, symmetric = _parse_header(banner)
        rows, cols, declared, _ = _parse_size_line(f, 1)
    return {
        "rows": rows,
        "cols": cols,
        "entries": declared,
        "field": field,
        "symmetric": symmetric,
    }


def write_matrix_market(path: str, mat: StoredMatrix):
    """Write a sparse matrix as a general real coordinate file."""
    rows, cols = mat.shape
    r, c, v = mat.read_cell_sparse(0, rows, 0, cols)
    with open(path, "wt", encoding="utf-8") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        f.write(f"{rows} {cols} {len(v)}\n")
        for i, j, x in zip(r, c, v):
            f.write(f"{i + 1} {j + 1} {float(x):.17g}\n")


# -- PGM ------------------------------------------------------------------


def read_pgm(path: str) -> np.ndarray:
    """Binary PGM (P5, 8-bit) to a uint8 array."""
    data = open(path, "rb").read()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PGM header ends prematurely")
        tokens.append(data[start:pos])
    pos += 1  # exactly one whitespace byte after maxval
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM file (magic {tokens[0]!r})")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError("PGM dimensions are not integers") from None
    if width < 1 or height < 1:
        raise FormatError(f"PGM dimensions {width}x{height} are not positive")
    if maxval != 255:
        raise FormatError(f"PGM maxval {maxval} unsupported (need 255)")
    payload = data[pos : pos + width * height]
    if len(payload) != width * height:
        raise FormatError(
            f"PGM payload has {len(payload)} bytes, expected {width * height}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: str, image: np.ndarray):
    """Clamp, round, and write an array as 8-bit binary PGM."""
    if image.ndim != 2:
        raise FormatError(f"PGM image must be 2-d, got shape {image.shape}")
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        f.write(pixels.tobytes())


def matrix_from_pgm(
    path: str, pool: BlockPool, matrix_id: str, *, precision: Precision = Precision.SINGLE
) -> StoredMatrix:
    image = read_pgm(path)
    return matrix_from_dense(pool, matrix_id, image, precision=precision)


# -- single-file block export ----------------------------------------------

_BLK_MAGIC = b"XSVDBLK1\n"


def write_block_file(path: str, mat: StoredMatrix):
    """Export a matrix as one file: descriptor line, then every encoded tile.

    Tiles appear in canonical grid order with a length prefix each, so the
    bytes are a pure function of the matrix content and its partition.
    """
    desc = mat.desc
    if desc.transposed:
        raise FormatError("block-file export works on canonical matrices only")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_BLK_MAGIC)
        f.write(json.dumps(desc.to_json(), sort_keys=True).encode() + b"\n")
        for ti, tj in desc.partition.tiles():
            enc = encode_block(desc.matrix_id, mat.tile(ti, tj))
            f.write(struct.pack("<Q", len(enc)))
            f.write(enc)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_block_file(
    path: str, pool: BlockPool, matrix_id: str | None = None
) -> StoredMatrix:
    """Load a block-file export into the pool, optionally under a fresh id."""
    with open(path, "rb") as f:
        if f.read(len(_BLK_MAGIC)) != _BLK_MAGIC:
            raise FormatError(f"{path} is not a block-file export")
        try:
            desc = MatrixDescriptor.from_json(json.loads(f.readline().decode()))
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(f"{path}: unreadable descriptor header: {e}")
        if matrix_id is not None:
            desc = replace(desc, matrix_id=matrix_id)
        desc = pool.register(desc)
        if pool.store is not None:
            pool.store.save_descriptor(desc)
        mat = StoredMatrix(desc, pool)
        for ti, tj in desc.partition.tiles():
            head = f.read(8)
            if len(head) != 8:
                raise FormatError(f"{path}: truncated before tile {ti},{tj}")
            (ln,) = struct.unpack("<Q", head)
            raw = f.read(ln)
            if len(raw) != ln:
                raise FormatError(f"{path}: truncated inside tile {ti},{tj}")
            mat.set_tile(ti, tj, decode_block(raw))
    return mat
