import filecmp
import os
import subprocess
import sys

import numpy as np
import pytest

from oracles import jacobi_svd

CLI = [sys.executable, "-m", "xsvd.cli"]


def run_cli(*argv, **kw):
    return subprocess.run(CLI + list(argv), capture_output=True, text=True, **kw)


def write_mtx(path, arr):
    rows, cols = arr.shape
    entries = [(i, j, arr[i, j]) for i in range(rows) for j in range(cols)
               if arr[i, j] != 0.0]
    with open(path, "w") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        f.write(f"{rows} {cols} {len(entries)}\n")
        for i, j, v in entries:
            f.write(f"{i + 1} {j + 1} {v:.17g}\n")


def write_pgm(path, arr):
    rows, cols = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode())
        f.write(arr.astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        assert f.readline().strip() == b"P5"
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        cols, rows = map(int, line.split())
        assert f.readline().strip() == b"255"
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(rows, cols)


def s_values(outdir):
    with open(os.path.join(outdir, "S.txt")) as f:
        return np.array([float(line) for line in f])


@pytest.fixture(scope="module")
def rank10_mtx(tmp_path_factory):
    rng = np.random.default_rng(42)
    b = rng.standard_normal((60, 10))
    c = rng.standard_normal((10, 45))
    a = b @ c
    path = str(tmp_path_factory.mktemp("mtx") / "rank10.mtx")
    write_mtx(path, a)
    return path, a


def test_rsvd_singular_values_match_oracle(rank10_mtx, tmp_path):
    path, a = rank10_mtx
    out = str(tmp_path / "out")
    r = run_cli("rsvd", "--rank", "10", "--power", "auto", "--seed", "7",
                "--memory-per-matrix", "1M", path, out)
    assert r.returncode == 0, r.stderr
    s = s_values(out)
    ref = jacobi_svd(a.tolist())[:10]
    assert s.shape == (10,)
    assert np.max(np.abs(s - ref)) / ref[0] <= 1e-6
    for name in ("U.blk", "S.blk", "V.blk", "S.txt"):
        assert os.path.exists(os.path.join(out, name))


def test_rsvd_output_reconstructs_input(rank10_mtx, tmp_path):
    path, a = rank10_mtx
    out = str(tmp_path / "out")
    r = run_cli("rsvd", "--rank", "10", "--power", "0", "--seed", "3", path, out)
    assert r.returncode == 0, r.stderr
    from xsvd import BlockPool, read_block_file
    pool = BlockPool()
    u = read_block_file(os.path.join(out, "U.blk"), pool).to_array()
    s = s_values(out)
    v = read_block_file(os.path.join(out, "V.blk"), pool).to_array()
    approx = u @ np.diag(s) @ v.T
    assert np.max(np.abs(approx - a)) / np.max(np.abs(a)) <= 1e-8


def test_byte_identical_across_reruns_and_threads(rank10_mtx, tmp_path):
    path, _ = rank10_mtx
    dirs = []
    for tag, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        out = str(tmp_path / tag)
        r = run_cli("rsvd", "--rank", "8", "--power", "1", "--seed", "5",
                    "--threads", threads, path, out)
        assert r.returncode == 0, r.stderr
        dirs.append(out)
    for name in ("U.blk", "S.blk", "V.blk", "S.txt"):
        assert filecmp.cmp(os.path.join(dirs[0], name),
                           os.path.join(dirs[1], name), shallow=False)
        assert filecmp.cmp(os.path.join(dirs[0], name),
                           os.path.join(dirs[2], name), shallow=False)


def test_byte_identical_across_budgets_and_suffix_forms(rank10_mtx, tmp_path):
    path, _ = rank10_mtx
    outs = []
    for tag, flags in (
        ("none", []),
        ("suffixed", ["--memory-per-matrix", "1M"]),
        ("spelled", ["--memory-per-matrix", "1048576"]),
        ("tight", ["--memory-per-matrix", "4K"]),
    ):
        out = str(tmp_path / tag)
        r = run_cli("rsvd", "--rank", "6", "--power", "1", "--seed", "9",
                    *flags, path, out)
        assert r.returncode == 0, r.stderr
        outs.append(out)
    for other in outs[1:]:
        for name in ("U.blk", "S.blk", "V.blk", "S.txt"):
            assert filecmp.cmp(os.path.join(outs[0], name),
                               os.path.join(other, name), shallow=False)


def test_profile_stage_names_and_wall_coverage(rank10_mtx, tmp_path):
    path, _ = rank10_mtx
    out = str(tmp_path / "out")
    prof = str(tmp_path / "profile.tsv")
    r = run_cli("rsvd", "--rank", "5", "--power", "2", "--seed", "1",
                "--profile-out", prof, path, out)
    assert r.returncode == 0, r.stderr
    entries = {}
    with open(prof) as f:
        for line in f:
            key, value = line.rstrip("\n").split("\t")
            entries[key] = value
    stages = ["Text Parsing", "Preparation of O", "O*A^T", "Orthogonalization",
              "A^T*Q_r", "SVD0 Preparation", "SVD0", "Postprocessing"]
    for stage in stages:
        assert stage in entries
    wall = float(entries["total-wall-seconds"])
    covered = sum(float(entries[stage]) for stage in stages)
    assert covered <= wall * 1.0 + 1e-9
    assert covered >= wall * 0.95
    assert int(entries["peak-resident-bytes"]) > 0


def test_exact_svd_command(tmp_path):
    rng = np.random.default_rng(2)
    a = rng.standard_normal((25, 12))
    path = str(tmp_path / "in.mtx")
    write_mtx(path, a)
    out = str(tmp_path / "out")
    r = run_cli("svd", path, out)
    assert r.returncode == 0, r.stderr
    s = s_values(out)
    ref = jacobi_svd(a.tolist())
    assert np.max(np.abs(s - ref)) / ref[0] <= 1e-10


def test_auto_power_improves_decaying_spectrum(tmp_path):
    rng = np.random.default_rng(3)
    u, _ = np.linalg.qr(rng.standard_normal((96, 96)))
    v, _ = np.linalg.qr(rng.standard_normal((72, 72)))
    s = np.array([(i + 1) ** -0.5 for i in range(72)])
    a = (u[:, :72] * s) @ v.T
    path = str(tmp_path / "in.mtx")
    write_mtx(path, a)

    errs = {}
    from xsvd import BlockPool, read_block_file
    for tag, power in (("auto", "auto"), ("zero", "0")):
        out = str(tmp_path / tag)
        r = run_cli("rsvd", "--rank", "10", "--power", power, "--seed", "0", path, out)
        assert r.returncode == 0, r.stderr
        pool = BlockPool()
        uu = read_block_file(os.path.join(out, "U.blk"), pool, matrix_id=f"u{tag}").to_array()
        vv = read_block_file(os.path.join(out, "V.blk"), pool, matrix_id=f"v{tag}").to_array()
        ss = s_values(out)
        errs[tag] = np.linalg.norm(a - uu @ np.diag(ss) @ vv.T)
    assert errs["auto"] < errs["zero"]


def test_compress_image_full_rank_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, size=(32, 32)).astype(np.uint8)
    src = str(tmp_path / "in.pgm")
    write_pgm(src, img)
    dst = str(tmp_path / "out.pgm")
    r = run_cli("compress-image", "--rank", "32", "--power", "0", "--seed", "0", src, dst)
    assert r.returncode == 0, r.stderr
    back = read_pgm(dst)
    assert back.shape == img.shape
    assert np.max(np.abs(back.astype(int) - img.astype(int))) <= 1


def test_compress_image_half_precision_stays_close(tmp_path):
    rng = np.random.default_rng(5)
    base = np.linspace(0, 255, 48)
    img = np.clip(np.add.outer(base, base) / 2 + rng.normal(0, 4, (48, 48)), 0, 255).astype(np.uint8)
    src = str(tmp_path / "in.pgm")
    write_pgm(src, img)
    outs = {}
    for precision in ("double", "half"):
        dst = str(tmp_path / f"{precision}.pgm")
        r = run_cli("compress-image", "--rank", "6", "--power", "0", "--seed", "0",
                    "--precision", precision, src, dst)
        assert r.returncode == 0, r.stderr
        outs[precision] = read_pgm(dst).astype(np.float64)
    mad = np.mean(np.abs(outs["double"] - outs["half"]))
    assert mad <= 2.0


def test_resume_finishes_after_kill(tmp_path):
    rng = np.random.default_rng(6)
    b = rng.standard_normal((40, 8))
    c = rng.standard_normal((8, 30))
    path = str(tmp_path / "in.mtx")
    write_mtx(path, b @ c)
    out_full = str(tmp_path / "full")
    r = run_cli("rsvd", "--rank", "8", "--power", "2", "--seed", "11", path, out_full)
    assert r.returncode == 0, r.stderr

    out_cut = str(tmp_path / "cut")
    env = dict(os.environ, XSVD_ABORT_AFTER_STEPS="4")
    r = run_cli("rsvd", "--rank", "8", "--power", "2", "--seed", "11", path, out_cut, env=env)
    assert r.returncode == 70
    r = run_cli("resume", os.path.join(out_cut, "xsvd-work"))
    assert r.returncode == 0, r.stderr
    for name in ("U.blk", "S.blk", "V.blk", "S.txt"):
        assert filecmp.cmp(os.path.join(out_full, name),
                           os.path.join(out_cut, name), shallow=False)


def test_resume_exit_codes(tmp_path):
    empty = str(tmp_path / "nothing")
    os.makedirs(empty)
    r = run_cli("resume", empty)
    assert r.returncode == 6

    # a tampered configuration must be refused
    rng = np.random.default_rng(7)
    path = str(tmp_path / "in.mtx")
    write_mtx(path, rng.standard_normal((12, 10)))
    out = str(tmp_path / "out")
    env = dict(os.environ, XSVD_ABORT_AFTER_STEPS="3")
    r = run_cli("rsvd", "--rank", "4", "--power", "1", "--seed", "0", path, out, env=env)
    assert r.returncode == 70
    import json
    cfg_path = os.path.join(out, "xsvd-work", "plan", "config.json")
    with open(cfg_path) as f:
        saved = json.load(f)
    saved["config"]["rank"] = 5
    with open(cfg_path, "w") as f:
        json.dump(saved, f)
    r = run_cli("resume", os.path.join(out, "xsvd-work"))
    assert r.returncode == 7


def test_info_reports_shape_and_density(tmp_path):
    path = str(tmp_path / "tiny.mtx")
    with open(path, "w") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 3.5\n")
    r = run_cli("info", path)
    assert r.returncode == 0, r.stderr
    fields = dict(line.split("\t") for line in r.stdout.strip().splitlines())
    assert fields["rows"] == "2"
    assert fields["cols"] == "2"
    assert fields["nnz"] == "1"
    assert fields["density"] == "0.25"
    assert fields["symmetric"] == "no"


def test_usage_errors_exit_two_before_reading_input(tmp_path):
    missing = str(tmp_path / "does-not-exist.mtx")
    r = run_cli("rsvd", "--rank", "0", missing, str(tmp_path / "o"))
    assert r.returncode == 2
    r = run_cli("rsvd", "--rank", "3", "--power", "9", missing, str(tmp_path / "o"))
    assert r.returncode == 2
    r = run_cli("rsvd", "--rank", "3", "--memory-per-matrix", "0", missing, str(tmp_path / "o"))
    assert r.returncode == 2
    r = run_cli("rsvd", "--rank", "3", "--threads", "0", missing, str(tmp_path / "o"))
    assert r.returncode == 2


def test_parse_error_exits_three_with_line(tmp_path):
    path = str(tmp_path / "bad.mtx")
    with open(path, "w") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n9 9 2.0\n")
    r = run_cli("rsvd", "--rank", "1", path, str(tmp_path / "o"))
    assert r.returncode == 3
    assert "line 4" in r.stderr


def test_missing_input_exits_five(tmp_path):
    r = run_cli("rsvd", "--rank", "1", str(tmp_path / "ghost.mtx"), str(tmp_path / "o"))
    assert r.returncode == 5
