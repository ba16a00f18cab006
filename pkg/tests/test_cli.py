"""End-to-end CLI tests on tiny configurations."""

import json

import numpy as np
import pytest

from sdfenc.cli import main
from test_geometry import CUBE_OBJ, sphere_mesh
from sdfenc.reconstruct import export_mesh


TINY_CONFIG = {
    "encoder": {"resolutions": [4, 8], "features": 8, "knn": 3, "pe_frequencies": 1},
    "decoder": {"width": 8, "depth": 2},
    "train": {"iterations": 5, "seed": 1, "batch_size": 1},
    "sampling": {"surface": 24, "uniform": 24, "near": 24},
}


@pytest.fixture
def cube_obj(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    return p


@pytest.fixture
def sphere_xyz(tmp_path):
    r = np.random.default_rng(0)
    d = r.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    pts = 0.5 * d
    lines = [f"{p[0]} {p[1]} {p[2]} {n[0]} {n[1]} {n[2]}" for p, n in zip(pts, d)]
    p = tmp_path / "sphere.xyz"
    p.write_text("\n".join(lines) + "\n")
    return p


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY_CONFIG))
    return p


@pytest.fixture
def trained_ckpt(tmp_path, sphere_xyz, config_file):
    prep = tmp_path / "sphere.zlse"
    assert main(["prepare", "--input", str(sphere_xyz), "--output", str(prep),
                 "--surface-samples", "100", "--seed", "0"]) == 0
    ckpt = tmp_path / "model.zlse"
    assert main(["train", "--config", str(config_file), "--data", str(prep),
                 "--out", str(ckpt)]) == 0
    return ckpt, prep


class TestPrepare:
    def test_cube_obj(self, tmp_path, cube_obj):
        out = tmp_path / "cube.zlse"
        code = main(["prepare", "--input", str(cube_obj), "--output", str(out),
                     "--surface-samples", "64", "--seed", "3", "--normalize"])
        assert code == 0 and out.exists()

    def test_same_seed_byte_identical(self, tmp_path, cube_obj, capsys):
        a, b = tmp_path / "a.zlse", tmp_path / "b.zlse"
        for out in (a, b):
            assert main(["prepare", "--input", str(cube_obj), "--output", str(out),
                         "--surface-samples", "64", "--seed", "3", "--normalize"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_cloud_without_normals_prepares_fine(self, tmp_path):
        src = tmp_path / "pts.xyz"
        src.write_text("0.1 0.2 0.3\n-0.1 0.0 0.2\n0.3 -0.2 0.1\n")
        out = tmp_path / "pts.zlse"
        assert main(["prepare", "--input", str(src), "--output", str(out)]) == 0

    def test_parse_error_exit_2(self, tmp_path):
        src = tmp_path / "broken.xyz"
        src.write_text("not numbers here\n")
        assert main(["prepare", "--input", str(src), "--output",
                     str(tmp_path / "o.zlse")]) == 2

    def test_geometry_error_exit_3(self, tmp_path):
        src = tmp_path / "degenerate.xyz"
        src.write_text("1 1 1\n1 1 1\n")
        assert main(["prepare", "--input", str(src), "--output",
                     str(tmp_path / "o.zlse"), "--normalize"]) == 3

    def test_usage_error_exit_1(self):
        assert main(["prepare", "--input"]) == 1
        assert main(["no-such-command"]) == 1


class TestTrainCmd:
    def test_train_writes_checkpoint_and_log(self, trained_ckpt):
        ckpt, _ = trained_ckpt
        assert ckpt.exists()
        log = ckpt.parent / (ckpt.name + ".loss.csv")
        lines = log.read_text().splitlines()
        assert lines[0] == "iter,eikonal,surface,normal,offsurface,total"
        assert len(lines) == 6

    def test_train_deterministic(self, tmp_path, sphere_xyz, config_file):
        prep = tmp_path / "s.zlse"
        main(["prepare", "--input", str(sphere_xyz), "--output", str(prep)])
        outs = []
        for name in ("m1.zlse", "m2.zlse"):
            out = tmp_path / name
            assert main(["train", "--config", str(config_file), "--data", str(prep),
                         "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_bad_config_exit_2(self, tmp_path, sphere_xyz):
        prep = tmp_path / "s.zlse"
        main(["prepare", "--input", str(sphere_xyz), "--output", str(prep)])
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"encoder": {"bogus_key": 1}}))
        assert main(["train", "--config", str(bad), "--data", str(prep),
                     "--out", str(tmp_path / "m.zlse")]) == 2

    def test_nonfinite_loss_exit_4_with_failure_checkpoint(self, tmp_path, sphere_xyz):
        prep = tmp_path / "s.zlse"
        main(["prepare", "--input", str(sphere_xyz), "--output", str(prep)])
        cfg = dict(TINY_CONFIG)
        cfg["loss"] = {"mode": "unsigned", "alpha": 500.0}
        cfg["train"] = {"iterations": 20, "seed": 1, "batch_size": 1,
                        "lr": 10.0, "clip_norm": 0.0}
        bad = tmp_path / "explode.json"
        bad.write_text(json.dumps(cfg))
        out = tmp_path / "m.zlse"
        with np.errstate(over="ignore"):
            code = main(["train", "--config", str(bad), "--data", str(prep),
                         "--out", str(out)])
        assert code == 4
        assert (tmp_path / "m.zlse.failed").exists()
        assert not out.exists()

    def test_resume(self, tmp_path, sphere_xyz, config_file):
        prep = tmp_path / "s.zlse"
        main(["prepare", "--input", str(sphere_xyz), "--output", str(prep)])
        half = tmp_path / "half.zlse"
        cfg_half = dict(TINY_CONFIG)
        cfg_half["train"] = dict(TINY_CONFIG["train"], iterations=2)
        half_cfg_file = tmp_path / "half.json"
        half_cfg_file.write_text(json.dumps(cfg_half))
        assert main(["train", "--config", str(half_cfg_file), "--data", str(prep),
                     "--out", str(half)]) == 0
        full = tmp_path / "full.zlse"
        assert main(["train", "--config", str(config_file), "--data", str(prep),
                     "--out", str(full), "--resume", str(half)]) == 0
        direct = tmp_path / "direct.zlse"
        assert main(["train", "--config", str(config_file), "--data", str(prep),
                     "--out", str(direct)]) == 0
        assert full.read_bytes() == direct.read_bytes()


class TestReconstructCmd:
    def test_reconstruct_writes_mesh(self, tmp_path, trained_ckpt):
        ckpt, prep = trained_ckpt
        out = tmp_path / "mesh.obj"
        code = main(["reconstruct", "--ckpt", str(ckpt), "--input", str(prep),
                     "--resolution", "16", "--output", str(out)])
        assert code == 0 and out.exists()

    def test_empty_mesh_warns_exit_0(self, tmp_path, trained_ckpt, capsys):
        ckpt, prep = trained_ckpt
        out = tmp_path / "mesh.obj"
        code = main(["reconstruct", "--ckpt", str(ckpt), "--input", str(prep),
                     "--resolution", "8", "--iso", "1000.0", "--output", str(out)])
        assert code == 0
        assert "empty" in capsys.readouterr().err


class TestSdfCmd:
    def test_values_match_reconstruct_lattice(self, tmp_path, trained_ckpt):
        ckpt, prep = trained_ckpt
        # lattice positions for R=4 over the domain
        from sdfenc.geometry import Box
        from sdfenc.reconstruct import lattice_points
        pts = lattice_points(4, Box.unit())
        qfile = tmp_path / "queries.xyz"
        qfile.write_text("\n".join(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in pts) + "\n")
        out = tmp_path / "values.txt"
        assert main(["sdf", "--ckpt", str(ckpt), "--input", str(prep),
                     "--queries", str(qfile), "--output", str(out)]) == 0
        got = np.array([float(v) for v in out.read_text().split()])

        from sdfenc.trainer import load_checkpoint, load_prepared_shape
        from sdfenc.reconstruct import evaluate_dense
        model = load_checkpoint(ckpt).build_model()
        field = evaluate_dense(model, load_prepared_shape(prep).cloud, 4)
        expect = np.array([f"{v:.9g}" for v in field.values.ravel()], dtype=float)
        np.testing.assert_array_equal(got, expect)

    def test_duplicate_and_permuted_queries(self, tmp_path, trained_ckpt):
        ckpt, prep = trained_ckpt
        qfile = tmp_path / "q.xyz"
        qfile.write_text("0.1 0.2 0.3\n0.1 0.2 0.3\n-0.4 0 0.2\n")
        out = tmp_path / "v.txt"
        main(["sdf", "--ckpt", str(ckpt), "--input", str(prep),
              "--queries", str(qfile), "--output", str(out)])
        vals = out.read_text().split()
        assert vals[0] == vals[1]

        qfile.write_text("-0.4 0 0.2\n0.1 0.2 0.3\n")
        main(["sdf", "--ckpt", str(ckpt), "--input", str(prep),
              "--queries", str(qfile), "--output", str(out)])
        flipped = out.read_text().split()
        assert flipped == [vals[2], vals[0]]


class TestEvalCmd:
    def test_identical_meshes(self, tmp_path, capsys):
        mesh = sphere_mesh(subdivisions=2)
        p = tmp_path / "m.obj"
        export_mesh(mesh, p)
        code = main(["eval", "--pred", str(p), "--gt", str(p),
                     "--samples", "2000", "--seed", "0"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["chamfer_mean"] < 0.05
        assert report["nc_mean"] > 0.95


class TestInfoCmd:
    def test_default_config_counts(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "encoder": {"resolutions": [4, 8, 16, 32], "features": 16},
        }))
        assert main(["info", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        lines = dict(line.split() for line in out.splitlines())
        assert 20_000 <= int(lines["total"]) <= 60_000
        assert 1_000 <= int(lines["decoder"]) <= 2_500
        assert int(lines["total"]) == int(lines["decoder"]) + int(lines["encoder"])

    def test_ckpt_counts_match(self, trained_ckpt, capsys):
        ckpt, _ = trained_ckpt
        assert main(["info", "--ckpt", str(ckpt)]) == 0
        lines = dict(line.split() for line in capsys.readouterr().out.splitlines())
        from sdfenc.trainer import load_checkpoint
        model = load_checkpoint(ckpt).build_model()
        assert int(lines["total"]) == model.store.total_count
