import math

import numpy as np
import pytest

from mfdenoise import cli
from mfdenoise.harness import (FRAME_SETS, DatasetMissing, ExperimentRecord, ExperimentSpec,
                               compare_to_reference, format_table, frame_seed, load_clean_image,
                               load_sequence, make_registered_dataset, ordering_violations,
                               records_from_tsv, records_to_tsv, reference_table, run_grid,
                               table_flow_params)
from mfdenoise.image import load_image, psnr, save_image
from mfdenoise.multiframe import run_pipeline


@pytest.fixture(scope="module")
def crop_png(tmp_path_factory, camera):
    p = tmp_path_factory.mktemp("img") / "crop.png"
    save_image(camera[200:248, 240:288], p)
    return p


def test_frame_seed_mix():
    assert frame_seed(0, 0) == 0
    assert frame_seed(5, 1) == 5 ^ 0x9E3779B97F4A7C15
    assert frame_seed(1, 3) == 1 ^ ((3 * 0x9E3779B97F4A7C15) % 2**64)
    assert len({frame_seed(7, i) for i in range(100)}) == 100


def test_registered_dataset_examples():
    clean = np.full((256, 256), 128.0)
    one = make_registered_dataset(clean, 20.0, 1, seed=3)
    assert len(one) == 1 and one.registered and one.sigma == 20.0
    st = make_registered_dataset(clean, 20.0, 4, seed=3)
    np.testing.assert_array_equal(st.frames[0], one.frames[0])
    for i in range(4):
        assert 0.99 <= np.std(st.frames[i] - clean) / 20.0 <= 1.01
        for j in range(i):
            assert not np.array_equal(st.frames[i], st.frames[j])
    # frames are independent: residual correlation within 4.5 standard errors of 0
    r = np.corrcoef((st.frames[0] - clean).ravel(), (st.frames[1] - clean).ravel())[0, 1]
    assert abs(r) < 4.5 / 256
    with pytest.raises(ValueError):
        make_registered_dataset(clean, 10.0, 0)


def test_missing_dataset_lists_paths(tmp_path):
    with pytest.raises(DatasetMissing) as exc:
        load_clean_image("house", tmp_path)
    assert any("house.png" in p for p in exc.value.expected)
    with pytest.raises(DatasetMissing) as exc:
        load_sequence("grove2", 8, 10.0, directory=tmp_path)
    assert any("frame07.png" in p for p in exc.value.expected)
    with pytest.raises(ValueError):
        load_sequence("grove2", 5, 10.0, directory=tmp_path)


def test_sequence_loading(tmp_path, camera):
    d = tmp_path / "grove2"
    d.mkdir()
    for n in FRAME_SETS[("grove2", 4)][0]:
        save_image(np.roll(camera[:40, :50], n, axis=1), d / f"frame{n:02d}.png")
    noisy, clean = load_sequence("grove2", 4, 15.0, seed=2, directory=tmp_path)
    assert not noisy.registered and noisy.ref_index == 1
    np.testing.assert_array_equal(clean, load_image(d / "frame10.png"))
    assert noisy.frames.shape == (4, 40, 50)


def test_reference_table_contents():
    t = reference_table()
    assert t[("house", 80, 5, "BM-AF")] == 30.96
    assert t[("house", 80, 5, "BM-FA")] == 29.41
    assert t[("house", 80, 5, "BM-SF")] == 28.30
    assert t[("house", 80, 5, "BM-MF")] == 30.16
    assert t[("bridge", 120, 10, "NL-AF")] == 24.64
    assert t[("grove2", 80, 8, "BM-AF")] == 24.97
    # full registered layout: 3 images x 7 sigmas x 2 L x 10 methods (CF included)
    reg = [k for k in t if k[0] in ("bridge", "peppers", "house")]
    assert len(reg) == 3 * 7 * 2 * 10


def test_table_flow_params():
    p = table_flow_params("grove2", 10)
    assert (p.alpha, p.gamma, p.variant) == (15.0, 1.5, "SOF2")
    assert p.lam == pytest.approx(25.5)
    assert table_flow_params("unknown", 10).alpha == 35.0


def test_one_cell_matches_pipeline(crop_png):
    spec = ExperimentSpec(str(crop_png), [30], [3], ["BM-AF"], seed=4)
    records, table = run_grid(spec)
    clean = load_image(crop_png)
    stack = make_registered_dataset(clean, 30.0, 3, seed=4)
    assert records[0].psnr == psnr(clean, run_pipeline(stack, "BM-AF"))
    assert "BM-AF" in table and "crop@30" in table


def test_grid_layout_and_determinism(crop_png):
    spec = ExperimentSpec(str(crop_png), [20, 40], [2, 3], ["NL-FA", "BM-AF"], seed=1)
    a, table = run_grid(spec)
    assert [(r.sigma, r.frames, r.method) for r in a] == [
        (s, L, m) for s in (20.0, 40.0) for L in (2, 3) for m in ("NL-FA", "BM-AF")]
    b, _ = run_grid(spec)
    assert [r.psnr for r in a] == [r.psnr for r in b]
    assert len(table.splitlines()) == 1 + 4
    assert all(r.spec_hash == spec.key() for r in a)


def test_spec_validation_and_key():
    with pytest.raises(ValueError):
        ExperimentSpec("house", [], [5], ["BM-AF"])
    with pytest.raises(ValueError):
        ExperimentSpec("house", [10], [5], ["BM-AF"], border=-1)
    a = ExperimentSpec("house", [10], [5], ["bm3d-af"])
    assert a.methods == ["BM-AF"] and a.effective_border == 0
    assert ExperimentSpec("grove2", [10], [4], ["BM-AF"]).effective_border == 50
    assert a.key() == ExperimentSpec("house", [10], [5], ["BM-AF"], workers=4, threads=2).key()
    assert a.key() != ExperimentSpec("house", [10], [5], ["BM-AF"], seed=1).key()


def _rec(ds, s, L, m, v):
    return ExperimentRecord(ds, s, L, m, v, 0.5, "h", "{}")


def test_tsv_round_trip():
    recs = [_rec("house", 80.0, 5, "BM-AF", 30.123456789), _rec("x", 10.0, 2, "NL-MF", math.inf)]
    back = records_from_tsv(records_to_tsv(recs))
    assert back[0].psnr == recs[0].psnr and back[1].psnr == math.inf
    assert [r.cell() for r in back] == [r.cell() for r in recs]


def test_compare_to_reference():
    ref = reference_table()
    exact = _rec("house", 80.0, 5, "BM-AF", ref[("house", 80, 5, "BM-AF")])
    rep = compare_to_reference([exact])
    assert rep.cells[0].delta == 0 and rep.passed
    off = _rec("house", 80.0, 5, "BM-FA", 29.41 + 2.0)
    rep = compare_to_reference([exact, off])
    assert not rep.passed
    assert rep.cells[1].delta == pytest.approx(2.0)
    # ours ranks FA above AF, the published row does the opposite
    assert rep.rows[0].pair_agreement == 0.0 and not rep.rows[0].same_ranking
    assert "FAIL" in rep.text()
    with pytest.raises(KeyError):
        compare_to_reference([_rec("nowhere", 10.0, 5, "BM-AF", 30.0)])
    custom = compare_to_reference([_rec("x", 10.0, 1, "BM-AF", 30.0)], {("x", 10, 1, "BM-AF"): 29.5})
    assert custom.cells[0].delta == pytest.approx(0.5)


def test_ordering_violations():
    recs = [_rec("h", 40.0, 5, "BM-AF", 30.0), _rec("h", 40.0, 5, "BM-FA", 31.0),
            _rec("h", 40.0, 5, "NL-MF", 29.0), _rec("h", 40.0, 5, "NL-SF", 28.0)]
    bad = ordering_violations(recs)
    assert len(bad) == 1 and bad[0][3:6] == ("BM3D", "AF", "FA")


def test_format_table_layout():
    recs = [_rec("house", 80.0, 5, "BM-AF", 30.96), _rec("house", 80.0, 5, "NL-AF", 31.0)]
    lines = format_table(recs).splitlines()
    assert lines[0].split() == ["Data", "L", "BM-AF", "NL-AF"]
    assert lines[1].split() == ["H80", "5", "30.96", "31.00"]


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_corrupt_and_denoise(tmp_path, crop_png, capsys):
    out = tmp_path / "frames"
    assert cli.main(["corrupt", "--input", str(crop_png), "--sigma", "20", "--frames", "3",
                     "--seed", "1", "--output", str(out)]) == 0
    frames = sorted(out.glob("frame*.png"))
    assert len(frames) == 3
    res = tmp_path / "den.png"
    assert cli.main(["denoise", *map(str, frames), "--method", "BM-AF", "--sigma", "20",
                     "--output", str(res), "--clean", str(crop_png)]) == 0
    text = capsys.readouterr().out
    value = float(next(ln for ln in text.splitlines() if ln.startswith("psnr")).split("\t")[1])
    assert value > psnr(load_image(crop_png), load_image(frames[0]))


def test_cli_config_and_precedence(tmp_path, crop_png, capsys):
    cfg = tmp_path / "run.conf"
    cfg.write_text(f"# grid\ndataset = {crop_png}\nsigmas = 30\nframes = 2\nmethods = BM-AF\n")
    tsv = tmp_path / "r.tsv"
    assert cli.main(["--config", str(cfg), "bench", "--frames", "3", "--output", str(tsv)]) == 0
    recs = records_from_tsv(tsv.read_text())
    assert [(r.sigma, r.frames, r.method) for r in recs] == [(30.0, 3, "BM-AF")]
    capsys.readouterr()


def test_cli_errors(tmp_path, capsys):
    rc = cli.main(["denoise", str(tmp_path / "nope.png"), "--method", "BM-AF", "--sigma", "5",
                   "--output", str(tmp_path / "o.png")])
    assert rc == 1
    err = capsys.readouterr().err.strip().split("\t")
    assert err[0] == "error" and len(err) == 3
    np.save(tmp_path / "s.npy", np.zeros((2, 16, 16)))
    assert cli.main(["denoise", str(tmp_path / "s.npy"), "--method", "NL-CF", "--sigma", "5",
                     "--output", str(tmp_path / "o.npy")]) == 1
    assert "UnsupportedMethodError" in capsys.readouterr().err
    (tmp_path / "bad.conf").write_text("no equals sign\n")
    assert cli.main(["--config", str(tmp_path / "bad.conf"), "compare", "--records", "x"]) == 1


def test_cli_compare_strict(tmp_path, capsys):
    tsv = tmp_path / "r.tsv"
    tsv.write_text(records_to_tsv([_rec("house", 80.0, 5, "BM-AF", 27.0)]))
    assert cli.main(["compare", "--records", str(tsv)]) == 0
    assert cli.main(["compare", "--records", str(tsv), "--strict"]) == 2
    assert "NO" in capsys.readouterr().out


def test_cli_flow_and_register(tmp_path, capsys):
    from conftest import textured

    big = textured(60, 60, 0)
    save_image(big[5:45, 5:45], tmp_path / "a.png")
    save_image(big[5:45, 3:43], tmp_path / "b.png")
    assert cli.main(["flow", "--f1", str(tmp_path / "a.png"), "--f2", str(tmp_path / "b.png"),
                     "--output", str(tmp_path / "f.flo"), "--png", str(tmp_path / "f.png")]) == 0
    assert cli.main(["register", str(tmp_path / "a.png"), str(tmp_path / "b.png"),
                     "--output", str(tmp_path / "reg.npy"), "--mask", str(tmp_path / "m.npy")]) == 0
    assert np.load(tmp_path / "reg.npy").shape == (2, 40, 40)
    assert np.load(tmp_path / "m.npy").dtype == bool
