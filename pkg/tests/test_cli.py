import json

import numpy as np
import pytest

from fetoreg.cli import PipelineConfig, _frame_key, list_frames, main
from fetoreg.imagecore import ScalarImage, save_image
from fetoreg.warp import AffineTransform, corner_reprojection_error, read_transforms_csv


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture(scope="module")
def seqdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    assert main(["--seed", "3", "synth", "-o", str(out), "--n-frames", "8", "--canvas", "320",
                 "--frame", "96", "--occluder-rate", "0.5", "--noise-sigma", "0.01"]) == 0
    return out


def test_synth_outputs(seqdir):
    cfg = json.loads((seqdir / "config.json").read_text())
    assert cfg["seed"] == 3 and cfg["n_frames"] == 8
    assert len(list((seqdir / "frames").glob("*.pgm"))) == 8
    assert (seqdir / "mask.pgm").exists()


def test_register_matches_ground_truth(seqdir, tmp_path, capsys):
    code, out, _ = run(capsys, "register", str(seqdir / "probmaps"), "--mask",
                       str(seqdir / "mask.pgm"), "-o", str(tmp_path / "pw.csv"),
                       "--diagnostics", str(tmp_path / "d.json"))
    assert code == 0 and out["success"] and out["n_pairs"] == 7
    est = read_transforms_csv(tmp_path / "pw.csv")
    gt = read_transforms_csv(seqdir / "gt_transforms.csv")
    assert max(corner_reprojection_error(e, g, 96, 96) for e, g in zip(est, gt)) < 0.5
    diag = json.loads((tmp_path / "d.json").read_text())
    assert len(diag["pairs"]) == 7 and diag["pairs"][0]["fixed"] == "0000.pgm"


def test_register_flags_override_config(seqdir, tmp_path, capsys):
    (tmp_path / "c.toml").write_text("[registration]\npyramid_levels = 2\nrobust_threshold = 0.3\n")
    code, out, _ = run(capsys, "--config", str(tmp_path / "c.toml"), "register",
                       str(seqdir / "probmaps"), "-o", str(tmp_path / "pw.csv"),
                       "--robust-threshold", "0.05", "--no-bidirectional")
    assert code == 0
    assert out["options"]["pyramid_levels"] == 2
    assert out["options"]["robust_threshold"] == 0.05
    assert out["options"]["bidirectional"] is False


def test_register_failure_threshold(tmp_path, capsys):
    d = tmp_path / "flat"
    d.mkdir()
    rng = np.random.default_rng(0)
    for k in range(3):
        save_image(ScalarImage(rng.random((40, 40))), d / f"{k}.pgm")
    code, out, _ = run(capsys, "register", str(d), "-o", str(tmp_path / "pw.csv"),
                       "--min-valid-fraction", "0.99", "--max-failure-fraction", "0.2")
    assert code == 1 and out["n_failed"] == 2 and not out["success"]


def test_mosaic_from_transforms_and_inline(seqdir, tmp_path, capsys):
    code, out, _ = run(capsys, "mosaic", str(seqdir / "probmaps"), "--transforms",
                       str(seqdir / "gt_transforms.csv"), "--annotate", "--reference", "first",
                       "-o", str(tmp_path / "m.pgm"))
    assert code == 0 and out["reference_index"] == 0
    assert (tmp_path / "m_annotated.png").exists()
    code, out2, _ = run(capsys, "mosaic", str(seqdir / "probmaps"), "--register",
                        "-o", str(tmp_path / "m2.pgm"))
    assert code == 0 and out2["n_failed"] == 0 and out2["reference_index"] == 4


def test_mosaic_usage_errors(seqdir, tmp_path, capsys):
    code, _, err = run(capsys, "mosaic", str(seqdir / "probmaps"), "--register",
                       "--transforms", str(seqdir / "gt_transforms.csv"), "-o",
                       str(tmp_path / "m.pgm"))
    assert code == 2 and "mutually exclusive" in err
    code, _, _ = run(capsys, "mosaic", str(seqdir / "probmaps"), "-o", str(tmp_path / "m.pgm"))
    assert code == 2
    code, _, err = run(capsys, "mosaic", str(seqdir / "probmaps"), "--transforms",
                       str(tmp_path / "missing.csv"), "-o", str(tmp_path / "m.pgm"))
    assert code == 2 and "missing.csv" in err


def test_missing_input_directory(tmp_path, capsys):
    code, _, err = run(capsys, "register", str(tmp_path / "nowhere"), "-o", "x.csv")
    assert code == 2 and "nowhere" in err


def test_argparse_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["register"])
    assert info.value.code == 2


def test_drift_and_compare(seqdir, tmp_path, capsys):
    common = ["--frames", str(seqdir / "frames"), "--probmaps", str(seqdir / "probmaps"),
              "--window", "4"]
    code, out, _ = run(capsys, "--threads", "2", "drift", *common, "--transforms",
                       str(seqdir / "gt_transforms.csv"), "-o", str(tmp_path / "gt.csv"),
                       "--summary", str(tmp_path / "s.csv"))
    assert code == 0 and out["n_records"] == 6
    assert out["median_by_offset"]["3"]["iou"] > 0.95
    code, _, _ = run(capsys, "drift", *common, "--transforms", str(seqdir / "gt_transforms.csv"),
                     "-o", str(tmp_path / "gt2.csv"))
    code, out, _ = run(capsys, "compare", str(tmp_path / "gt.csv"), str(tmp_path / "gt2.csv"),
                       "-o", str(tmp_path / "cmp.csv"))
    assert code == 0 and all(r["delta_median"] in (0.0, None) for r in out["rows"])


def test_compare_window_mismatch(seqdir, tmp_path, capsys):
    base = ["--frames", str(seqdir / "frames"), "--probmaps", str(seqdir / "probmaps"),
            "--transforms", str(seqdir / "gt_transforms.csv")]
    run(capsys, "drift", *base, "--window", "2", "-o", str(tmp_path / "a.csv"))
    run(capsys, "drift", *base, "--window", "2", "-o", str(tmp_path / "b.csv"))
    # drop the last window of one run
    lines = (tmp_path / "b.csv").read_text().splitlines()
    (tmp_path / "b.csv").write_text("\n".join(lines[:-1]) + "\n")
    code, _, err = run(capsys, "compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                       "-o", str(tmp_path / "c.csv"))
    assert code == 1 and "window counts differ" in err


def test_segmetrics(seqdir, tmp_path, capsys):
    code, out, _ = run(capsys, "segmetrics", str(seqdir / "probmaps"), str(seqdir / "probmaps"),
                       "-o", str(tmp_path / "sm.csv"))
    assert code == 0 and out["n_images"] == 8 and out["dice"] == "1.00±0.00"
    rows = (tmp_path / "sm.csv").read_text().splitlines()
    assert rows[0] == "image,dice,iou" and rows[-2].startswith("mean,")


def test_loss(tmp_path, capsys):
    save_image(ScalarImage(np.ones((4, 4))), tmp_path / "gt.pgm")
    save_image(ScalarImage(np.full((4, 4), 0.5)), tmp_path / "pred.pgm")
    code, out, _ = run(capsys, "loss", str(tmp_path / "gt.pgm"), str(tmp_path / "pred.pgm"))
    assert code == 0
    # 0.5 quantizes to 32768/65535
    assert out["combined"] == pytest.approx(1.193147, abs=1e-4)


def test_frame_ordering(tmp_path):
    for name in ("f10.pgm", "f2.pgm", "f002.pgm", "notes.txt", "cover.png", "f1.png"):
        (tmp_path / name).write_bytes(b"")
    names = [p.split("/")[-1] for p in list_frames(str(tmp_path))]
    assert names == ["f1.png", "f002.pgm", "f2.pgm", "f10.pgm", "cover.png"]
    assert _frame_key("0007.pgm") < _frame_key("0010.pgm")


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(input_mode="rgb")
    with pytest.raises(ValueError):
        PipelineConfig(reference="last")
    assert PipelineConfig().registration == PipelineConfig().registration


def test_subcommands_deterministic(seqdir, tmp_path, capsys):
    outs = []
    for k in range(2):
        run(capsys, "register", str(seqdir / "frames"), "-o", str(tmp_path / f"{k}.csv"))
        outs.append((tmp_path / f"{k}.csv").read_text())
    assert outs[0] == outs[1]
    assert read_transforms_csv(tmp_path / "0.csv")[0] != AffineTransform.identity()
