import json
import os

import numpy as np
import pytest

from app.config import apply_overrides
from app.errors import MissingArtifactError
from app.pipeline import Policy
from app.services import reports
from app.services.checkpoint import save_checkpoint, select
from app.services.pgm import read_pgm
from app.services.streams import Modality


@pytest.fixture
def sweep_config(smoke_config):
    return apply_overrides(smoke_config, {
        "eval.rates": "0,0.5",
        "eval.policies": "ZeroFill,CopyLast,Kalman,HFP,HFP+UCF,HFP+UCF/noU",
    })


def test_rate_zero_is_passthrough(sweep_config, val_streams, checkpoint_dir):
    report = reports.sweep(sweep_config, val_streams, checkpoint_dir, progress=False)
    assert len(report.rows) == 12
    at_zero = [r for r in report.rows if r.drop_rate == 0.0]
    assert len({r.f1 for r in at_zero}) == 1
    assert all(r.mse_img == 0.0 and r.mse_pts == 0.0 for r in at_zero)
    assert all(r.f1_bothdrop is None for r in at_zero)
    assert all(r.seconds is None for r in report.rows)


def test_paired_schedules_do_not_depend_on_policy(sweep_config, val_streams):
    stream = val_streams[1]
    a = reports.paired_schedule(sweep_config, stream, 0.5, 0.5)
    b = reports.paired_schedule(sweep_config, stream, 0.5, 0.5)
    np.testing.assert_array_equal(a.available, b.available)
    other = reports.paired_schedule(sweep_config, val_streams[0], 0.5, 0.5)
    assert a.seed != other.seed


def test_csv_bytes_are_reproducible(tmp_path, sweep_config, val_streams, checkpoint_dir):
    paths = []
    for name in ("a", "b"):
        report = reports.sweep(sweep_config, val_streams, checkpoint_dir, progress=False)
        paths.append(reports.write_report(report, str(tmp_path / name))["csv"])
    with open(paths[0], "rb") as fa, open(paths[1], "rb") as fb:
        content = fa.read()
        assert content == fb.read()
    assert content.splitlines()[0] == b"policy,drop_rate,mse_img,mse_pts,f1,f1_bothdrop,seconds"
    frame = reports.load_report(paths[0])
    assert list(frame["policy"].unique()) == ["ZeroFill", "CopyLast", "Kalman", "HFP", "HFP+UCF", "HFP+UCF/noU"]


def test_json_echoes_config(tmp_path, sweep_config, val_streams, checkpoint_dir):
    report = reports.sweep(sweep_config, val_streams, checkpoint_dir, progress=False)
    paths = reports.write_report(report, str(tmp_path))
    with open(paths["json"], encoding="utf-8") as f:
        payload = json.load(f)
    assert payload["config"]["eval.rates"] == "0,0.5"
    assert len(payload["rows"]) == len(report.rows)


def test_heatmaps(tmp_path, sweep_config, val_streams, checkpoint_dir):
    heatmaps = str(tmp_path / "heatmaps")
    reports.sweep(sweep_config, val_streams, checkpoint_dir, heatmap_dir=heatmaps, progress=False)
    names = sorted(n for n in os.listdir(heatmaps) if n.endswith(".pgm"))
    assert names
    slugs = {n[:-4].split("_", 3)[3] for n in names}
    assert slugs == {"ZeroFill", "CopyLast", "Kalman", "HFP", "HFP-UCF", "HFP-UCF-noU"}
    values, meta = read_pgm(os.path.join(heatmaps, names[0]))
    assert values.shape == (sweep_config.streams.height, sweep_config.streams.width)
    assert meta["max"] >= 0.0 and "mse" in meta
    uncertainty = os.listdir(os.path.join(heatmaps, "uncertainty"))
    assert uncertainty
    assert all(n.endswith(("HFP-UCF.pgm", "HFP-UCF-noU.pgm", ".pgm.json")) for n in uncertainty)


def test_missing_checkpoints(tmp_path, sweep_config, val_streams):
    with pytest.raises(MissingArtifactError):
        reports.sweep(sweep_config, val_streams, str(tmp_path / "none"), progress=False)


def test_baselines_need_only_the_detector(tmp_path, smoke_config, val_streams, smoke_params):
    root = tmp_path / "ckpt"
    save_checkpoint(str(root / "det"), select(smoke_params, "det."))
    cfg = apply_overrides(smoke_config, {"eval.rates": "0.3", "eval.policies": "ZeroFill,Kalman"})
    report = reports.sweep(cfg, val_streams, str(root), progress=False)
    assert [r.policy for r in report.rows] == ["ZeroFill", "Kalman"]
    with pytest.raises(MissingArtifactError):
        reports.evaluate(cfg, val_streams, Policy.HFP, 0.3, str(root))


def test_everything_dropped_reports_both_drop_f1(smoke_config, val_streams, checkpoint_dir):
    row = reports.evaluate(smoke_config, val_streams, Policy.ZERO_FILL, 1.0, checkpoint_dir)
    assert row.f1_bothdrop == pytest.approx(row.f1)
    assert row.mse_img > 0.0 and row.mse_pts > 0.0


def test_timing_column(smoke_config, val_streams, checkpoint_dir):
    cfg = apply_overrides(smoke_config, {"eval.timing": "true"})
    row = reports.evaluate(cfg, val_streams, "CopyLast", 0.3, checkpoint_dir)
    assert row.seconds is not None and row.seconds >= 0.0


def test_single_modality_sweep(tmp_path, sweep_config, val_streams, checkpoint_dir):
    report = reports.sweep_single_modality(sweep_config, val_streams, checkpoint_dir, progress=False)
    assert len(report.rows) == 2 * 2 * 2
    assert {r.absent for r in report.rows} == {"img", "pts"}
    for row in report.rows:
        absent_mse = row.mse_img if row.absent == "img" else row.mse_pts
        assert absent_mse > 0.0
        if row.drop_rate == 0.0:
            assert (row.mse_pts if row.absent == "img" else row.mse_img) == 0.0
    paths = reports.write_report(report, str(tmp_path), stem="report_single", columns=reports.SINGLE_CSV_COLUMNS)
    assert reports.load_report(paths["csv"]).columns[0] == "absent"


def test_without_removes_one_modality(sweep_config, val_streams):
    schedule = reports.without(reports.paired_schedule(sweep_config, val_streams[0], 0.0, 0.0), Modality.PTS)
    assert schedule.available[:, Modality.IMG.index].all()
    assert not schedule.available[:, Modality.PTS.index].any()
    assert schedule.rate_pts == 1.0


def test_load_report_missing(tmp_path):
    with pytest.raises(MissingArtifactError):
        reports.load_report(str(tmp_path / "report.csv"))
