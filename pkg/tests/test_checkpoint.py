import os

import numpy as np
import pytest

from faultps import checkpoint, nn


@pytest.fixture(scope="module")
def spec():
    return nn.mlp(hidden=(8,))


def _params(spec, step, seed=0):
    base = nn.init_params(spec, seed)
    return nn.ParamVector(base.data, spec, step=step)


def test_save_names_file_by_step_and_loads_back(tmp_path, spec):
    params = _params(spec, 30)
    ck = checkpoint.save_checkpoint(tmp_path, params, wall_time=1.5, run_id="r")
    assert ck.path.name == "ckpt-000000000030.fps"
    assert ck.step == 30
    back = checkpoint.restore_latest(tmp_path, spec)
    assert back.step == 30
    assert np.array_equal(back.data, params.data)


def test_multiple_saves_all_present(tmp_path, spec):
    checkpoint.save_checkpoint(tmp_path, _params(spec, 10))
    checkpoint.save_checkpoint(tmp_path, _params(spec, 20))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["ckpt-000000000010.fps", "ckpt-000000000020.fps"]


def test_restore_latest_picks_max_step(tmp_path, spec):
    for step in (10, 30, 20):
        checkpoint.save_checkpoint(tmp_path, _params(spec, step, seed=step))
    restored = checkpoint.restore_latest(tmp_path, spec)
    assert restored.step == 30
    assert np.array_equal(restored.data, _params(spec, 30, seed=30).data)


def test_empty_dir_restores_none(tmp_path, spec):
    assert checkpoint.restore_latest(tmp_path, spec) is None
    assert checkpoint.restore_latest(tmp_path / "missing", spec) is None


def test_corrupt_latest_skipped_with_warning(tmp_path, spec, caplog):
    checkpoint.save_checkpoint(tmp_path, _params(spec, 20, seed=2))
    ck30 = checkpoint.save_checkpoint(tmp_path, _params(spec, 30))
    blob = bytearray(ck30.path.read_bytes())
    blob[50] ^= 0xFF
    ck30.path.write_bytes(bytes(blob))
    with caplog.at_level("WARNING"):
        restored = checkpoint.restore_latest(tmp_path, spec)
    assert restored.step == 20
    assert any("skipping corrupt checkpoint" in r.message for r in caplog.records)


def test_crash_between_temp_write_and_rename_leaves_no_partial(tmp_path, spec, monkeypatch):
    checkpoint.save_checkpoint(tmp_path, _params(spec, 10))

    def exploding_replace(src, dst):
        raise OSError("simulated crash at the rename fault point")

    monkeypatch.setattr(os, "replace", exploding_replace)
    with pytest.raises(OSError):
        checkpoint.save_checkpoint(tmp_path, _params(spec, 20))
    monkeypatch.undo()
    # the interrupted save is invisible: only temp debris, no ckpt-20 file
    visible = checkpoint.list_checkpoints(tmp_path)
    assert [step for step, _ in visible] == [10]
    restored = checkpoint.restore_latest(tmp_path, spec)
    assert restored.step == 10


def test_round_trip_is_bitwise(tmp_path, spec):
    params = _params(spec, 77, seed=9)
    checkpoint.save_checkpoint(tmp_path, params)
    restored = checkpoint.restore_latest(tmp_path, spec)
    assert restored.data.tobytes() == params.data.tobytes()
    assert restored.step == params.step
