import numpy as np
import pytest

from lidattn.attention import AttentionConfig
from lidattn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from lidattn.dataio import SyntheticSpec, gen_synthetic
from lidattn.training import AdamState, LidModel, TrainConfig, predict_proba, train_loop


@pytest.mark.parametrize("mechanism", ["self", "performer", "agent"])
def test_round_trip_after_training(tmp_path, mechanism):
    cfg = AttentionConfig(mechanism=mechanism, d_model=6, d_attn=4, heads=2, r=8, p=2)
    data = gen_synthetic(SyntheticSpec(n_classes=3, d_model=6, n_min=2, n_max=5, per_class=4))
    model = LidModel.init(cfg, 3, seed=1)
    adam = AdamState()
    train_loop(model, data, TrainConfig(max_steps=4, batch_size=3), adam=adam)
    save_checkpoint(tmp_path / "m.lid", model, adam, ["a", "b", "c"], extra={"note": 1})
    back, adam2, header = load_checkpoint(tmp_path / "m.lid")
    assert back.config == cfg and header["label_names"] == ["a", "b", "c"]
    assert header["extra"] == {"note": 1} and adam2.step == 4
    for name, a in model.parameters().items():
        assert back.parameters()[name].tobytes() == a.tobytes()
    for name in adam.m:
        np.testing.assert_array_equal(adam2.m[name], adam.m[name])
        np.testing.assert_array_equal(adam2.v[name], adam.v[name])
    if mechanism == "performer":
        np.testing.assert_array_equal(back.feature_map.omega, model.feature_map.omega)
    np.testing.assert_array_equal(predict_proba(back, data), predict_proba(model, data))


def test_corruption_detected(tmp_path):
    cfg = AttentionConfig(d_model=4, d_attn=4, heads=1)
    save_checkpoint(tmp_path / "m.lid", LidModel.init(cfg, 2))
    buf = (tmp_path / "m.lid").read_bytes()
    (tmp_path / "cut.lid").write_bytes(buf[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.lid")
    (tmp_path / "bad.lid").write_bytes(b"X" + buf[1:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.lid")
