import math
from dataclasses import replace

import numpy as np
import pytest

from gradcheck import MODEL_TOL, check_params
from rldnet import functional as F
from rldnet.autodiff import Tensor
from rldnet.data import SynthSpec, generate_synth
from rldnet.model import (ModelConfig, RLDNet, ResNetSpec, TrainConfig, count_params, desk_backbone, format_loss_log,
                          read_loss_log, resnet50_reference, train)
from rldnet.nn import LayerSpec
from rldnet.rld import RldMatrix, rld_matrix


def micro_config(**kw):
    bb = [LayerSpec.conv(3, 4, 3, 2, 1, bias=True), LayerSpec.bn(4), LayerSpec("relu"),
          LayerSpec.conv(4, 6, 3, 1, 1), LayerSpec("relu")]
    base = dict(num_classes=2, backbone=bb, identity_hidden_dim=5, structure_hidden_dim=4, input_size=(8, 8),
                lam=0.2, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synth(SynthSpec(num_ids=8, images_per_id_per_cam=2, num_cams=2), seed=0)


TINY_TRAIN = TrainConfig(batch_size=8, epochs=3, lr_decay_epoch=2)


# configuration --------------------------------------------------------------------------


def test_desk_default_geometry():
    cfg = ModelConfig(num_classes=10)
    assert cfg.feature_shape() == (128, 4, 2)


def test_config_rejects_degenerate_height():
    with pytest.raises(ValueError, match="at least 2 rows"):
        ModelConfig(num_classes=3, input_size=(16, 16))
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, lr_decay_epoch=10)
    assert TrainConfig(epochs=1, lr_decay_epoch=40).lr_at(1) == 0.1
    t = TrainConfig()
    assert t.lr_at(40) == 0.1 and t.lr_at(41) == pytest.approx(0.01)


# forward ----------------------------------------------------------------------------------


def test_lambda_zero_loss_is_identity_loss_bitwise():
    model = RLDNet(micro_config(lam=0.0), seed=1)
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
    out = model.forward_train(x, [0, 1, 0, 1])
    assert out.loss.data.tobytes() == out.id_loss.data.tobytes()
    assert out.stru_loss is not None


def test_zero_heads_give_ln_k():
    k = 5
    model = RLDNet(micro_config(num_classes=k), seed=0, dtype=np.float64)
    for name, p in model.named_parameters():
        if "head" in name:
            p.data[...] = 0.0
    out = model.forward_train(np.random.default_rng(1).standard_normal((3, 3, 8, 8)), [0, 2, 4])
    assert out.id_loss.item() == pytest.approx(math.log(k), abs=1e-12)
    assert out.stru_loss.item() == pytest.approx(math.log(k), abs=1e-12)


def _replay(model, x, labels, lam):
    """Second forward path built directly from functional primitives and raw parameter arrays."""
    p = {k: Tensor(v.data) for k, v in model.named_parameters()}
    h = F.conv2d(Tensor(x), p["backbone.0.weight"], p["backbone.0.bias"], 2, 1)
    h = F.batch_norm(h, p["backbone.1.weight"], p["backbone.1.bias"], np.zeros(4), np.ones(4), True)
    h = F.relu(h)
    fmap = F.relu(F.conv2d(h, p["backbone.3.weight"], None, 1, 1))

    def head(z, prefix):
        z = F.linear(z, p[prefix + "fc1.weight"], p[prefix + "fc1.bias"])
        n = z.shape[1]
        z = F.batch_norm(z, p[prefix + "bn.weight"], p[prefix + "bn.bias"], np.zeros(n), np.ones(n), True)
        return F.linear(F.relu(z), p[prefix + "fc2.weight"], p[prefix + "fc2.bias"])

    pooled = fmap.mean(axis=(2, 3))
    l_id = F.cross_entropy(head(pooled, "identity_head."), labels)
    X = fmap.mean(axis=3)
    norms = np.sqrt((X.data ** 2).sum(axis=1, keepdims=True))
    Xn = X * Tensor(1.0 / norms)  # norm treated as a constant is fine for the value
    D = Xn.transpose(0, 2, 1) @ Xn
    l_stru = F.cross_entropy(head(D.reshape(x.shape[0], -1), "structure_head."), labels)
    return l_id.item() + lam * l_stru.item()


def test_forward_matches_replay_oracle():
    cfg = micro_config(num_classes=3)
    model = RLDNet(cfg, seed=7, dtype=np.float64)
    x = np.random.default_rng(2).standard_normal((5, 3, 8, 8))
    labels = np.array([0, 1, 2, 1, 0])
    got = model.forward_train(x, labels).loss.item()
    assert got == pytest.approx(_replay(model, x, labels, 0.2), abs=1e-8)


def test_forward_input_errors():
    model = RLDNet(micro_config(), seed=0)
    with pytest.raises(ValueError, match="labels"):
        model.forward_train(np.zeros((2, 3, 8, 8)), [0, 2])
    with pytest.raises(ValueError, match=r"\(N, 3, H, W\)"):
        model.forward_train(np.zeros((2, 1, 8, 8)), [0, 1])


def test_end_to_end_gradient_check():
    model = RLDNet(micro_config(dropout=0.0), seed=3, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 8, 8))
    y = np.array([0, 1, 1, 0])
    errors = check_params(lambda: model.forward_train(x, y).loss, model.param_dict())
    assert len(errors) == len(model.param_dict())
    bad = {k: v for k, v in errors.items() if not v < MODEL_TOL}
    assert not bad, bad


# features ----------------------------------------------------------------------------------


def test_zero_image_gives_zero_feature():
    model = RLDNet(ModelConfig(num_classes=4), seed=0)
    np.testing.assert_array_equal(model.extract_feature(np.zeros((3, 64, 32))), 0.0)


def test_feature_extraction_deterministic():
    model = RLDNet(ModelConfig(num_classes=4), seed=0)
    img = np.random.default_rng(0).random((3, 64, 32))
    a, b = model.extract_feature(img), model.extract_feature(img)
    assert a.shape == (128,)
    np.testing.assert_array_equal(a, b)


def test_width_constant_image_consistency():
    model = RLDNet(ModelConfig(num_classes=4), seed=0, dtype=np.float64)
    img = np.random.default_rng(1).random((3, 64, 32))
    flat = np.repeat(img.mean(axis=2, keepdims=True), 32, axis=2)
    assert not np.array_equal(model.extract_feature(img), model.extract_feature(flat))
    for im in (img, flat):
        fmap = model.feature_map(im)
        RldMatrix(rld_matrix(Tensor(fmap)).D, normalized=True).check()


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = ModelConfig(num_classes=4)
    model = RLDNet(cfg, seed=5)
    for mod in model.modules():
        if "running_mean" in mod._buffers:
            mod._buffers["running_mean"][...] = np.random.default_rng(0).random(mod._buffers["running_mean"].shape)
    model.save(tmp_path / "m.rld")
    back = RLDNet.load(tmp_path / "m.rld", cfg)
    img = np.random.default_rng(2).random((6, 3, 64, 32))
    assert model.extract_feature(img).tobytes() == back.extract_feature(img).tobytes()


def test_checkpoint_dimension_mismatch(tmp_path):
    RLDNet(ModelConfig(num_classes=4), seed=0).save(tmp_path / "m.rld")
    with pytest.raises(ValueError, match="dimension mismatch"):
        RLDNet.load(tmp_path / "m.rld", ModelConfig(num_classes=6))


# parameter counting --------------------------------------------------------------------------


def test_single_fc_count():
    assert LayerSpec.fc(7, 3).param_count() == 7 * 3 + 3


@pytest.mark.parametrize("kw", [
    {},
    {"structure_branch": False},
    {"backbone": desk_backbone((8, 16, 24, 32)), "num_classes": 11},
    {"identity_hidden_dim": 64, "structure_hidden_dim": 32, "num_classes": 3},
])
def test_count_matches_instantiation(kw):
    cfg = ModelConfig(**{"num_classes": 20, **kw})
    model = RLDNet(cfg, seed=0)
    report = count_params(cfg)
    assert report.total == model.num_parameters()
    branch = model.structure_head.num_parameters() if model.structure_head else 0
    assert report.structure_branch_params == branch


def test_micro_h2_closed_form():
    k = 9
    cfg = ModelConfig(num_classes=k, input_size=(32, 32))
    assert cfg.feature_shape()[1] == 2
    assert count_params(cfg).structure_branch_params == 4 * 256 + 256 + 512 + 256 * k + k


@pytest.mark.parametrize("depth,expected", [(18, 11_176_512), (34, 21_284_672), (50, 23_508_032),
                                            (101, 42_500_160)])
def test_resnet_backbone_counts(depth, expected):
    # reference values: standard ImageNet ResNets without the 1000-way classifier
    assert ResNetSpec.resnet(depth).param_count() == expected


def test_resnet50_reference_overhead():
    report = count_params(resnet50_reference())
    assert report.structure_branch_params == 64 * 256 + 256 + 512 + 256 * 751 + 751
    assert 0.19e6 <= report.structure_branch_params <= 0.22e6
    assert 0.005 <= report.overhead_ratio <= 0.010
    assert 0 < report.overhead_ratio < 1


# training -------------------------------------------------------------------------------------


def test_frozen_run_leaves_parameters(tiny_data):
    cfg = ModelConfig(num_classes=4)
    before = {k: v.copy() for k, v in RLDNet(cfg, seed=0).state_dict().items() if "running" not in k}
    res = train(cfg, TrainConfig(batch_size=8, epochs=1, lr=0.0), tiny_data)
    assert len(res.log) == 1
    after = res.model.state_dict()
    for k, v in before.items():
        np.testing.assert_array_equal(after[k], v, err_msg=k)


def test_degeneration_equivalence(tiny_data, tmp_path):
    cfg = ModelConfig(num_classes=4, lam=0.0)
    a = train(cfg, TINY_TRAIN, tiny_data, log_path=tmp_path / "a.csv")
    b = train(replace(cfg, structure_branch=False), TINY_TRAIN, tiny_data, log_path=tmp_path / "b.csv")
    for ra, rb in zip(read_loss_log(tmp_path / "a.csv"), read_loss_log(tmp_path / "b.csv")):
        assert (ra.epoch, repr(ra.mean_id_loss), ra.lr) == (rb.epoch, repr(rb.mean_id_loss), rb.lr)
        assert rb.mean_stru_loss is None and ra.mean_stru_loss is not None
    sa, sb = a.model.state_dict(), b.model.state_dict()
    for k, v in sb.items():
        assert sa[k].tobytes() == v.tobytes(), k


def test_training_reduces_loss_and_writes_outputs(tiny_data, tmp_path):
    res = train(ModelConfig(num_classes=4), replace(TINY_TRAIN, epochs=6, lr_decay_epoch=4), tiny_data,
                checkpoint_path=tmp_path / "m.rld", log_path=tmp_path / "log.csv")
    assert (tmp_path / "m.rld").read_bytes()[:4] == b"RLD1"
    log = read_loss_log(tmp_path / "log.csv")
    assert [r.epoch for r in log] == list(range(1, 7))
    assert log[-1].mean_id_loss < log[0].mean_id_loss
    assert log[3].lr == pytest.approx(0.1) and log[4].lr == pytest.approx(0.01)
    assert format_loss_log(log) == (tmp_path / "log.csv").read_text()


def test_training_rejects_wrong_class_count(tiny_data):
    with pytest.raises(ValueError, match="identities"):
        train(ModelConfig(num_classes=5), TINY_TRAIN, tiny_data)


def test_non_finite_loss_names_step(tiny_data):
    with pytest.raises(FloatingPointError, match="epoch 1, step"):
        with np.errstate(all="ignore"):
            train(ModelConfig(num_classes=4), TrainConfig(batch_size=8, epochs=2, lr=1e30, lr_decay_epoch=1),
                  tiny_data)
