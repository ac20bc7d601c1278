import math

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from facebias.classifier import (
    AttributeClassifier,
    ClassifierTrainConfig,
    TrainedClassifier,
    backbone_checksum,
    build_attribute_head,
    calibrate_batchnorm,
    head_module,
    predict,
    prediction_dump,
    train_classifier,
)
from facebias.errors import EmptyDataset, InvalidClassCount, LabelOutOfRange, ShapeMismatch
from facebias.metrics import PredictionDump, evaluate_dump

SMOKE = dict(backbone="tiny", pretrained=False, batch=32, lr=0.01)


def test_head_spec_layers():
    spec = build_attribute_head(2)
    kinds = [(l.kind, l.units, l.activation, l.rate) for l in spec.layers]
    assert kinds == [
        ("global_avg_pool", None, None, None),
        ("dense", 1024, "relu", None),
        ("dropout", None, None, 0.5),
        ("dense", 512, "relu", None),
        ("dense", 2, "softmax", None),
    ]
    assert build_attribute_head(4).num_classes == 4


@pytest.mark.parametrize("n", [0, 1, -3])
def test_head_invalid_class_count(n):
    with pytest.raises(InvalidClassCount):
        build_attribute_head(n)


def test_head_module_matches_spec():
    head = head_module(build_attribute_head(4), in_channels=32)
    linear = [m for m in head if isinstance(m, torch.nn.Linear)]
    assert [(m.in_features, m.out_features) for m in linear] == [(32, 1024), (1024, 512), (512, 4)]
    assert [m.p for m in head if isinstance(m, torch.nn.Dropout)] == [0.5]
    out = head(torch.randn(3, 32, 5, 5))
    assert out.shape == (3, 4)


def test_default_recipe():
    c = ClassifierTrainConfig()
    assert (c.batch, c.epochs, c.lr, c.momentum) == (64, 25, 1e-4, 0.9)


def test_config_validation():
    with pytest.raises(ValueError):
        ClassifierTrainConfig(backbone="vgg99")
    with pytest.raises(ValueError):
        ClassifierTrainConfig(lr=0)


@pytest.fixture(scope="module")
def smoke(blob_images):
    images, labels = blob_images
    cfg = ClassifierTrainConfig(epochs=3, **SMOKE)
    return train_classifier(images[:160], labels[:160], images[160:], labels[160:], ["Male", "Female"], cfg)


def test_history_shape(smoke):
    assert len(smoke.history) == 3
    for h in smoke.history:
        assert set(h) == {"epoch", "train_loss", "val_loss", "val_accuracy"}
        assert all(math.isfinite(v) for v in h.values())


def test_backbone_frozen(smoke):
    assert backbone_checksum(smoke.model) == smoke.initial_backbone_checksum
    assert all(not p.requires_grad for p in smoke.model.backbone.parameters())


def test_backbone_stays_in_eval_mode():
    m = AttributeClassifier(2, "tiny", pretrained=False)
    m.train()
    assert m.head.training and not m.backbone.training


def test_predict_contract(smoke, blob_images):
    images = blob_images[0][:10]
    probs = predict(images, smoke)
    assert probs.shape == (10, 2)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(1), 1, atol=1e-6)
    twice = predict(np.stack([images[0], images[0]]), smoke)
    assert np.array_equal(twice[0], twice[1])
    assert np.array_equal(predict(images, smoke), probs)
    with pytest.raises(ShapeMismatch):
        predict(images[0], smoke)
    with pytest.raises(ShapeMismatch):
        predict(np.zeros((2, 32, 32, 3)), smoke)


def test_cross_entropy_is_neg_log_prob(smoke, blob_images):
    images, labels = blob_images
    with torch.no_grad():
        smoke.model.eval()
        logits = smoke.model(images[:20]).double()
    y = torch.as_tensor(labels[:20])
    ce = F.cross_entropy(logits, y, reduction="none").numpy()
    probs = predict(images[:20], smoke)
    assert np.allclose(ce, -np.log(probs[np.arange(20), labels[:20]]), rtol=0, atol=1e-9)


def test_training_deterministic(blob_images):
    images, labels = blob_images
    cfg = ClassifierTrainConfig(epochs=2, seed=5, **SMOKE)
    a = train_classifier(images[:60], labels[:60], images[60:80], labels[60:80], ["Male", "Female"], cfg)
    b = train_classifier(images[:60], labels[:60], images[60:80], labels[60:80], ["Male", "Female"], cfg)
    assert a.history == b.history
    assert np.array_equal(predict(images[:5], a), predict(images[:5], b))


def test_train_errors(blob_images):
    images, labels = blob_images
    cfg = ClassifierTrainConfig(epochs=1, **SMOKE)
    with pytest.raises(EmptyDataset):
        train_classifier(images[:0], labels[:0], images[:5], labels[:5], ["a", "b"], cfg)
    with pytest.raises(LabelOutOfRange):
        train_classifier(images[:5], [0, 1, 2, 0, 1], images[:5], labels[:5], ["a", "b"], cfg)


def test_keep_best_val(blob_images):
    images, labels = blob_images
    cfg = ClassifierTrainConfig(epochs=3, keep="best_val", **SMOKE)
    t = train_classifier(images[:60], labels[:60], images[60:80], labels[60:80], ["Male", "Female"], cfg)
    probs = predict(images[60:80], t)
    val_loss = float(np.mean(-np.log(probs[np.arange(20), labels[60:80]])))
    assert val_loss == pytest.approx(min(h["val_loss"] for h in t.history), rel=1e-5)


def test_calibration_sets_batchnorm_statistics(blob_images):
    torch.manual_seed(0)
    m = AttributeClassifier(2, "tiny", pretrained=False)
    bn = [x for x in m.backbone.modules() if isinstance(x, torch.nn.BatchNorm2d)]
    assert all(torch.equal(b.running_mean, torch.zeros_like(b.running_mean)) for b in bn)
    images = blob_images[0][:48]
    calibrate_batchnorm(m, images, batch=16)
    assert not m.backbone.training
    # cumulative averaging over equal batches: the running mean is the mean of per-batch means
    first = torch.as_tensor(images).permute(0, 3, 1, 2)
    conv = m.backbone[0](first)
    assert torch.allclose(bn[0].running_mean, conv.mean((0, 2, 3)), atol=1e-4)
    assert bn[0].momentum == 0.1
    again = AttributeClassifier(2, "tiny", pretrained=False)
    again.load_state_dict(m.state_dict())
    calibrate_batchnorm(again, images, batch=16)
    assert backbone_checksum(again) == backbone_checksum(m)


def test_input_upscaling():
    m = AttributeClassifier(2, "tiny", pretrained=False, input_size=96)
    assert m(np.zeros((2, 75, 75, 3), dtype=np.float32)).shape == (2, 2)


def test_save_load(smoke, tmp_path, blob_images):
    smoke.save(tmp_path / "c.pt")
    back = TrainedClassifier.load(tmp_path / "c.pt")
    assert back.classes == ["Male", "Female"]
    assert np.array_equal(predict(blob_images[0][:4], back), predict(blob_images[0][:4], smoke))


def test_prediction_dump_roundtrip(smoke, blob_images, tmp_path):
    images, labels = blob_images
    truth = ["Male" if g == 0 else "Female" for g in labels[:30]]
    dump = prediction_dump(smoke, images[:30], [f"i{k}" for k in range(30)], truth, "gender", "m", "utk")
    dump.write(tmp_path / "p.csv")
    back = PredictionDump.read(tmp_path / "p.csv")
    assert back.pred_labels == dump.pred_labels and back.true_labels == truth
    assert np.allclose(back.probs, dump.probs, atol=1e-8)
    report = evaluate_dump(back)
    assert 0 <= report.mean_accuracy <= 1
