import math

import numpy as np
import pytest

import effisegnet as es

MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32).reshape(1, 3, 1, 1)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32).reshape(1, 3, 1, 1)


def test_variants():
    assert es.variants() == [f"b{i}" for i in range(8)]
    cfg = es.variant_config("b4")
    assert cfg["input_resolution"] == 380
    assert cfg["stage_channels"] == [24, 32, 56, 160, 448]
    with pytest.raises(es.ConfigError):
        es.variant_config("b9")


def test_parameter_table():
    table = es.parameter_table("all")
    assert len(table.strip().splitlines()) == 9
    assert "63.8M" in table


def test_schedule():
    assert es.lr_at_epoch(0, 300) == 1e-4
    assert es.lr_at_epoch(300, 300) == 1e-5
    assert abs(es.lr_at_epoch(150, 300) - 5.5e-5) < 1e-12
    with pytest.raises(es.ContractError):
        es.lr_at_epoch(301, 300)


def test_losses_match_numpy():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, size=(2, 1, 6, 6)).astype(np.float32)
    t = (rng.uniform(size=p.shape) > 0.5).astype(np.float32)
    inter = (p * t).reshape(2, -1).sum(1)
    dice = 1 - (2 * inter + 1e-6) / (p.reshape(2, -1).sum(1) + t.reshape(2, -1).sum(1) + 1e-6)
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
    assert es.dice_loss(p, t) == pytest.approx(dice.mean(), rel=1e-5)
    assert es.combined_loss(p, t) == pytest.approx(0.5 * (dice.mean() + bce), rel=1e-5)
    assert es.combined_loss(np.full_like(p, 0.5), t) - 0.5 * es.dice_loss(np.full_like(p, 0.5), t) == pytest.approx(
        0.5 * math.log(2), rel=1e-5
    )
    with pytest.raises(es.ContractError):
        es.dice_loss(p, t[:, :, :5])


def test_metrics():
    pred = np.array([[1, 1], [0, 0]], dtype=np.float32)
    gt = np.array([[1, 0], [1, 0]], dtype=np.float32)
    assert es.confusion_counts(pred, gt) == {"tp": 1, "fp": 1, "fn": 1, "tn": 1}
    dice, iou = es.per_image_overlap(pred, gt)
    assert dice == 2 * iou / (1 + iou)
    report = es.score([gt, gt], [gt, gt])
    assert report["f1"] == report["mdice"] == report["miou"] == 1.0


def test_batch_search():
    probes = []

    def fits(b):
        probes.append(b)
        return b <= 13

    assert es.find_max_batch_size(fits, 64) == 13
    assert len(probes) <= 7
    with pytest.raises(es.ResourceError):
        es.find_max_batch_size(lambda b: False, 8)


def test_model_predict_and_roundtrip(tmp_path):
    model = es.Model("b0", seed=3)
    assert model.resolution == 224
    assert model.parameters["random"] == 158369
    x = np.random.default_rng(1).standard_normal((2, 3, 224, 224)).astype(np.float32)
    probs = model.predict(x)
    assert probs.shape == (2, 1, 224, 224)
    assert probs.min() > 0 and probs.max() < 1
    model.save(tmp_path / "m.safetensors", seed=3, epoch=0)
    again = es.Model.load(tmp_path / "m.safetensors", variant="b0")
    np.testing.assert_array_equal(again.predict(x), probs)
    with pytest.raises(es.ConfigError):
        es.Model.load(tmp_path / "m.safetensors", variant="b4")
    with pytest.raises(es.ShapeError):
        model.predict(x[:, :, :200, :200])


def test_dataset_helpers(tmp_path):
    from PIL import Image

    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    for i in range(10):
        Image.fromarray(np.full((20, 20, 3), 40 * (i % 5), np.uint8)).save(tmp_path / "images" / f"s{i}.png")
        Image.fromarray(np.zeros((20, 20), np.uint8)).save(tmp_path / "masks" / f"s{i}.png")
    assert es.index_dataset(tmp_path) == [f"s{i}" for i in range(10)]
    split = es.load_split(tmp_path, "generate:1")
    assert [len(split[k]) for k in ("train", "validation", "test")] == [8, 1, 1]
    (tmp_path / "masks" / "s3.png").unlink()
    with pytest.raises(es.DataError, match="s3"):
        es.index_dataset(tmp_path)


def test_cli_params():
    assert es.run_cli(["params", "b0"]) == 0
    assert es.run_cli(["params", "nope"]) == 2


def test_torchvision_parity(tmp_path):
    torch = pytest.importorskip("torch")
    torchvision = pytest.importorskip("torchvision")
    pytest.importorskip("safetensors")
    import export_torchvision_weights as exporter

    reference = exporter.build("b0", random_init=True, seed=5)
    # Non-trivial BN statistics so eval mode exercises them.
    with torch.no_grad():
        for m in reference.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 1.5)
    path = exporter.export(reference, "b0", tmp_path, "test")

    model = es.Model("b0", pretrained=True, weights=path)
    x = np.random.default_rng(2).standard_normal((1, 3, 224, 224)).astype(np.float32)
    ours = model.stages(x)

    reference.eval()
    taps = {1: 0, 2: 1, 3: 2, 5: 3, 7: 4}
    expected = [None] * 5
    with torch.no_grad():
        h = torch.from_numpy(x)
        for i, block in enumerate(reference.features):
            h = block(h)
            if i in taps:
                expected[taps[i]] = h.numpy()
    for got, want in zip(ours, expected):
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-4)
