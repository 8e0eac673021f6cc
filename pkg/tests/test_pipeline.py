import numpy as np
import pytest

from feataug.cam import cache_all
from feataug.config import ExperimentConfig
from feataug.data import SyntheticSpec, generate_synthetic
from feataug.errors import DataError
from feataug.nn import extract_features, init_params
from feataug.pipeline import (FC_NAMES, Standardizer, arm_config, dataset_from_config,
                              finetune_phase2, load_model, run_experiment, save_model, train_phase1)


def separable(rng, n_per=50, size=8):
    """Two classes: bright left half vs bright right half, plus noise."""
    x = rng.normal(0, 0.3, size=(2 * n_per, 1, size, size)).astype(np.float32)
    y = np.repeat([0, 1], n_per)
    x[y == 0, :, :, : size // 2] += 1.0
    x[y == 1, :, :, size // 2:] += 1.0
    return x, y


def tiny_cfg(**phase1):
    cfg = ExperimentConfig()
    cfg.data.n_classes = 2
    cfg.model.channels = "4,8"
    cfg.phase1.epochs = 20
    cfg.phase1.decay_every = 10
    cfg.phase1.augment = False
    for k, v in phase1.items():
        setattr(cfg.phase1, k, v)
    return cfg.validate()


def test_phase1_learns_separable_data(rng):
    x, y = separable(rng)
    xt, yt = separable(np.random.default_rng(99))
    std = Standardizer.fit(x)
    params, rec = train_phase1(std(x), y, tiny_cfg(), eval_set=(std(xt), yt))
    assert rec.series("phase1", "val_acc")[-1][1] >= 0.95
    lrs = [v for _, v in rec.series("phase1", "lr")]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(0.1)
    assert lrs[10] == pytest.approx(0.01) and lrs[-1] == pytest.approx(0.01)


def test_phase1_is_deterministic(rng):
    x, y = separable(rng, n_per=10)
    cfg = tiny_cfg(epochs=2, augment=True)
    a, ra = train_phase1(x, y, cfg)
    b, rb = train_phase1(x, y, cfg)
    for (_, p), (_, q) in zip(a.named(), b.named()):
        np.testing.assert_array_equal(p, q)
    assert ra.to_jsonl() == rb.to_jsonl()


def test_phase2_freezes_extractor_and_checks_fingerprint(rng):
    spec = SyntheticSpec(n_classes=3, image_size=16, test_per_class=5)
    ds = generate_synthetic(spec, [30, 10, 3])
    cfg = ExperimentConfig()
    cfg.data.n_classes = 3
    cfg.phase2.iterations = 20
    cfg.phase2.n_t = 2
    cfg.phase2.h_r_target = 0.7
    params = init_params(3, 3, (16, 32, 64), seed=0)
    cache = cache_all(params, ds.train_images, ds.train_labels)
    _, pooled, _ = extract_features(params, ds.test_images)
    last, best, rec = finetune_phase2(params, cache, cfg, eval_set=(pooled, ds.test_labels))
    for name, arr in params.named():
        if name not in FC_NAMES:
            np.testing.assert_array_equal(arr, last.to_dict()[name])
            np.testing.assert_array_equal(arr, best.to_dict()[name])
    assert not np.array_equal(last.fc_weight, params.fc_weight)
    assert [s for s, _ in rec.series("phase2", "val_acc")] == [0, 20]
    other = init_params(3, 3, (16, 32, 64), seed=1)
    with pytest.raises(DataError):
        finetune_phase2(other, cache, cfg)


def test_arm_config():
    cfg = ExperimentConfig()
    cfg.phase2.n_t, cfg.phase2.n_a = 8, 3
    no = arm_config(cfg, "no_aug")
    assert (no.phase2.n_t, no.phase2.n_a) == (32, 0)
    assert 2 * no.phase2.n_t == 2 * 8 * (1 + 3)
    assert cfg.phase2.n_a == 3
    with pytest.raises(DataError):
        arm_config(cfg, "other")


def test_model_round_trip(tmp_path, rng):
    params = init_params(3, 3, (4,), seed=0)
    std = Standardizer.fit(rng.normal(size=(5, 3, 4, 4)).astype(np.float32))
    save_model(tmp_path / "m", params, std)
    save_model(tmp_path / "m", params, std)  # overwrite in place
    back, std2 = load_model(tmp_path / "m")
    for (_, p), (_, q) in zip(params.named(), back.named()):
        np.testing.assert_array_equal(p, q)
    np.testing.assert_array_equal(std.mean, std2.mean)


def test_run_experiment_small():
    cfg = ExperimentConfig()
    cfg.data.n_classes, cfg.data.im, cfg.data.n_max = 4, 10, 40
    cfg.data.image_size, cfg.data.test_per_class = 16, 5
    cfg.phase1.epochs = 1
    cfg.phase2.iterations = 10
    cfg.phase2.n_t = 2
    cfg.phase2.h_r_target = 0.7
    ds = dataset_from_config(cfg.validate())
    res = run_experiment(ds, cfg)
    assert set(res.metrics) == {"phase1", "phase2_augmented", "phase2_no_aug"}
    assert res.split.tail_class_ids
