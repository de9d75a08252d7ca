import os
import math
import shutil
import numpy as np
import pytest
from mock import patch
from nlss.utils import ConfigError, DataError, TrainingDiverged, one_hot
from nlss.tensor import Tensor
from nlss.models import MiniUNetConfig, FusionSpec, build
from nlss.selection import SelectionSchedule
from nlss.losses import LossBreakdown, compute_losses
from nlss.smoothing import smooth
from nlss.data import SceneSpec, NoisyLabelSplit, generate
from nlss.serialize import load_model
from nlss.train import (
    MODES,
    TrainConfig,
    RunLog,
    CoTrainer,
    make_batch,
    eval_batch,
    prefetch,
    train_batches,
    pretrain,
    extract_encoder,
    transfer,
)


MODEL = MiniUNetConfig(in_channels=(2, 2), base_width=2, depth=2, num_classes=4, input_size=8)


def tiny_config(**kwargs):
    settings = dict(
        mode="cromss_midF",
        batch_size=4,
        eval_batch_size=4,
        epochs=2,
        transfer_epochs=2,
        crop_size=8,
        prefetch=0,
        patience=1,
        checkpoint_every=1,
        schedule=SelectionSchedule(n_s=1),
    )
    settings.update(kwargs)
    return TrainConfig(**settings)


def same_state(a, b):
    a, b = a.state_dict(), b.state_dict()
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def dataset():
    return generate(SceneSpec(num_locations=6, num_test_locations=2, height=16, width=16, val_fraction=0.2, seed=0))


@pytest.fixture(scope="module")
def train(dataset):
    return dataset.split("train")


@pytest.fixture(scope="module")
def val(dataset):
    return dataset.split("val")


@pytest.fixture(scope="module")
def pretrained(train, val):
    pair, _ = pretrain(train, val, tiny_config(epochs=1), MODEL)
    return pair


@pytest.mark.parametrize(
    "fields",
    [
        {"mode": "early"},
        {"modality": 3},
        {"batch_size": 0},
        {"lr": 0.0},
        {"consistency_weight": -1.0},
        {"flip_prob": 1.5},
        {"prefetch": -1},
    ],
)
def test_train_config_validation(fields):
    with pytest.raises(ConfigError):
        TrainConfig(**fields)


def test_train_config_fusion():
    assert TrainConfig(mode="lateF").fusion == FusionSpec("late", 1)
    assert TrainConfig(mode="single", modality=2).fusion == FusionSpec("single", 2)
    assert TrainConfig(mode="cromss_midF").selection
    assert not TrainConfig(mode="midF").selection


def test_train_config_from_dict():
    config = TrainConfig.from_dict(mode="midF", schedule={"n_s": 3}, smoothing={"beta": 0.0, "mu": 0.0})
    assert config.schedule.n_s == 3
    assert not config.smoothing.enabled
    assert TrainConfig.from_dict(**config.to_dict()) == config
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(momentum=0.9)


def test_runlog_is_append_only():
    log = RunLog()
    log.append(epoch=0, lr=0.1)
    log.append(epoch=1, lr=0.05)
    with pytest.raises(DataError):
        log.append(epoch=1, lr=0.05)
    with pytest.raises(ConfigError):
        log.append(epoch=2, accuracy=1.0)
    assert len(log) == 2


def test_runlog_save_load(tmpdir):
    log = RunLog()
    log.append(epoch=0, lr=0.1, train_total=1 / 3)
    log.append(epoch=1, lr=0.05, train_total=2 / 7)
    outfile = os.path.join(str(tmpdir), "runlog.csv")
    log.save(outfile)
    loaded = RunLog.load(outfile)
    np.testing.assert_equal(loaded.column("train_total"), [1 / 3, 2 / 7])
    assert np.isnan(loaded.column("val_total")).all()
    assert len(loaded.truncate(0)) == 1


def test_eval_batch_season_cycles(train):
    batch = eval_batch(train, np.arange(3))
    assert batch.seasons.shape == (3, 4, 16, 16)
    for i in range(3):
        np.testing.assert_equal(batch.labels[i], train.labels[i, i % 4])
        np.testing.assert_equal(batch.x1[i], train.x1[i, i % 4])


def test_make_batch_shapes(train):
    batch = make_batch(train, np.array([0, 2]), np.random.default_rng(0), tiny_config())
    assert batch.x1.shape == (2, 2, 8, 8)
    assert batch.x2.shape == (2, 2, 8, 8)
    assert batch.labels.shape == (2, 8, 8)
    assert batch.seasons.shape == (2, 4, 8, 8)
    for i in range(2):
        assert any(np.array_equal(batch.labels[i], batch.seasons[i, s]) for s in range(4))


def test_make_batch_from_clean_split(dataset):
    clean = dataset.clean_split("test")
    batch = make_batch(clean, np.array([0, 1]), np.random.default_rng(0), tiny_config())
    for s in range(4):
        np.testing.assert_equal(batch.seasons[:, s], batch.labels)


@pytest.mark.parametrize("size", [0, 1, 3])
def test_prefetch_keeps_order(size):
    assert list(prefetch(lambda x: x * x, range(10), size)) == [x * x for x in range(10)]


def test_train_batches_deterministic(train):
    serial = list(train_batches(train, tiny_config(prefetch=0), epoch=3))
    threaded = list(train_batches(train, tiny_config(prefetch=2), epoch=3))
    assert [len(b.labels) for b in serial] == [4, 1]
    for a, b in zip(serial, threaded):
        np.testing.assert_equal(a.x1, b.x1)
        np.testing.assert_equal(a.labels, b.labels)
    other = next(iter(train_batches(train, tiny_config(), epoch=4)))
    assert not np.array_equal(other.x1, serial[0].x1)


def test_trainer_needs_matching_fusion():
    with pytest.raises(ConfigError):
        CoTrainer(build(MODEL, FusionSpec("late"), 0), tiny_config(mode="midF"))


def test_losses_selection_masks(train):
    trainer = CoTrainer(build(MODEL, FusionSpec("middle"), 0), tiny_config())
    batch = eval_batch(train, np.arange(2))
    breakdown, masks, Q = trainer.losses(batch, epoch=1)
    assert set(masks) >= {"W_l", "W_e"}
    assert set(masks["W_l"]) == {1, 2}
    assert set(Q) == {1, 2}
    assert breakdown.total.requires_grad
    _, masks, _ = trainer.losses(batch, epoch=1, training=False)
    assert masks is None


def test_single_mode_has_no_consistency(train):
    config = tiny_config(mode="single", modality=2)
    trainer = CoTrainer(build(MODEL, config.fusion, 0), config)
    breakdown, masks, Q = trainer.losses(eval_batch(train, np.arange(2)), epoch=0)
    values = breakdown.values()
    assert masks is None
    assert list(Q) == [2]
    assert values["seg1"] == values["kl12"] == values["kl21"] == 0.0
    assert values["total"] == values["seg2"] > 0.0


@pytest.mark.parametrize("mode", MODES)
def test_pretrain_modes(train, val, mode):
    pair, runlog = pretrain(train, val, tiny_config(mode=mode), MODEL)
    assert len(runlog) == 2
    assert np.isfinite(runlog.column("train_total")).all()
    assert np.isfinite(runlog.column("val_total")).all()
    if mode == "single":
        assert np.isnan(runlog.column("val_miou2")).all()
    else:
        miou = runlog.column("val_miou2")
        assert np.all((miou >= 0.0) & (miou <= 1.0))
    if mode.startswith("cromss"):
        np.testing.assert_equal(runlog.column("alpha"), [1.0, 0.5])
        np.testing.assert_equal(runlog.column("gamma"), [0.0, 1.0])
        assert runlog.column("flagged_fraction")[-1] > 0.0
    else:
        np.testing.assert_equal(runlog.column("flagged_fraction"), 0.0)
        np.testing.assert_equal(runlog.column("gamma"), 0.0)


def test_pretrain_midf_keeps_shared_decoder(pretrained):
    assert pretrained.decoder(1) is pretrained.decoder(2)


def test_pretrain_is_deterministic(train, val):
    pair_a, log_a = pretrain(train, val, tiny_config(prefetch=0), MODEL)
    pair_b, log_b = pretrain(train, val, tiny_config(prefetch=2), MODEL)
    for column in RunLog.LOSS_COLUMNS + ["lr", "val_miou1"]:
        np.testing.assert_equal(log_a.column(column), log_b.column(column))
    assert same_state(pair_a, pair_b)


def test_pretrain_writes_outputs(tmpdir, train, val):
    out = str(tmpdir)
    _, runlog = pretrain(train, val, tiny_config(checkpoint_every=5), MODEL, out_dir=out, dump_masks=True)
    ckpt = os.path.join(out, "checkpoints")
    assert sorted(os.listdir(ckpt)) == ["epoch_002.nlck", "last.nlck"]
    loaded = RunLog.load(os.path.join(out, "runlog.csv"))
    np.testing.assert_equal(loaded.column("train_total"), runlog.column("train_total"))
    _, extra, arrays = load_model(os.path.join(ckpt, "last.nlck"))
    assert extra["epoch"] == 1
    assert extra["train"]["mode"] == "cromss_midF"
    assert arrays
    masks = os.listdir(os.path.join(out, "masks"))
    assert "e001_b000_W_l1.nlt" in masks
    assert "e001_b001_W_e2.nlt" in masks
    assert all(name.startswith("e001_") for name in masks)


def test_resume_matches_uninterrupted_run(tmpdir, train, val):
    full_dir = os.path.join(str(tmpdir), "full")
    part_dir = os.path.join(str(tmpdir), "part")
    full, full_log = pretrain(train, val, tiny_config(epochs=3), MODEL, out_dir=full_dir)
    pretrain(train, val, tiny_config(epochs=1), MODEL, out_dir=part_dir)
    resumed, resumed_log = pretrain(train, val, tiny_config(epochs=3), MODEL, out_dir=part_dir, resume=True)
    np.testing.assert_equal(resumed_log.column("epoch"), [0, 1, 2])
    for column in RunLog.LOSS_COLUMNS + ["lr"]:
        np.testing.assert_equal(resumed_log.column(column), full_log.column(column))
    assert same_state(full, resumed)


def test_resume_truncates_runlog(tmpdir, train, val):
    out = str(tmpdir)
    pretrain(train, val, tiny_config(epochs=3), MODEL, out_dir=out)
    ckpt = os.path.join(out, "checkpoints")
    shutil.copy(os.path.join(ckpt, "epoch_001.nlck"), os.path.join(ckpt, "last.nlck"))
    _, runlog = pretrain(train, val, tiny_config(epochs=3), MODEL, out_dir=out, resume=True)
    np.testing.assert_equal(runlog.column("epoch"), [0, 1, 2])


def test_resume_errors(tmpdir, train, val):
    out = str(tmpdir)
    with pytest.raises(ConfigError):
        pretrain(train, val, tiny_config(), MODEL, resume=True)
    with pytest.raises(ConfigError):
        pretrain(train, val, tiny_config(), MODEL, out_dir=out, resume=True)
    pretrain(train, val, tiny_config(epochs=1), MODEL, out_dir=out)
    with pytest.raises(ConfigError):
        pretrain(train, val, tiny_config(mode="midF"), MODEL, out_dir=out, resume=True)


def test_divergence_writes_snapshot(tmpdir, train, val):
    nan = Tensor(math.nan)
    out = str(tmpdir)
    with patch.object(CoTrainer, "losses", return_value=(LossBreakdown(nan, nan, nan, nan, nan), None, {})):
        with pytest.raises(TrainingDiverged) as e:
            pretrain(train, val, tiny_config(), MODEL, out_dir=out)
    assert e.value.epoch == 0
    assert e.value.snapshot == os.path.join(out, "checkpoints", "diverged.nlck")
    assert os.path.exists(e.value.snapshot)


def test_pretrain_without_validation(train):
    empty = NoisyLabelSplit(train.ids[:0], train.x1[:0], train.x2[:0], train.labels[:0])
    _, runlog = pretrain(train, empty, tiny_config(mode="lateF"), MODEL)
    np.testing.assert_equal(runlog.column("val_total"), runlog.column("train_total"))
    assert np.isnan(runlog.column("val_miou1")).all()


def test_empty_validation_split():
    dataset = generate(SceneSpec(num_locations=2, num_test_locations=0, height=16, width=16, val_fraction=0.0))
    val = dataset.split("val")
    assert len(val) == 0
    assert val.x1.shape == (0, 4, 2, 16, 16)
    assert val.labels.shape == (0, 4, 16, 16)


def test_pretrain_input_errors(dataset, train, val):
    with pytest.raises(ConfigError):
        pretrain(train, val, tiny_config(), MiniUNetConfig(in_channels=(3, 2), base_width=2, depth=2, input_size=8))
    empty = NoisyLabelSplit(train.ids[:0], train.x1[:0], train.x2[:0], train.labels[:0])
    with pytest.raises(DataError):
        pretrain(empty, val, tiny_config(), MODEL)
    with pytest.raises(DataError):
        pretrain(dataset.clean_split("train"), val, tiny_config(), MODEL)


def test_extract_encoder(pretrained):
    encoder = extract_encoder(pretrained, 2)
    assert encoder is not pretrained.encoder(2)
    assert same_state(encoder, pretrained.encoder(2))
    assert same_state(extract_encoder(pretrained.segmentation_model(1), 1), pretrained.encoder(1))
    assert extract_encoder(None, 1, MODEL).in_channels == 2
    with pytest.raises(ConfigError):
        extract_encoder(None, 1)
    with pytest.raises(ConfigError):
        extract_encoder("encoder.nlck", 1)


def test_frozen_transfer_keeps_encoder(dataset, pretrained):
    down_train, down_test = dataset.clean_split("train"), dataset.clean_split("test")
    model, report = transfer(pretrained, 1, down_train, down_test, True, tiny_config(), 4)
    assert same_state(model.encoder, pretrained.encoder(1))
    assert 0.0 <= report.oa <= 1.0
    assert 0.0 <= report.miou <= 1.0


def test_fine_tuned_transfer_moves_encoder(dataset, pretrained):
    down_train, down_test = dataset.clean_split("train"), dataset.clean_split("test")
    model, _ = transfer(pretrained, 2, down_train, down_test, False, tiny_config(), 4)
    assert not same_state(model.encoder, pretrained.encoder(2))
    assert same_state(extract_encoder(pretrained, 2), pretrained.encoder(2))


def test_random_transfer_writes_outputs(tmpdir, dataset):
    out = str(tmpdir)
    down_train, down_test = dataset.clean_split("train"), dataset.clean_split("test")
    _, report = transfer(None, 2, down_train, down_test, False, tiny_config(), 4, model_config=MODEL, out_dir=out)
    assert os.path.exists(os.path.join(out, "checkpoints", "transfer.nlck"))
    assert len(RunLog.load(os.path.join(out, "runlog.csv"))) == 2
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    assert 0.0 <= report.mf1 <= 1.0


def test_transfer_channel_mismatch(dataset):
    wide = MiniUNetConfig(in_channels=(3, 3), base_width=2, depth=2, input_size=8)
    down_train, down_test = dataset.clean_split("train"), dataset.clean_split("test")
    with pytest.raises(ConfigError):
        transfer(None, 1, down_train, down_test, True, tiny_config(), 4, model_config=wide)


def test_symmetric_late_fusion_losses_match(train):
    twin = NoisyLabelSplit(train.ids, train.x1, train.x1, train.labels)
    config = tiny_config(mode="lateF", smoothing={"beta": 0.0, "mu": 0.0})
    pair = build(MODEL, config.fusion, 0)
    pair.encoder(2).load_state_dict(pair.encoder(1).state_dict())
    trainer = CoTrainer(pair, config)
    for step, batch in enumerate(train_batches(twin, config, epoch=0)):
        values, _ = trainer.train_step(batch, 0, step)
        assert values["seg1"] == values["seg2"]
        assert values["kl12"] == values["kl21"]
    assert same_state(pair.encoder(1), pair.encoder(2))


def test_selection_masks_are_constants(train):
    config = tiny_config(mode="cromss_lateF")
    pair = build(MODEL, config.fusion, 0)
    trainer = CoTrainer(pair, config)
    batch = eval_batch(train, np.arange(2))
    breakdown, masks, _ = trainer.losses(batch, epoch=1)
    frozen = {k: {d: m.values.copy() for d, m in masks[k].items()} for k in ("W_l", "W_e")}
    rng = np.random.default_rng(0)
    for k in frozen:
        for m in masks[k].values():
            assert not isinstance(m.values, Tensor)
            m.values[...] = rng.uniform(size=m.values.shape)
    breakdown.total.backward()
    grads = [p.grad.copy() for p in pair.parameters()]
    pair.zero_grad()
    Q1, Q2 = pair(1, Tensor(batch.x1)), pair(2, Tensor(batch.x2))
    Z = smooth(one_hot(batch.labels, MODEL.num_classes), batch.seasons, config.smoothing)
    W_l, W_e = frozen["W_l"], frozen["W_e"]
    total = compute_losses(Q1, Q2, Z, W_l[1], W_l[2], W_e[1], W_e[2], consistency_weight=config.consistency_weight)
    total.total.backward()
    for p, g in zip(pair.parameters(), grads):
        np.testing.assert_array_equal(p.grad, g)


def test_selection_harmless_without_noise():
    scene = SceneSpec(num_locations=6, num_test_locations=0, height=16, width=16, noise_rate=0.0, seed=2)
    clean = generate(scene).split("train")
    empty = NoisyLabelSplit(clean.ids[:0], clean.x1[:0], clean.x2[:0], clean.labels[:0])
    batch = eval_batch(clean, np.arange(len(clean)))
    final = {}
    for mode in ("lateF", "cromss_lateF"):
        pair, _ = pretrain(clean, empty, tiny_config(mode=mode, epochs=4, schedule=SelectionSchedule(n_s=2)), MODEL)
        pair.eval()
        breakdown, _, _ = CoTrainer(pair, tiny_config(mode="lateF")).losses(batch, epoch=0, training=False)
        final[mode] = breakdown.total.item()
    assert abs(final["cromss_lateF"] / final["lateF"] - 1.0) <= 0.1
