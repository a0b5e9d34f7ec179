import csv
import json
from dataclasses import asdict

import numpy as np
import pytest
import torch

from bcae.frames import SyntheticConfig, generate_dataset
from bcae.seeding import derive_seed
from bcae.training import (
    CheckpointError,
    TrainConfig,
    Trainer,
    TrainingDivergence,
    batch_losses,
    desk_config,
    inspect_checkpoint,
    load_checkpoint,
    lr_at_epoch,
    make_variant,
    write_log_csv,
)

TINY = (16, 16, 4)


def tiny_config(**kw):
    base = dict(input_shape=TINY, batch_size=2, epochs=3, n_train=3, n_test=1, lr_initial=0.003)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_frames():
    return generate_dataset(3, SyntheticConfig(seed=2, shape=TINY, n_tracks=2, target_occupancy=0.1))


def test_lr_schedule_values():
    assert [lr_at_epoch(e) for e in (0, 19, 20, 40)] == pytest.approx([0.01, 0.01, 0.0095, 0.009025], abs=1e-15)
    with pytest.raises(ValueError):
        lr_at_epoch(-1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="vae")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_config_hash_ignores_run_length():
    assert tiny_config(epochs=5).config_hash() == tiny_config(epochs=10).config_hash()
    assert tiny_config(seed=1).config_hash() != tiny_config(seed=2).config_hash()
    c = tiny_config()
    assert TrainConfig.from_dict(json.loads(json.dumps(asdict(c)))) == c


def test_desk_config_defaults():
    c = desk_config()
    assert c.input_shape == (48, 64, 16) and c.epochs == 200 and c.n_train == 4


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "init") == derive_seed(0, "init")
    assert len({derive_seed(0, p) for p in ("data", "init", "shuffle", "sampling", "split")}) == 5
    with pytest.raises(ValueError):
        derive_seed(0, "other")


def test_make_variant():
    assert make_variant("CAE", TINY).decoder_s is None
    with pytest.raises(ValueError):
        make_variant("unet", TINY)


def test_batch_losses_per_variant(tiny_frames):
    x = torch.from_numpy(np.stack(tiny_frames).astype(np.float32))[:, None]
    cfg = tiny_config()
    for variant in ("bcae", "bcaewot"):
        l_s, l_r = batch_losses(make_variant(variant, TINY), x, cfg)
        assert l_s.item() > 0 and l_r.item() > 0
    l_s, l_r = batch_losses(make_variant("cae", TINY), x, cfg)
    assert l_s is None and l_r.item() > 0


def test_seg_weight_telemetry(tiny_frames):
    trainer = Trainer(tiny_config(epochs=4))
    hist = trainer.fit(tiny_frames)
    assert hist[0]["seg_weight"] == 1.0
    for prev, cur in zip(hist, hist[1:]):
        assert abs(cur["seg_weight"] - prev["rho_r"] / prev["rho_s"]) < 1e-9
    assert [h["epoch"] for h in hist] == [1, 2, 3, 4]


def test_cae_has_no_seg_telemetry(tiny_frames):
    hist = Trainer(tiny_config(variant="cae", epochs=2)).fit(tiny_frames)
    assert all(h["rho_s"] is None and h["seg_weight"] == 1.0 for h in hist)


def test_total_is_weighted_sum(tiny_frames):
    # with batch == dataset there is one step per epoch
    hist = Trainer(tiny_config(batch_size=3, epochs=3)).fit(tiny_frames)
    for h in hist:
        assert h["total"] == pytest.approx(h["seg_weight"] * h["rho_s"] + h["rho_r"], rel=1e-5)


def test_divergence_raises(tiny_frames):
    trainer = Trainer(tiny_config())
    bad = np.stack(tiny_frames).astype(np.float32)
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(TrainingDivergence):
        trainer.fit(torch.from_numpy(bad)[:, None])


def test_resume_equivalence(tmp_path, tiny_frames):
    straight = Trainer(tiny_config(epochs=4))
    straight.fit(tiny_frames)

    first = Trainer(tiny_config(epochs=4))
    first.fit(tiny_frames, epochs=2, checkpoint_path=tmp_path / "half.ckpt")
    resumed = load_checkpoint(tmp_path / "half.ckpt", tiny_config(epochs=4))
    resumed.fit(tiny_frames)

    for (k, a), (_, b) in zip(straight.bundle.state_dict().items(), resumed.bundle.state_dict().items()):
        assert torch.equal(a, b), k
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_time"} for r in h]
    assert strip(straight.history) == strip(resumed.history)


def test_checkpoint_header_and_mismatch(tmp_path, tiny_frames):
    t = Trainer(tiny_config())
    t.fit(tiny_frames, epochs=1, checkpoint_path=tmp_path / "c.ckpt")
    head = inspect_checkpoint(tmp_path / "c.ckpt")
    assert head["epoch"] == 1 and head["config_hash"] == tiny_config().config_hash()
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "c.ckpt", tiny_config(lr_initial=0.5))


def test_corrupt_checkpoint(tmp_path, tiny_frames):
    t = Trainer(tiny_config())
    t.fit(tiny_frames, epochs=1, checkpoint_path=tmp_path / "c.ckpt")
    data = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[: len(data) - 100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        inspect_checkpoint(tmp_path / "junk.ckpt")


def test_log_csv(tmp_path, tiny_frames):
    hist = Trainer(tiny_config(epochs=2)).fit(tiny_frames)
    write_log_csv(hist, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "lr", "rho_s", "rho_r", "seg_weight", "total", "wall_time"]
    assert float(rows[1]["seg_weight"]) == pytest.approx(hist[1]["seg_weight"])
