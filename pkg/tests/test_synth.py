import numpy as np
import pytest

from rulstm import Rng, SynthConfig, TimelineSpec, load_dataset, synth_generate
from rulstm import write_dataset
from rulstm.data import materialize_features
from rulstm.synth import ConfigError


def small_config(**kw):
    base = dict(num_actions=4, modalities={"rgb": 6, "obj": 3},
                train_samples=24, val_samples=8, noise=0.5,
                timeline=TimelineSpec(alpha=0.25, s_enc=2, s_ant=3))
    base.update(kw)
    return SynthConfig(**base)


def test_same_seed_bit_identical_in_memory():
    cfg = small_config(corruption=0.3)
    a = synth_generate(cfg, 7)
    b = synth_generate(cfg, 7)
    assert a.corrupted == b.corrupted
    for split in ("train", "val"):
        assert a.splits[split] == b.splits[split]
    for m in cfg.modalities:
        for rec in a.splits["train"]:
            assert np.array_equal(a.store.get(m, rec.video_id).rows,
                                  b.store.get(m, rec.video_id).rows)


def test_same_seed_byte_identical_on_disk(tmp_path):
    cfg = small_config(corruption=0.3)
    for name in ("one", "two"):
        write_dataset(synth_generate(cfg, 9), tmp_path / name, cfg, 9)
    files_a = sorted((tmp_path / "one").rglob("*"))
    files_b = sorted((tmp_path / "two").rglob("*"))
    assert [f.name for f in files_a if f.is_file()] == \
           [f.name for f in files_b if f.is_file()]
    for fa, fb in zip(files_a, files_b):
        if fa.is_file():
            assert fa.read_bytes() == fb.read_bytes(), fa.name


def test_noiseless_nearest_prototype_is_perfect():
    cfg = small_config(noise=0.0, corruption=0.0)
    ds = synth_generate(cfg, 3)
    spec = cfg.timeline
    feats = materialize_features(ds.store, ds.splits["train"],
                                 list(cfg.modalities), spec)
    # Recover per-class prototypes from the final step (full evidence).
    labels = np.asarray([r.action_id for r in ds.splits["train"]])
    protos = {m: np.stack([feats[m][labels == k][0, -1]
                           for k in range(cfg.num_actions)])
              for m in cfg.modalities}
    hits = 0
    for i in range(len(labels)):
        dists = sum(np.sum((protos[m] - feats[m][i, -1]) ** 2, axis=1)
                    for m in cfg.modalities)
        hits += int(np.argmin(dists)) == labels[i]
    assert hits == len(labels)


def test_full_corruption_removes_signal():
    cfg = small_config(noise=0.0, corruption=1.0, train_samples=64)
    ds = synth_generate(cfg, 5)
    assert len(ds.corrupted) == cfg.train_samples + cfg.val_samples
    spec = cfg.timeline
    feats = materialize_features(ds.store, ds.splits["train"],
                                 list(cfg.modalities), spec)
    labels = np.asarray([r.action_id for r in ds.splits["train"]])
    # Nearest-prototype on pure noise sits near chance (1/K = 25%).
    protos = {m: Rng(11).derive(m).normal((cfg.num_actions, d))
              for m, d in cfg.modalities.items()}
    hits = sum(
        int(np.argmin(sum(np.sum((protos[m] - feats[m][i, -1]) ** 2, axis=1)
                          for m in cfg.modalities))) == labels[i]
        for i in range(len(labels)))
    assert hits / len(labels) < 0.6


def test_evidence_ramps_up():
    cfg = small_config(noise=0.0)
    ds = synth_generate(cfg, 1)
    feats = materialize_features(ds.store, ds.splits["train"], ["rgb"],
                                 cfg.timeline)["rgb"]
    norms = np.linalg.norm(feats[0], axis=1)
    assert np.all(np.diff(norms) > 0)


def test_corruption_flags_recorded():
    cfg = small_config(corruption={"rgb": 1.0, "obj": 0.0})
    ds = synth_generate(cfg, 2)
    assert all(mods == ["rgb"] for mods in ds.corrupted.values())
    assert len(ds.corrupted) == cfg.train_samples + cfg.val_samples


def test_dataset_round_trip(tmp_path):
    cfg = small_config(corruption=0.5)
    ds = synth_generate(cfg, 13)
    write_dataset(ds, tmp_path, cfg, 13)
    loaded = load_dataset(tmp_path)
    assert loaded.vocab == ds.vocab
    assert loaded.splits["train"] == ds.splits["train"]
    assert loaded.splits["val"] == ds.splits["val"]
    assert loaded.corrupted == ds.corrupted
    for rec in ds.splits["train"][:3]:
        for m in cfg.modalities:
            assert np.array_equal(loaded.store.get(m, rec.video_id).rows,
                                  ds.store.get(m, rec.video_id).rows)


def test_vocabulary_structure():
    cfg = small_config(num_actions=6, train_samples=60, many_shot_threshold=10)
    ds = synth_generate(cfg, 0)
    vocab = ds.vocab
    assert vocab.num_actions == 6
    pairs = set(vocab.actions)
    assert len(pairs) == 6
    # balanced round-robin labels: every class has 10 train samples
    assert vocab.many_shot_actions == list(range(6))


class TestConfigValidation:
    def test_zero_classes(self):
        with pytest.raises(ConfigError, match="num_actions"):
            SynthConfig(num_actions=0)

    def test_bad_corruption(self):
        with pytest.raises(ConfigError, match="corruption"):
            small_config(corruption={"rgb": 1.5})

    def test_unknown_modality_in_corruption(self):
        with pytest.raises(ConfigError, match="corruption"):
            small_config(corruption={"nope": 0.5})

    def test_bad_dim(self):
        with pytest.raises(ConfigError, match="modalities"):
            SynthConfig(modalities={"rgb": 0})

    def test_from_dict_round_trip(self):
        cfg = small_config()
        again = SynthConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()
