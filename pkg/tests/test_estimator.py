import numpy as np
import pytest
from sklearn.base import clone

from rulstm import RUAnticipator, SynthConfig, TimelineSpec, synth_generate
from rulstm.data import materialize_features

SPEC = TimelineSpec(alpha=0.25, s_enc=2, s_ant=3)


def toy_xy(seed=0, train=40, val=12):
    cfg = SynthConfig(num_actions=3, modalities={"rgb": 5, "obj": 3},
                      train_samples=train, val_samples=val, noise=0.3,
                      timeline=SPEC)
    ds = synth_generate(cfg, seed)
    mods = list(cfg.modalities)
    x = materialize_features(ds.store, ds.splits["train"], mods, SPEC)
    y = np.asarray([r.action_id for r in ds.splits["train"]])
    xv = materialize_features(ds.store, ds.splits["val"], mods, SPEC)
    yv = np.asarray([r.action_id for r in ds.splits["val"]])
    return x, y, xv, yv


def fast_estimator(**kw):
    base = dict(hidden_size=6, s_enc=2, s_ant=3, dropout=0.0, use_scp=True,
                scp_epochs=2, branch_epochs=4, fusion_epochs=3, batch_size=8,
                early_stop_metric="avg_top1_action", seed=1)
    base.update(kw)
    return RUAnticipator(**base)


class TestSklearnContract:
    def test_get_set_params_and_clone(self):
        est = fast_estimator(fusion="late")
        params = est.get_params()
        assert params["fusion"] == "late"
        assert params["hidden_size"] == 6
        est2 = clone(est)
        assert est2.get_params() == params
        est2.set_params(momentum=0.5)
        assert est2.momentum == 0.5 and est.momentum == 0.9

    def test_unfitted_predict_raises(self):
        with pytest.raises(RuntimeError, match="fit"):
            fast_estimator().predict({"rgb": np.zeros((1, 5, 5))})


class TestFitPredict:
    def test_fit_learns_toy_task(self):
        x, y, xv, yv = toy_xy()
        est = fast_estimator(branch_epochs=10, fusion_epochs=5)
        est.fit(x, y, validation_data=(xv, yv))
        acc = est.score(x, y)
        assert acc > 0.5       # well above 1/3 chance
        assert set(est.predict(xv)) <= set(est.classes_)

    def test_predict_proba_shape_and_simplex(self):
        x, y, _, _ = toy_xy()
        est = fast_estimator().fit(x, y)
        proba = est.predict_proba(x)
        assert proba.shape == (len(y), 3)
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-9)

    def test_predict_timeline_shape(self):
        x, y, _, _ = toy_xy()
        est = fast_estimator().fit(x, y)
        timeline = est.predict_timeline(x)
        assert timeline.shape == (len(y), 3, 3)

    def test_anticipation_time_selects_step(self):
        x, y, _, _ = toy_xy()
        est = fast_estimator().fit(x, y)
        tl = est.predict_timeline(x)
        early = est.decision_function(x, anticipation_time=0.75)
        late = est.decision_function(x, anticipation_time=0.25)
        assert np.array_equal(early, tl[:, 0])
        assert np.array_equal(late, tl[:, -1])

    def test_label_remapping(self):
        x, y, _, _ = toy_xy()
        shifted = y * 10 + 5    # labels 5, 15, 25
        est = fast_estimator().fit(x, shifted)
        assert set(est.classes_) == {5, 15, 25}
        assert set(est.predict(x)) <= {5, 15, 25}

    def test_single_array_input(self):
        x, y, _, _ = toy_xy()
        est = fast_estimator(fusion="late").fit(x["rgb"], y)
        assert est.modalities_ == ["features"]
        assert est.predict(x["rgb"]).shape == y.shape

    def test_determinism(self):
        x, y, _, _ = toy_xy()
        a = fast_estimator().fit(x, y).predict_timeline(x)
        b = fast_estimator().fit(x, y).predict_timeline(x)
        assert np.array_equal(a, b)


class TestValidation:
    def test_wrong_steps_rejected(self):
        est = fast_estimator()
        with pytest.raises(ValueError, match="time-steps"):
            est.fit({"rgb": np.zeros((4, 9, 5))}, np.zeros(4, dtype=int))

    def test_inconsistent_modalities_rejected(self):
        x, y, _, _ = toy_xy()
        est = fast_estimator().fit(x, y)
        with pytest.raises(ValueError, match="modalities"):
            est.predict({"rgb": x["rgb"]})

    def test_non_finite_rejected(self):
        bad = np.zeros((2, 5, 4))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            fast_estimator().fit({"rgb": bad}, np.zeros(2, dtype=int))

    def test_label_length_mismatch(self):
        with pytest.raises(ValueError, match="y must"):
            fast_estimator().fit({"rgb": np.zeros((3, 5, 4))},
                                 np.zeros(2, dtype=int))

    def test_validation_labels_must_be_known(self):
        x, y, xv, yv = toy_xy()
        with pytest.raises(ValueError, match="never seen"):
            fast_estimator().fit(x, y, validation_data=(xv, yv + 100))
