import numpy as np
import pytest

from timeweave import autodiff as ad
from timeweave import training as tr
from timeweave.config import ExperimentConfig
from timeweave.events import CohortSpec, EventWindow, synthesize_cohort
from timeweave.model import bce_loss, forward, init_model

TINY = dict(d_model=12, n_layers=1, d_state=6, expand=2, max_epochs=3,
            patience=2, lr=2e-3, budget=8, scales=(60.0, 120.0), t_max=480.0,
            seeds=(0,))


@pytest.fixture(scope="module")
def tiny_data():
    spec = CohortSpec(n_patients=120, prevalence=0.3, strength=0.8, seed=11,
                      t_max=480.0, n_vars=6, n_vital=3)
    return synthesize_cohort(spec)


def tiny_config(**kw):
    merged = dict(TINY)
    merged.update(kw)
    return ExperimentConfig(**merged)


def test_adamw_two_step_hand_trace():
    # scalar parameter, constant gradient 2.0; hand-computed decoupled update
    p = ad.parameter(1.0)
    opt = tr.AdamW({"p": p}, lr=0.1, weight_decay=0.01)
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8

    x, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        g = 2.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * (mh / (np.sqrt(vh) + eps) + wd * x)

        p.grad = np.array(2.0)
        opt.step()
        opt.zero_grad()
        assert p.data == pytest.approx(x, abs=1e-15)


def test_adamw_zero_lr_is_identity():
    p = ad.parameter(np.array([1.0, -2.0]))
    opt = tr.AdamW({"p": p}, lr=0.0, weight_decay=0.01)
    for _ in range(5):
        p.grad = np.array([3.0, -1.0])
        opt.step()
        opt.zero_grad()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_gradient_clipping_scales_global_norm():
    a = ad.parameter(np.zeros(3))
    b = ad.parameter(np.zeros(2))
    opt = tr.AdamW({"a": a, "b": b}, lr=0.1)
    a.grad = np.array([3.0, 0.0, 0.0])
    b.grad = np.array([0.0, 4.0])
    norm = opt.clip_gradients(0.5)
    assert norm == pytest.approx(5.0)
    total = np.sqrt((a.grad**2).sum() + (b.grad**2).sum())
    assert total == pytest.approx(0.5)


def test_zero_lr_leaves_parameters_unchanged(tiny_data):
    cfg = tiny_config(lr=1e-30, max_epochs=2)  # lr must be > 0; effectively zero
    splits = tr.make_splits(tiny_data, cfg)
    params = init_model(cfg, splits.train.n_vars, 0)
    before = params.copy_state()
    result = tr.train(splits, cfg, seed=0)
    after = result.params.copy_state()
    for k in before:
        assert np.allclose(before[k], after[k], atol=1e-20)


def test_one_batch_overfit(tiny_data):
    cfg = tiny_config(dropout=0.0, lr=5e-3)
    splits = tr.make_splits(tiny_data, cfg)
    idx = np.arange(32)
    batch = splits.train.batch(idx)
    # ensure both classes present
    assert 0 < batch.labels.sum() < 32
    params = init_model(cfg, splits.train.n_vars, 0)
    opt = tr.AdamW(params.tensors(), lr=cfg.lr, weight_decay=0.0)
    loss_val = None
    for step in range(200):
        res = forward(batch, params, cfg, training=True, rng=None)
        loss = bce_loss(res.logits, batch.labels)
        loss_val = loss.item()
        ad.backward(loss)
        opt.clip_gradients(5.0)
        opt.step()
        opt.zero_grad()
    assert loss_val < 0.05


def test_same_seed_bitwise_identical_metrics(tiny_data):
    cfg = tiny_config()
    splits = tr.make_splits(tiny_data, cfg)
    _, rep1 = tr.train_and_test(splits, cfg, seed=3)
    _, rep2 = tr.train_and_test(splits, cfg, seed=3)
    assert rep1.as_dict() == rep2.as_dict()


def test_early_stopping_restores_best_checkpoint(tiny_data):
    cfg = tiny_config(max_epochs=6, patience=2)
    splits = tr.make_splits(tiny_data, cfg)
    result = tr.train(splits, cfg, seed=1)
    best_from_log = max(r["val_auprc"] for r in result.log)
    assert result.best_val_auprc == pytest.approx(best_from_log)
    # restored params reproduce the best validation AUPRC
    rep = tr.evaluate(result.params, splits.val, cfg)
    assert rep.auprc == pytest.approx(result.best_val_auprc, abs=1e-12)


def test_divergence_aborts_with_last_good_state(tiny_data, monkeypatch):
    cfg = tiny_config(max_epochs=4)
    splits = tr.make_splits(tiny_data, cfg)
    calls = {"n": 0}
    real_loss = tr.bce_loss

    def poisoned(logits, labels):
        calls["n"] += 1
        if calls["n"] > 3:
            return ad.mul(real_loss(logits, labels), np.nan)
        return real_loss(logits, labels)

    monkeypatch.setattr(tr, "bce_loss", poisoned)
    result = tr.train(splits, cfg, seed=0)
    assert result.diverged
    for arr in result.params.copy_state().values():
        assert np.isfinite(arr).all()


def test_single_class_validation_rejected(tiny_data):
    cfg = tiny_config()
    splits = tr.make_splits(tiny_data, cfg)
    splits.val.labels[:] = 0.0
    with pytest.raises(ValueError, match="single-class"):
        tr.train(splits, cfg, seed=0)


def test_split_fractions_and_determinism(tiny_data):
    labels = [w.label for w in tiny_data]
    tr1 = tr.stratified_split(labels, 7)
    tr2 = tr.stratified_split(labels, 7)
    for a, b in zip(tr1, tr2):
        assert np.array_equal(a, b)
    train, val, test = tr1
    n = len(labels)
    assert not (set(train) & set(val) or set(val) & set(test) or set(train) & set(test))
    assert len(train) + len(val) + len(test) == n
    assert abs(len(train) / n - 0.70) < 0.05


def test_ablation_driver_structure(tiny_data):
    cfg = tiny_config(max_epochs=1, seeds=(0,))
    splits = tr.make_splits(tiny_data, cfg)
    rows = tr.run_ablation(splits, cfg)
    assert [label for label, _ in rows] == list(tr.ABLATION_VARIANTS)
    assert len(rows) == 6
    csv_rows = tr.results_csv_rows(rows)
    # per variant: one row per seed plus mean and std
    assert len(csv_rows) == 1 + 6 * 3


def test_ablation_full_variant_equals_plain_train(tiny_data):
    cfg = tiny_config(max_epochs=2, seeds=(0,))
    splits = tr.make_splits(tiny_data, cfg)
    rows = tr.run_ablation(splits, cfg, variants=["full"])
    _, plain = tr.train_and_test(splits, cfg, seed=0)
    assert rows[0][1][0].as_dict() == plain.as_dict()


def test_no_weaving_on_single_scale_is_identity(tiny_data):
    cfg = tiny_config(scales=(60.0,), max_epochs=2, seeds=(0,))
    splits = tr.make_splits(tiny_data, cfg)
    rows = tr.run_ablation(splits, cfg, variants=["full", "no_weaving"])
    full = rows[0][1][0].as_dict()
    nowv = rows[1][1][0].as_dict()
    assert full == nowv


def test_conflicting_ablation_flags_rejected(tiny_data):
    cfg = tiny_config(no_token_router=True)
    splits = tr.make_splits(tiny_data, cfg)
    with pytest.raises(ValueError, match="flags off"):
        tr.run_ablation(splits, cfg, variants=["full"])
    with pytest.raises(ValueError, match="unknown ablation"):
        tr.variant_config(tiny_config(), "bogus")


def test_sweep_budget_off_equals_no_router_ablation(tiny_data):
    cfg = tiny_config(max_epochs=2, seeds=(0,))
    splits = tr.make_splits(tiny_data, cfg)
    sweep_rows = tr.run_sweep(splits, cfg, "budget", ["off", 4])
    ablate_rows = tr.run_ablation(splits, cfg, variants=["no_token_router"])
    assert sweep_rows[0][1][0].as_dict() == ablate_rows[0][1][0].as_dict()
    assert sweep_rows[0][0] == "off" and sweep_rows[1][0] == "4"


def test_sweep_scales_rows(tiny_data):
    cfg = tiny_config(max_epochs=1, seeds=(0, 1))
    splits = tr.make_splits(tiny_data, cfg)
    rows = tr.run_sweep(splits, cfg, "scales", [(60.0,), (60.0, 120.0)])
    assert [r[0] for r in rows] == ["60", "60,120"]
    csv_rows = tr.results_csv_rows(rows)
    assert len(csv_rows) == 1 + 2 * (2 + 2)
    with pytest.raises(ValueError, match="empty"):
        tr.run_sweep(splits, cfg, "budget", [])


def test_normalization_invariance_under_affine_raw_transform(tiny_data):
    # scaling/shifting raw values identically across splits cancels in z-scoring
    cfg = tiny_config(max_epochs=2, seeds=(0,))
    splits_a = tr.make_splits(tiny_data, cfg)
    transformed = []
    scale = np.linspace(2.0, 5.0, tiny_data[0].n_vars)
    shift = np.linspace(-3.0, 3.0, tiny_data[0].n_vars)
    for w in tiny_data:
        transformed.append(EventWindow(
            values=w.values * scale + shift, mask=w.mask, times=w.times,
            gap=w.gap, label=w.label, t_max=w.t_max, patient_id=w.patient_id))
    splits_b = tr.make_splits(transformed, cfg)
    _, rep_a = tr.train_and_test(splits_a, cfg, seed=0)
    _, rep_b = tr.train_and_test(splits_b, cfg, seed=0)
    for k, v in rep_a.as_dict().items():
        assert rep_b.as_dict()[k] == pytest.approx(v, abs=1e-6)
