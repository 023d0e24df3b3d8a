import numpy as np
import pytest

from dara.data import RELATIONAL, make_dataset
from dara.errors import ConfigError, ContractError
from dara.gradcheck import finite_diff_check
from dara.model import BACKBONE_GROUPS, GroundingModel, ModelConfig, group_of
from dara.report import count_params
from dara.tensor import Tensor
from dara.train import (LossWeights, OptimState, TaskConfig, TrainPlan, adamw_step, evaluate,
                        format_metrics_csv, grounding_loss, lr_assigner, lr_at, pretrain,
                        regime_config, run_two_phase, smooth_l1, train)

TINY = ModelConfig.tiny()
TINY_TASK = TaskConfig(image_size=16, n_pretrain=24, n_train=24, n_test=12)


# -- losses -------------------------------------------------------------------


def test_smooth_l1_examples():
    gt = np.zeros(4)
    assert float(smooth_l1(Tensor(np.zeros(4)), gt).data) == 0.0
    assert float(smooth_l1(Tensor([0.5, 0, 0, 0]), gt).data) == 0.125
    assert float(smooth_l1(Tensor([2.0, 0, 0, 0]), gt).data) == 1.5
    with pytest.raises(ContractError):
        smooth_l1(Tensor(np.zeros(4)), gt, beta=0.0)


def test_grounding_loss_zero_at_target():
    box = np.array([0.3, 0.4, 0.2, 0.1])
    parts = grounding_loss(Tensor(box), box)
    assert float(parts.total.data) == 0.0


def test_disjoint_boxes_cost_more_than_one():
    parts = grounding_loss(Tensor([0.1, 0.1, 0.1, 0.1]), np.array([0.8, 0.8, 0.1, 0.1]))
    assert float(parts.giou.data) > 1.0
    assert float(parts.total.data) > 1.0


def test_loss_decomposition():
    rng = np.random.default_rng(0)
    pred = rng.uniform(0.2, 0.8, size=(5, 4))
    gt = rng.uniform(0.2, 0.8, size=(5, 4))
    w = LossWeights(l1=0.7, giou=2.0)
    parts = grounding_loss(Tensor(pred), gt, w)
    assert float(parts.total.data) == pytest.approx(
        0.7 * float(parts.l1.data) + 2.0 * float(parts.giou.data), abs=1e-15)
    assert float(parts.l1.data) >= 0 and 0 <= float(parts.giou.data) < 2
    with pytest.raises(ConfigError):
        LossWeights(l1=-1.0)


def test_grounding_loss_gradcheck():
    rng = np.random.default_rng(1)
    pred = Tensor(rng.uniform(0.3, 0.7, size=(3, 4)), requires_grad=True)
    gt = rng.uniform(0.3, 0.7, size=(3, 4))
    assert finite_diff_check(lambda: grounding_loss(pred, gt).total, [pred]) < 1e-6


# -- optimizer and schedule ---------------------------------------------------


def test_adamw_scalar_oracle():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0])
    st = OptimState()
    adamw_step({"p": p}, st)
    lr, wd, eps = 1e-4, 1e-4, 1e-8
    # m_hat = g and v_hat = g^2 after bias correction at step 1
    expected = 1.0 * (1 - lr * wd) - lr * 1.0 / (1.0 + eps)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    assert st.step == 1


def test_zero_gradient_shrinks_by_decay():
    p = Tensor([2.0, -3.0], requires_grad=True)
    p.grad = np.zeros(2)
    adamw_step({"p": p}, OptimState(lr=1e-2, weight_decay=0.1))
    np.testing.assert_array_equal(p.data, np.array([2.0, -3.0]) * (1 - 1e-2 * 0.1))


def test_twin_parameters_evolve_identically():
    a = Tensor([0.5, -0.2], requires_grad=True)
    b = Tensor([0.5, -0.2], requires_grad=True)
    st = OptimState(lr=1e-2)
    rng = np.random.default_rng(2)
    for _ in range(10):
        g = rng.normal(size=2)
        a.grad, b.grad = g.copy(), g.copy()
        adamw_step({"a": a, "b": b}, st)
    assert a.data.tobytes() == b.data.tobytes()


def test_frozen_parameter_untouched_and_missing_grad_rejected():
    frozen = Tensor([1.0], requires_grad=False)
    live = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        adamw_step({"live": live}, OptimState())
    live.grad = np.ones(1)
    adamw_step({"frozen": frozen, "live": live}, OptimState())
    assert frozen.data[0] == 1.0


def test_lr_schedule_examples():
    plan = TrainPlan()
    assert lr_at(0, plan) == (1e-4, 1e-5)
    assert lr_at(59, plan) == (1e-4, 1e-5)
    lm, lb = lr_at(60, plan)
    assert lm == pytest.approx(1e-5, abs=1e-20) and lb == pytest.approx(1e-6, abs=1e-21)
    assert lr_at(89, plan) == lr_at(60, plan)
    with pytest.raises(ContractError):
        lr_at(90, plan)


def test_plan_validation_and_scaling():
    assert TrainPlan.scaled(30).decay_epoch == 20
    with pytest.raises(ConfigError):
        TrainPlan(epochs=10, decay_epoch=10)
    with pytest.raises(ConfigError):
        TrainPlan(phase="warmup")
    with pytest.raises(ConfigError):
        TrainPlan(adapter_lr_mult=0.0)


def test_lr_assignment_by_group():
    plan = TrainPlan(adapter_lr_mult=3.0)
    lr_for = lr_assigner(plan, 1e-4, 1e-5)
    assert lr_for("vision.layers.0.mha.q.W") == 1e-5
    assert lr_for("adapters.da.vision.mha.0.up.W") == pytest.approx(3e-4)
    assert lr_for("fusion.0.ffn.fc1.W") == 1e-4
    lr_for = lr_assigner(plan.replace(adapter_lr="backbone"), 1e-4, 1e-5)
    assert lr_for("adapters.shared.ffn.0.W") == pytest.approx(3e-5)


# -- training -----------------------------------------------------------------


@pytest.mark.parametrize("cfg", [TINY.without_adapters().replace(freeze_backbones=False), TINY],
                         ids=["full", "dara"])
def test_overfit_single_batch(cfg):
    # one batch of four samples is one step per epoch; the schedule decays halfway
    samples = [s for s in make_dataset(0, 4, RELATIONAL, stream=3, image_size=16)]
    model = GroundingModel(cfg, 0)
    plan = TrainPlan(epochs=2000, decay_epoch=1000, lr_model=1e-3, lr_backbone=1e-3,
                     batch_size=len(samples))
    rows = train(model, samples, plan)
    assert min(r["loss"] for r in rows) < 1e-3


def test_regime_configs():
    assert regime_config(TINY, "frozen").slot_plan is None
    assert not regime_config(TINY, "full_ft").freeze_backbones
    assert regime_config(TINY, "da_only").mha_adapter == "da"
    assert regime_config(TINY, "da_only").ffn_adapter is None
    assert regime_config(TINY, "ra_only").ffn_adapter == "ra"
    assert regime_config(TINY.without_adapters(), "dara").slot_plan == "da_ra"
    with pytest.raises(ConfigError):
        regime_config(TINY, "half")


@pytest.fixture(scope="module")
def phase_a():
    plan = TrainPlan.scaled(2, lr_model=1e-3, batch_size=8, phase="pretrain")
    model, _ = pretrain(TINY, plan, TINY_TASK, 0)
    return plan, model


@pytest.mark.parametrize("regime", ["frozen", "da_only", "ra_only", "dara"])
def test_frozen_regimes_keep_backbones(phase_a, regime):
    plan_pre, base = phase_a
    plan = TrainPlan.scaled(2, lr_model=1e-3, batch_size=8)
    rec = run_two_phase(TINY, plan_pre, plan, regime, TINY_TASK, 0, pretrained=base)
    assert rec["backbone_unchanged"]
    cfg = regime_config(TINY, regime)
    report = count_params(cfg)
    adapters = report.group_total("da-adapters") + report.group_total("ra-adapters")
    assert rec["updated_backbone_params"] == adapters
    if regime == "frozen":
        assert rec["updated_backbone_params"] == 0


def test_full_ft_moves_backbones(phase_a):
    plan_pre, base = phase_a
    plan = TrainPlan.scaled(1, lr_model=1e-3, lr_backbone=1e-3, batch_size=8)
    rec = run_two_phase(TINY, plan_pre, plan, "full_ft", TINY_TASK, 0, pretrained=base)
    assert not rec["backbone_unchanged"]


def test_two_phase_is_deterministic(phase_a):
    plan_pre, base = phase_a
    plan = TrainPlan.scaled(1, lr_model=1e-3, batch_size=8)
    a = run_two_phase(TINY, plan_pre, plan, "dara", TINY_TASK, 0, pretrained=base)
    b = run_two_phase(TINY, plan_pre, plan, "dara", TINY_TASK, 0)
    assert format_metrics_csv(a["curves"]) == format_metrics_csv(b["curves"])
    assert a["acc_at_05"] == b["acc_at_05"]


def test_evaluate_oracle_and_purity(phase_a):
    _, model = phase_a
    samples = make_dataset(0, 6, RELATIONAL, stream=4, image_size=16)
    before = model.state_dict()
    r1, r2 = evaluate(model, samples), evaluate(model, samples)
    assert (r1.acc_at_05, r1.mean_iou, r1.loss) == (r2.acc_at_05, r2.mean_iou, r2.loss)
    for n, arr in model.state_dict().items():
        assert arr.tobytes() == before[n].tobytes()
    with pytest.raises(ContractError):
        evaluate(model, [])


class _Constant:
    """Stand-in predictor returning fixed boxes."""

    def __init__(self, boxes):
        self.boxes = boxes

    def __call__(self, images, ids):
        class Out:
            pass
        out = Out()
        out.box = Tensor(self.boxes[:len(images)])
        return out


def test_evaluate_perfect_and_constant_predictors():
    samples = [s for s in make_dataset(0, 8, RELATIONAL, stream=5)]
    gts = np.stack([s.gt_box for s in samples])
    assert evaluate(_Constant(gts), samples, batch_size=len(samples)).acc_at_05 == 1.0
    # a tiny box at the centre never overlaps a cell box by half
    centre = np.tile([0.5, 0.5, 0.01, 0.01], (len(samples), 1))
    assert evaluate(_Constant(centre), samples, batch_size=len(samples)).acc_at_05 == 0.0


def test_metrics_csv_header():
    row = dict(epoch=0, split="train", loss=1.0, l1_part=0.5, giou_part=0.5, acc_at_05=0.0,
               lr_model=1e-4, lr_backbone=1e-5)
    lines = format_metrics_csv([row]).splitlines()
    assert lines[0] == "# dara-metrics/1"
    assert lines[1] == "epoch,split,loss,l1_part,giou_part,acc_at_05,lr_model,lr_backbone"


def test_backbone_names_map_to_backbone_groups():
    model = GroundingModel(TINY, 0)
    for name, t in model.named_parameters():
        assert (group_of(name) in BACKBONE_GROUPS) == (not t.requires_grad)
