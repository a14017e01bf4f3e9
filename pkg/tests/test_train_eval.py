"""Target assignment, loss, optimizer, NMS/mAP scoring, and the data
generator's determinism."""

import numpy as np
import pytest

from mddcnet.tensor import Tensor
from mddcnet.model import Detection, MddcNet, variant_config, encode_box
from mddcnet.data import generate_scene, generate_split, NUM_CLASSES
from mddcnet.train import (Sgd, TrainConfig, assign_targets, cosine_lr,
                           detection_loss, route_level, stack_targets,
                           train_loop, TrainDivergence)
from mddcnet.eval import (average_precision, box_iou, compute_map, iou_matrix,
                          nms)
from mddcnet.verify import CHECKS

RNG = np.random.default_rng(8)


@pytest.mark.parametrize("name",
                         [n for n in CHECKS
                          if n.startswith(("eval.", "train."))])
def test_registered_properties(name):
    CHECKS[name](np.random.default_rng(0))


# -- data ---------------------------------------------------------------------

def test_scene_is_pure_function_of_seed():
    a = generate_scene(123)
    b = generate_scene(123)
    assert np.array_equal(a.image, b.image) and a.annotations == b.annotations
    c = generate_scene(124)
    assert not np.array_equal(a.image, c.image)


def test_scene_contract():
    for seed in range(20):
        s = generate_scene(seed)
        assert s.image.shape == (3, 64, 64)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        for cls, (x1, y1, x2, y2) in s.annotations:
            assert 0 <= cls < NUM_CLASSES
            assert 0.0 <= x1 < x2 <= 64.0 and 0.0 <= y1 < y2 <= 64.0


def test_split_seeds_are_consecutive():
    scenes = generate_split(500, 4)
    assert [s.seed for s in scenes] == [500, 501, 502, 503]


# -- assignment ---------------------------------------------------------------

def test_route_level_thresholds_scale_with_input():
    # at 640: <32 -> P3, <96 -> P4, else P5; at 64 the cuts are 3.2 / 9.6
    assert route_level((0, 0, 30, 30), 640, (8, 16, 32)) == 0
    assert route_level((0, 0, 60, 60), 640, (8, 16, 32)) == 1
    assert route_level((0, 0, 200, 200), 640, (8, 16, 32)) == 2
    assert route_level((0, 0, 3, 3), 64, (8, 16, 32)) == 0
    assert route_level((0, 0, 20, 20), 64, (8, 16, 32)) == 2


def test_assignment_cells_can_reach_iou_one():
    # every assigned cell must have its center strictly inside its box,
    # except the nearest-cell fallback (which has no inside cell anywhere)
    for seed in range(30):
        s = generate_scene(seed)
        for li, (tgt, stride) in enumerate(zip(assign_targets(s.annotations, 64),
                                               (8, 16, 32))):
            ys, xs = np.nonzero(tgt.obj > 0)
            for y, x in zip(ys, xs):
                x1, y1, x2, y2 = tgt.box[:, y, x]
                cy, cx = (y + 0.5) * stride, (x + 0.5) * stride
                inside = y1 < cy < y2 and x1 < cx < x2
                if not inside:
                    assert li == 0   # only the fallback lands outside
                    assert min(x2 - x1, y2 - y1) <= stride


def test_assignment_contested_cell_goes_to_smaller_box():
    # both end up on the stride-8 grid: the small one routes there directly,
    # the big one descends after the coarser grids have no center inside it
    big = (0, (2.0, 2.0, 7.0, 7.0))
    small = (1, (3.0, 3.0, 6.0, 6.0))
    tgt = assign_targets([big, small], 64)[0]
    assert tgt.cls[0, 0] == 1          # contested cell goes to the smaller box


def test_assignment_rejects_degenerate_boxes():
    with pytest.warns(UserWarning):
        levels = assign_targets([(0, (10.0, 10.0, 10.0, 20.0))], 64)
    assert all(t.obj.sum() == 0 for t in levels)


def test_stack_targets_shapes():
    scenes = [generate_scene(i) for i in range(3)]
    batched = stack_targets([assign_targets(s.annotations, 64) for s in scenes])
    assert batched[0].obj.shape == (3, 8, 8)
    assert batched[1].box.shape == (3, 4, 4, 4)
    assert batched[2].cls.shape == (3, 2, 2)


# -- loss ---------------------------------------------------------------------

def _fake_preds(targets, dtype=np.float64, perfect=False, strides=(8, 16, 32)):
    preds = []
    for tgt, stride in zip(targets, strides):
        n, h, w = tgt.obj.shape
        cls_t = np.zeros((n, NUM_CLASSES, h, w))
        obj_t = np.where(tgt.obj > 0, 8.0, -8.0)[:, None] if perfect \
            else np.zeros((n, 1, h, w))
        box_t = np.zeros((n, 4, h, w))
        if perfect:
            ni, yi, xi = np.nonzero(tgt.obj > 0)
            for b, y, x in zip(ni, yi, xi):
                cls_t[b, tgt.cls[b, y, x], y, x] = 12.0
                cls_t[b, :, y, x] -= 6.0
                box_t[b, :, y, x] = encode_box(tgt.box[b, :, y, x],
                                               (y + 0.5) * stride,
                                               (x + 0.5) * stride, stride)
        preds.append((Tensor(cls_t), Tensor(obj_t), Tensor(box_t)))
    return preds


def test_perfect_predictions_have_near_zero_loss():
    scenes = [generate_scene(i) for i in range(2)]
    targets = stack_targets([assign_targets(s.annotations, 64) for s in scenes])
    losses = detection_loss(_fake_preds(targets, perfect=True), targets)
    assert float(losses["iou"].data) < 1e-6
    assert float(losses["obj"].data) < 1e-3
    assert float(losses["cls"].data) < 1e-2   # +/-6 logits leave ~2e-3 BCE


def test_loss_composition_rule():
    scenes = [generate_scene(5)]
    targets = stack_targets([assign_targets(scenes[0].annotations, 64)])
    L = detection_loss(_fake_preds(targets), targets)
    total = float(L["obj"].data) + float(L["cls"].data) + 2 * float(L["iou"].data)
    assert abs(float(L["total"].data) - total) < 1e-12


def test_loss_with_no_objects_is_pure_objectness():
    targets = stack_targets([assign_targets([], 64)])
    L = detection_loss(_fake_preds(targets), targets)
    assert float(L["cls"].data) == 0.0 and float(L["iou"].data) == 0.0
    assert float(L["total"].data) == float(L["obj"].data)


# -- optimizer / schedule -----------------------------------------------------

def test_sgd_clips_global_norm():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.full(4, 100.0)
    opt = Sgd([p], momentum=0.0, clip_norm=1.0)
    norm = opt.step(lr=1.0)
    assert abs(norm - 200.0) < 1e-9
    assert abs(np.linalg.norm(p.data) - 1.0) < 1e-9


def test_sgd_momentum_accumulates():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = Sgd([p], momentum=0.5, clip_norm=1e9)
    p.grad = np.ones(1)
    opt.step(0.1)          # v = 1,    p = -0.1
    p.grad = np.ones(1)
    opt.step(0.1)          # v = 1.5,  p = -0.25
    assert abs(p.data[0] + 0.25) < 1e-12


def test_cosine_schedule_endpoints():
    assert abs(cosine_lr(0, 100, 0.1, 0.001) - 0.1) < 1e-12
    assert abs(cosine_lr(99, 100, 0.1, 0.001) - 0.001) < 1e-12
    mid = cosine_lr(50, 101, 0.1, 0.001)
    assert 0.04 < mid < 0.06


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


def test_train_divergence_raised_on_nan():
    model = MddcNet(variant_config("n-toy"), np.random.default_rng(0))
    next(iter(model.parameters())).data[:] = np.nan
    cfg = TrainConfig(epochs=1, train_scenes=8, val_scenes=0, eval_every=100)
    with pytest.raises(TrainDivergence):
        train_loop(model, cfg, fixed_batch=generate_split(0, 8))


# -- eval ---------------------------------------------------------------------

def test_box_iou_known_values():
    assert box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert box_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0


def test_iou_matrix_matches_scalar():
    a = RNG.uniform(0, 50, (6, 4))
    b = RNG.uniform(0, 50, (5, 4))
    a[:, 2:] += a[:, :2]
    b[:, 2:] += b[:, :2]
    m = iou_matrix(a, b)
    for i in range(6):
        for j in range(5):
            assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-12)


def test_nms_suppresses_within_class_only():
    dets = [Detection(0, 0.9, (0, 0, 10, 10)),
            Detection(0, 0.8, (1, 1, 11, 11)),     # IoU ~0.68 with first
            Detection(1, 0.7, (0, 0, 10, 10)),     # other class survives
            Detection(0, 0.6, (30, 30, 40, 40))]
    kept = nms(dets, iou_threshold=0.45, score_threshold=0.25)
    assert [(d.class_id, d.score) for d in kept] == [(0, 0.9), (1, 0.7),
                                                     (0, 0.6)]


def test_nms_score_threshold():
    dets = [Detection(0, 0.2, (0, 0, 10, 10))]
    assert nms(dets, score_threshold=0.25) == []
    assert len(nms(dets, score_threshold=0.1)) == 1


def test_average_precision_extremes():
    assert average_precision([], 0) == 1.0
    assert average_precision([(0.9, False)], 0) == 0.0
    assert average_precision([], 3) == 0.0
    assert average_precision([(0.9, True)], 1) == pytest.approx(1.0)


def test_map_perfect_predictions():
    gts = [[(0, (5.0, 5.0, 20.0, 20.0)), (1, (30.0, 30.0, 50.0, 55.0))]]
    preds = [[Detection(0, 0.9, (5.0, 5.0, 20.0, 20.0)),
              Detection(1, 0.8, (30.0, 30.0, 50.0, 55.0))]]
    m = compute_map(preds, gts)
    assert m["map50"] == pytest.approx(1.0)
    assert m["map50_95"] == pytest.approx(1.0)


def test_map_penalizes_high_scored_false_positive():
    gts = [[(0, (0.0, 0.0, 10.0, 10.0))]]
    preds = [[Detection(0, 0.9, (40.0, 40.0, 50.0, 50.0)),   # confident miss
              Detection(0, 0.8, (0.0, 0.0, 10.0, 10.0))]]
    m = compute_map(preds, gts)
    assert m["map50"] == pytest.approx(0.5, abs=0.01)


def test_map_alignment_check():
    with pytest.raises(ValueError):
        compute_map([[]], [[], []])
