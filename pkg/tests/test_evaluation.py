import numpy as np
import pytest
import torch
from PIL import Image

from advseg.core import CLASS_NAMES, IGNORE_INDEX, LabeledSample, SemanticClass, encode_mask
from advseg.evaluation import (
    GROUPS,
    ConditionReport,
    ConfusionMatrix,
    EmptyDataset,
    InvalidPrediction,
    NoDefinedClasses,
    ShapeMismatch,
    accumulate,
    evaluate,
    iou_per_class,
    miou,
    overlay,
    render_report,
    sample_groups,
)
from advseg.model import ForwardOutputs
from oracles import brute_force_iou, brute_force_miou

ROAD, SKY = int(SemanticClass.ROAD), int(SemanticClass.SKY)
PALETTE = torch.tensor(encode_mask(np.arange(10, dtype=np.uint8)[None])[0], dtype=torch.float32) / 255


class ColorOracle(torch.nn.Module):
    """Stand-in model that reads classes straight off palette-colored images."""

    def __init__(self, corrupt=None):
        super().__init__()
        self.corrupt = corrupt

    def forward(self, x, with_supervisors=False):
        d = ((x[:, None] - PALETTE[None, :, :, None, None]) ** 2).sum(2)
        logits = -d
        if self.corrupt is not None:
            logits = self.corrupt(logits)
        return ForwardOutputs(logits, x)


def _painted(mask, weather, time, sid):
    img = encode_mask(np.where(mask == IGNORE_INDEX, 0, mask)).astype(np.float32) / 255
    return LabeledSample(img, mask, weather, time, "adverse_synthetic", sid)


def test_all_road_counts():
    cm = accumulate(ConfusionMatrix(), np.zeros((2, 2)), np.zeros((2, 2)))
    expected = np.zeros((10, 10), np.int64)
    expected[ROAD, ROAD] = 4
    assert np.array_equal(cm.counts, expected)


def test_ignore_is_excluded():
    cm = accumulate(ConfusionMatrix(), np.zeros((2, 2)), np.full((2, 2), IGNORE_INDEX))
    assert cm == ConfusionMatrix()


def test_hand_worked_two_by_two():
    gt = np.array([[ROAD, ROAD], [SKY, SKY]])
    pred = np.full((2, 2), ROAD)
    iou = iou_per_class(accumulate(ConfusionMatrix(), pred, gt))
    assert iou[ROAD] == 0.5 and iou[SKY] == 0.0
    assert [i for i, v in enumerate(iou) if v is None] == [c for c in range(10) if c not in (ROAD, SKY)]
    assert miou(accumulate(ConfusionMatrix(), pred, gt)) == 0.25
    assert brute_force_miou([(pred, gt)]) == 0.25


def test_empty_matrix():
    assert iou_per_class(ConfusionMatrix()) == [None] * 10
    with pytest.raises(NoDefinedClasses):
        miou(ConfusionMatrix())


def test_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 10, (5, 5))
    cm = accumulate(ConfusionMatrix(), gt, gt)
    assert miou(cm) == 1.0
    assert all(v in (None, 1.0) for v in iou_per_class(cm))


def _random_pair(rng, n=8):
    gt = rng.integers(0, 10, (n, n))
    gt[rng.random((n, n)) < 0.15] = IGNORE_INDEX
    pred = np.where(rng.random((n, n)) < 0.5, gt, rng.integers(0, 10, (n, n)))
    pred[pred == IGNORE_INDEX] = 0
    return pred, gt


def test_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        pred, gt = _random_pair(rng)
        cm = accumulate(ConfusionMatrix(), pred, gt)
        got, ref = iou_per_class(cm), brute_force_iou([(pred, gt)])
        for a, b in zip(got, ref):
            assert (a is None) == (b is None)
            if a is not None:
                assert abs(a - b) <= 1e-9
        assert abs(miou(cm) - brute_force_miou([(pred, gt)])) <= 1e-9


def test_merge_is_additive():
    rng = np.random.default_rng(3)
    (pa, ga), (pb, gb) = _random_pair(rng), _random_pair(rng)
    zero = ConfusionMatrix()
    assert accumulate(zero, pa, ga).merge(accumulate(zero, pb, gb)) == accumulate(accumulate(zero, pa, ga), pb, gb)
    assert accumulate(zero, pa, ga) + zero == accumulate(zero, pa, ga)
    assert zero == ConfusionMatrix()  # accumulate leaves its input alone


def test_accumulate_errors():
    with pytest.raises(ShapeMismatch):
        accumulate(ConfusionMatrix(), np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(InvalidPrediction):
        accumulate(ConfusionMatrix(), np.full((2, 2), 10), np.zeros((2, 2)))
    with pytest.raises(InvalidPrediction):
        accumulate(ConfusionMatrix(), np.full((2, 2), IGNORE_INDEX), np.zeros((2, 2)))


@pytest.mark.parametrize("weather, time, groups", [
    ("normal", "day", ["standard"]),
    ("rain", "day", ["rain", "overall"]),
    ("normal", "night", ["night", "overall"]),
    ("snow", "night", ["snow", "night", "overall"]),
])
def test_group_membership(weather, time, groups):
    assert sample_groups(weather, time) == groups


def test_standard_only_dataset():
    s = _painted(np.zeros((4, 4), np.uint8), "normal", "day", "a")
    rep = evaluate(ColorOracle(), [s])
    assert rep.miou("standard") == 1.0
    assert all(rep.miou(g) is None and rep.groups[g].samples == 0 for g in ("rain", "fog", "snow", "night", "overall"))


def test_single_snow_sample_perfect():
    mask = np.random.default_rng(0).integers(0, 10, (6, 6)).astype(np.uint8)
    rep = evaluate(ColorOracle(), [_painted(mask, "snow", "day", "s")])
    assert rep.miou("snow") == 1.0 and rep.miou("overall") == 1.0 and rep.miou("standard") is None


def _mixed_dataset(rng, n=12):
    conds = [("normal", "day"), ("rain", "day"), ("fog", "night"), ("snow", "day"), ("normal", "night"), ("rain", "night")]
    out = []
    for i in range(n):
        m = rng.integers(0, 10, (8, 8)).astype(np.uint8)
        m[rng.random((8, 8)) < 0.1] = IGNORE_INDEX
        out.append(_painted(m, *conds[i % len(conds)], f"x{i:02d}"))
    return out


def _noisy(logits):
    g = torch.Generator().manual_seed(0)
    return logits + 0.6 * torch.randn(logits.shape, generator=g)


def test_group_pooling_matches_brute_force():
    rng = np.random.default_rng(5)
    data = _mixed_dataset(rng)
    model = ColorOracle(corrupt=_noisy)
    rep = evaluate(model, data, batch_size=len(data))
    x = torch.tensor(np.stack([s.image for s in data])).permute(0, 3, 1, 2)
    preds = model(x).seg_logits.argmax(1).numpy()
    for g in GROUPS:
        pairs = [(p, s.mask) for p, s in zip(preds, data) if g in sample_groups(s.weather, s.time)]
        if not pairs:
            assert rep.miou(g) is None
            continue
        assert rep.groups[g].samples == len(pairs)
        assert abs(rep.miou(g) - brute_force_miou(pairs)) <= 1e-9
    assert 0 < rep.miou("overall") < 1


def test_sample_order_does_not_matter():
    rng = np.random.default_rng(6)
    data = _mixed_dataset(rng)
    model = ColorOracle(corrupt=lambda lg: lg + 0.5 * torch.sin(37 * lg))
    a = evaluate(model, data).to_dict()
    b = evaluate(model, list(reversed(data))).to_dict()
    c = evaluate(model, [data[i] for i in rng.permutation(len(data))]).to_dict()
    assert a == b == c


def test_evaluate_empty():
    with pytest.raises(EmptyDataset):
        evaluate(ColorOracle(), [])


OURS = {"rain": 0.57, "fog": 0.60, "snow": 0.50, "night": 0.27, "overall": 0.49, "standard": 0.75}
OURS_CLASSES = [0.79, 0.40, 0.63, 0.25, 0.26, 0.33, 0.69, 0.66, 0.32, 0.52]


def test_report_row_from_published_values():
    rep = ConditionReport.from_values(OURS, {"overall": OURS_CLASSES})
    text = render_report({"Full-Model": rep})
    assert "| Full-Model | 0.57 | 0.60 | 0.50 | 0.27 | 0.49 | 0.75 |" in text.splitlines()
    assert text.splitlines()[0] == "| Model | Rain | Fog | Snow | Night | Overall | Standard |"
    per_class = [l for l in text.splitlines() if l.startswith("| Full-Model | 0.79")]
    assert per_class and per_class[0].startswith("| Full-Model | 0.79 | 0.40 | 0.63 |")
    assert per_class[0].endswith("| 0.49 |")


def test_report_csv():
    rep = ConditionReport.from_values(OURS)
    lines = render_report({"Ours": rep}, fmt="csv").splitlines()
    assert lines[0] == "Model,Rain,Fog,Snow,Night,Overall,Standard"
    assert lines[1] == "Ours,0.57,0.60,0.50,0.27,0.49,0.75"


def test_absent_cells_rendered_as_dash():
    rep = ConditionReport.from_values({"standard": 0.8})
    row = render_report([("m", rep)]).splitlines()[2]
    assert row == "| m | — | — | — | — | — | 0.80 |"


def test_empty_report_is_header_only():
    for fmt in ("md", "csv"):
        text = render_report([], fmt=fmt)
        assert "Rain" in text and "0." not in text
        assert len(text.strip().splitlines()) == (2 if fmt == "md" else 1)
    assert all(name in render_report({"m": ConditionReport.from_values(OURS)}) for name in CLASS_NAMES)


def test_report_rejects_unknown_format():
    with pytest.raises(ValueError):
        render_report([], fmt="xlsx")


def test_overlay(tmp_path):
    rng = np.random.default_rng(1)
    s = LabeledSample(rng.random((6, 9, 3)).astype(np.float32), np.zeros((6, 9), np.uint8), "rain", "day",
                      "adverse_synthetic", "o")
    pred = rng.integers(0, 10, (6, 9))
    a = overlay(s, pred, tmp_path / "a.png")
    b = overlay(s, pred, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()
    img = np.asarray(Image.open(a))
    assert img.shape == (6, 9, 3)
    expected = np.round(np.clip(0.5 * s.image + 0.5 * encode_mask(pred) / 255, 0, 1) * 255)
    assert np.abs(img.astype(int) - expected).max() <= 1
    with pytest.raises(InvalidPrediction):
        overlay(s, np.full((6, 9), IGNORE_INDEX), tmp_path / "c.png")
    with pytest.raises(ShapeMismatch):
        overlay(s, np.zeros((6, 8)), tmp_path / "d.png")
