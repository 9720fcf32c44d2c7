"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they are
also repeated in the terminal summary.  Criteria 6 and 7 share one desk-scale ladder
(4 modes x 3 seeds x 2000 iterations, roughly a quarter of an hour on one CPU core).
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from advseg.core import IGNORE_INDEX, DomainTag, TimeOfDay
from advseg.evaluation import ConditionReport, ConfusionMatrix, accumulate, iou_per_class, miou, render_report
from advseg.experiment import desk_data, run_ablation
from advseg.model import (
    ModelConfig,
    Partition,
    StageSpec,
    SupervisorConfig,
    build_model,
    named_parameters_of,
    parameter_digest,
    parameters_of,
)
from advseg.scenegen import GenerationPlan, SceneSpec, apply_time, apply_weather, generate_scene, plan_spec
from advseg.training import (
    AblationMode,
    TrainConfig,
    alternating_batches,
    new_state,
    train,
    train_step,
)
from oracles import brute_force_iou, brute_force_miou, central_difference, relative_error

RESULTS: list[str] = []

TOY = ModelConfig(
    input_resolution=(32, 32),
    backbone=(StageSpec(8, 2, 1), StageSpec(8, 2, 1), StageSpec(12, 2, 1), StageSpec(12, 2, 2)),
    aspp_rates=(1, 2),
    decoder_channels=8,
    low_level_channels=4,
    supervisor=SupervisorConfig(conv_channels=4, fc_widths=(16, 8)),
)


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} -- {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _toy_batch(seed, b=2, dtype=torch.float32):
    g = torch.Generator().manual_seed(1000 + seed)
    x = torch.rand(b, 3, 32, 32, generator=g, dtype=dtype)
    y = torch.randint(0, 10, (b, 32, 32), generator=g)
    y[torch.rand(b, 32, 32, generator=g) < 0.1] = IGNORE_INDEX
    return x, y, torch.randint(0, 4, (b,), generator=g), torch.randint(0, 2, (b,), generator=g)


def _toy_losses(model, x, y, w, t):
    out = model(x, with_supervisors=True)
    return {
        "seg": F.cross_entropy(out.seg_logits, y, ignore_index=IGNORE_INDEX),
        "was": F.cross_entropy(out.weather_logits, w),
        "tas": F.cross_entropy(out.time_logits, t),
    }


def _grads(loss, params):
    return [g if g is not None else torch.zeros_like(p)
            for g, p in zip(torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True), params)]


def test_criterion_1_gradient_routing():
    t0 = time.perf_counter()
    pairs, fd_checks, worst = 10, 0, 0.0
    problems = []
    for k in range(pairs):
        model = build_model(TOY, seed=k).double()
        batch = _toy_batch(k, dtype=torch.float64)
        losses = _toy_losses(model, *batch)
        for part in (Partition.WAS_HEAD, Partition.TAS_HEAD):
            if any(g.abs().max() > 0 for g in _grads(losses["seg"], parameters_of(model, part))):
                problems.append(f"pair {k}: seg loss reaches {part.value}")
        for name in ("was", "tas"):
            for part in (Partition.ENCODER_REST, Partition.DECODER):
                if any(g.abs().max() > 0 for g in _grads(losses[name], parameters_of(model, part))):
                    problems.append(f"pair {k}: {name} loss reaches {part.value}")
            if not any(g.abs().max() > 0 for g in _grads(losses[name], parameters_of(model, Partition.DCNN))):
                problems.append(f"pair {k}: {name} loss does not reach the DCNN")
        # finite differences: 5 sampled scalars per partition, against the loss that owns that partition
        owner = {Partition.DCNN: "seg", Partition.ENCODER_REST: "seg", Partition.DECODER: "seg",
                 Partition.WAS_HEAD: "was", Partition.TAS_HEAD: "tas"}
        rng = np.random.default_rng(k)
        for part in Partition:
            params = list(named_parameters_of(model, part).values())
            name = owner[part]
            grads = _grads(_toy_losses(model, *batch)[name], params)
            for _ in range(5):
                i = int(rng.integers(len(params)))
                j = int(rng.integers(params[i].numel()))
                auto = grads[i].reshape(-1)[j].item()
                fd = central_difference(lambda: _toy_losses(model, *batch)[name], params[i], j)
                err = relative_error(auto, fd)
                if abs(auto - fd) > 1e-9:  # both ~0: rounding noise of the difference quotient
                    if err >= 1e-3:
                        problems.append(f"pair {k}: {part.value} grad {auto:.3e} vs fd {fd:.3e}")
                if max(abs(auto), abs(fd)) > 1e-6:
                    worst = max(worst, err)
                fd_checks += 1
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 120
    record(1, "gradient routing", ok,
           f"{pairs} pairs, {fd_checks} finite-difference checks, worst rel err {worst:.1e}, "
           f"{elapsed:.1f}s" + (f"; {problems[:3]}" if problems else ""))


def _toy_samples(count, seed, domain):
    kw = {"weather_weights": {"normal": 1}, "time_weights": {"day": 1}} if domain == "standard_real" else {}
    plan = GenerationPlan(count, seed, template=SceneSpec(seed=0, resolution=(32, 32)), domain=domain,
                          id_prefix=f"{domain}_", **kw)
    return [generate_scene(plan_spec(plan, i), plan.domain, f"{plan.id_prefix}{i}") for i in range(count)]


def test_criterion_2_freeze_contract():
    t0 = time.perf_counter()
    config = TrainConfig(model=TOY, batch_size=2, iterations=20)
    real, synth = _toy_samples(8, 1, "standard_real"), _toy_samples(8, 2, "adverse_synthetic")
    state = new_state(config)
    stream = alternating_batches(real, synth, config.batch_size, config.seed)
    real_invariant, synth_changed, synth_steps = True, 0, 0
    heads_moved = {"standard_real": True, "adverse_synthetic": True}
    for _ in range(20):
        batch = next(stream)
        dcnn = parameter_digest(parameters_of(state.model, Partition.DCNN))
        heads = [parameter_digest(parameters_of(state.model, p)) for p in (Partition.WAS_HEAD, Partition.TAS_HEAD)]
        train_step(state, batch, config)
        dcnn_after = parameter_digest(parameters_of(state.model, Partition.DCNN))
        heads_after = [parameter_digest(parameters_of(state.model, p))
                       for p in (Partition.WAS_HEAD, Partition.TAS_HEAD)]
        dom = DomainTag(batch.domain).value
        heads_moved[dom] &= all(a != b for a, b in zip(heads, heads_after))
        if batch.domain is DomainTag.STANDARD_REAL:
            real_invariant &= dcnn == dcnn_after
        else:
            synth_steps += 1
            synth_changed += dcnn != dcnn_after
    elapsed = time.perf_counter() - t0
    ok = real_invariant and synth_changed >= 0.9 * synth_steps and all(heads_moved.values()) and elapsed < 60
    record(2, "freeze contract", ok,
           f"DCNN invariant on every real step: {real_invariant}; changed on {synth_changed}/{synth_steps} "
           f"synthetic steps; heads moved on real/synth: {heads_moved['standard_real']}/"
           f"{heads_moved['adverse_synthetic']}; {elapsed:.1f}s")


def test_criterion_3_composite_loss_identity():
    config = TrainConfig(model=TOY, batch_size=2, iterations=20)
    assert config.alpha == config.beta == 1e-5
    log = train(config, _toy_samples(6, 3, "standard_real"), _toy_samples(6, 4, "adverse_synthetic")).log
    worst = 0.0
    for r in log:
        expected = math.fsum([r.l_seg, config.alpha * r.l_was, config.beta * r.l_tas])
        worst = max(worst, abs(r.l_total - expected) / abs(expected))
    ok = len(log) == 20 and worst <= 1e-12 and all(r.l_was > 0 and r.l_tas > 0 for r in log)
    record(3, "composite loss identity", ok, f"{len(log)} logged steps, alpha=beta=1e-5, worst rel dev {worst:.1e}")


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        gt = rng.integers(0, 10, (8, 8))
        gt[rng.random((8, 8)) < 0.2] = IGNORE_INDEX
        pred = rng.integers(0, 10, (8, 8))
        cm = accumulate(ConfusionMatrix(), pred, gt)
        for a, b in zip(iou_per_class(cm), brute_force_iou([(pred, gt)])):
            if (a is None) != (b is None):
                worst = math.inf
            elif a is not None:
                worst = max(worst, abs(a - b))
        worst = max(worst, abs(miou(cm) - brute_force_miou([(pred, gt)])))
    hand = miou(accumulate(ConfusionMatrix(), np.zeros((2, 2), int), np.array([[0, 0], [7, 7]])))
    ok = worst <= 1e-9 and hand == 0.25
    record(4, "metric oracle", ok, f"100 random 8x8 pairs, max abs dev {worst:.1e}; 2x2 case mIoU = {hand}")


def test_criterion_5_scenegen_invariants():
    t0 = time.perf_counter()
    plan = GenerationPlan(200, 77, template=SceneSpec(seed=0, resolution=(128, 128)))
    specs = [plan_spec(plan, i) for i in range(200)]
    scenes = [generate_scene(s) for s in specs]
    gen_time = time.perf_counter() - t0

    # masks: every condition renders the same labels as its clear-day counterpart, and the
    # effect functions leave the mask they are handed untouched
    masks_ok = all(np.array_equal(s.mask, generate_scene(replace(sp, weather="normal", time="day",
                                                                 severity=0.0)).mask)
                   for s, sp in zip(scenes[:40], specs[:40]))
    for s in scenes[:20]:
        m = s.mask.copy()
        for w in ("normal", "rain", "fog", "snow"):
            img = apply_weather(s.image, m, w, 1.0, np.random.default_rng(0))
            apply_time(img, "night", np.random.default_rng(0))
        masks_ok &= np.array_equal(m, s.mask)

    # fog acts on the clear-day render (weather precedes night in generation); the grid
    # refines {0, 0.25, 0.5, 0.75, 1}
    grid = [i / 10 for i in range(11)]
    fog_ok = True
    for sp in specs:
        clear = generate_scene(replace(sp, weather="normal", time="day", severity=0.0))
        stds = [float(apply_weather(clear.image, clear.mask, "fog", v, np.random.default_rng(0))
                      .astype(np.float64).std()) for v in grid]
        fog_ok &= all(b <= a for a, b in zip(stds, stds[1:])) and stds[-1] < stds[0]

    def luma(img):
        return float((img @ np.array([0.299, 0.587, 0.114])).mean())

    nights = [(s, sp) for s, sp in zip(scenes, specs) if sp.time is TimeOfDay.NIGHT]
    night_ok = all(luma(s.image) < luma(generate_scene(replace(sp, time="day")).image) for s, sp in nights)

    again = [generate_scene(s) for s in specs[:50]]
    bytes_ok = all(a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
                   for a, b in zip(scenes, again))
    elapsed = time.perf_counter() - t0
    ok = masks_ok and fog_ok and night_ok and bytes_ok and gen_time < 120 and len(nights) > 0
    record(5, "scenegen invariants", ok,
           f"masks invariant: {masks_ok}; fog contrast monotone over 11 severities (200 scenes): {fog_ok}; "
           f"night darker than day for {len(nights)}/{len(nights)} night scenes: {night_ok}; "
           f"byte-deterministic: {bytes_ok}; 200 scenes at 128x128 in {gen_time:.1f}s (suite {elapsed:.1f}s)")


BASELINE = AblationMode.SCRATCH_REAL_ONLY
FULL = AblationMode.ALTERNATING_WEATHER_TIME_AWARE
LADDER = (AblationMode.ALTERNATING_NO_SUPERVISORS, AblationMode.ALTERNATING_WEATHER_AWARE, FULL)


@pytest.fixture(scope="module")
def ladder():
    t0 = time.perf_counter()
    data = desk_data(resolution=(64, 64), n_train=400, n_eval=100)
    base = TrainConfig(iterations=2000, checkpoint_every=0, model=ModelConfig(input_resolution=(64, 64)))
    outcome = run_ablation(base, data["real"], data["synth"], data["eval"],
                           modes=(BASELINE,) + LADDER, seeds=(0, 1, 2), progress=print)
    elapsed = time.perf_counter() - t0
    print(render_report(outcome.table(), row_header="Mode"))
    return outcome, elapsed


@pytest.mark.slow
def test_criterion_6_adverse_gain(ladder):
    outcome, elapsed = ladder
    gain = outcome.median(FULL, "overall") - outcome.median(BASELINE, "overall")
    cost = outcome.median(BASELINE, "standard") - outcome.median(FULL, "standard")
    ok = gain >= 0.03 and cost <= 0.05
    record(6, "desk-scale adverse gain", ok,
           f"median adverse mIoU {outcome.median(BASELINE, 'overall'):.3f} -> {outcome.median(FULL, 'overall'):.3f} "
           f"(gain {gain:+.3f}, need >= +0.03); standard {outcome.median(BASELINE, 'standard'):.3f} -> "
           f"{outcome.median(FULL, 'standard'):.3f} (drop {cost:.3f}, need <= 0.05); ladder {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_ablation_ordering(ladder):
    outcome, _ = ladder
    medians = [outcome.median(m, "overall") for m in LADDER]
    per_seed = {m.value: [round(r.miou("overall"), 4) for r in outcome.runs[m]] for m in LADDER}
    ok = all(b >= a for a, b in zip(medians, medians[1:]))
    record(7, "ablation ordering", ok,
           "median adverse mIoU " + " -> ".join(f"{v:.4f}" for v in medians) + f"; per seed {per_seed}")


def test_criterion_8_report_fidelity():
    rep = ConditionReport.from_values({"rain": 0.57, "fog": 0.60, "snow": 0.50, "night": 0.27,
                                       "overall": 0.49, "standard": 0.75})
    row = render_report({"Full-Model": rep}).splitlines()[2]
    expected = "| Full-Model | 0.57 | 0.60 | 0.50 | 0.27 | 0.49 | 0.75 |"
    record(8, "report fidelity", row == expected and "0.57 | 0.60 | 0.50 | 0.27 | 0.49 | 0.75" in row, repr(row))
