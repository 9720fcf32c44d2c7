import numpy as np
import pytest
import torch
import torch.nn.functional as F

from advseg.model import (
    CheckpointMismatch,
    ConfigError,
    ModelConfig,
    Partition,
    ShapeError,
    StageSpec,
    SupervisorConfig,
    UnknownPartition,
    build_model,
    load_checkpoint,
    named_parameters_of,
    parameter_digest,
    parameters_of,
    save_checkpoint,
)
from oracles import central_difference, relative_error

TINY = ModelConfig(
    input_resolution=(32, 32),
    backbone=(StageSpec(8, 2, 1), StageSpec(8, 2, 1), StageSpec(12, 2, 1), StageSpec(12, 2, 2)),
    aspp_rates=(1, 2),
    decoder_channels=8,
    low_level_channels=4,
    supervisor=SupervisorConfig(conv_channels=4, fc_widths=(16, 8)),
)


def _losses(model, x, y, w, t):
    out = model(x, with_supervisors=True)
    return {
        "seg": F.cross_entropy(out.seg_logits, y, ignore_index=255),
        "was": F.cross_entropy(out.weather_logits, w),
        "tas": F.cross_entropy(out.time_logits, t),
    }


def _batch(seed, b=2, res=(32, 32), dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(b, 3, *res, generator=g, dtype=dtype)
    y = torch.randint(0, 10, (b, *res), generator=g)
    y[:, :2] = 255
    return x, y, torch.randint(0, 4, (b,), generator=g), torch.randint(0, 2, (b,), generator=g)


def test_default_partition_complete_and_disjoint():
    model = build_model()
    sizes = {p: sum(t.numel() for t in parameters_of(model, p)) for p in Partition}
    assert all(n > 0 for n in sizes.values())
    assert sum(sizes.values()) == sum(t.numel() for t in model.parameters())
    ids = [id(t) for p in Partition for t in parameters_of(model, p)]
    assert len(ids) == len(set(ids)) == len(list(model.parameters()))


def test_seeded_init():
    a, b, c = build_model(TINY, seed=3), build_model(TINY, seed=3), build_model(TINY, seed=4)
    assert parameter_digest(a.parameters()) == parameter_digest(b.parameters())
    assert parameter_digest(a.parameters()) != parameter_digest(c.parameters())


def test_build_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model(TINY, seed=99)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("kw, name", [
    ({"supervisor": SupervisorConfig(fc_widths=(0, 64))}, "supervisor.fc_widths"),
    ({"input_resolution": (120, 128)}, "backbone"),
    ({"aspp_rates": ()}, "aspp_rates"),
    ({"backbone": (StageSpec(8, 3, 1),)}, "backbone[0].stride"),
    ({"decoder_channels": 0}, "decoder_channels"),
])
def test_config_errors(kw, name):
    with pytest.raises(ConfigError) as e:
        build_model(ModelConfig(**kw))
    assert e.value.field == name


def test_config_dict_round_trip():
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_forward_shapes_batch_of_four():
    model = build_model(ModelConfig(input_resolution=(128, 128)))
    out = model(torch.rand(4, 3, 128, 128), with_supervisors=True)
    assert out.seg_logits.shape == (4, 10, 128, 128)
    assert out.weather_logits.shape == (4, 4)
    assert out.time_logits.shape == (4, 2)
    assert out.dcnn_features.shape == (4, 64, 8, 8)


def test_inference_skips_supervisors():
    model = build_model(TINY)
    calls = []
    model.was.register_forward_hook(lambda *a: calls.append("was"))
    model.tas.register_forward_hook(lambda *a: calls.append("tas"))
    out = model(torch.rand(2, 3, 32, 32))
    assert out.weather_logits is None and out.time_logits is None
    assert calls == []
    model(torch.rand(2, 3, 32, 32), with_supervisors=True, heads=("was",))
    assert calls == ["was"]


def test_zero_input_is_finite():
    model = build_model(TINY)
    out = model(torch.zeros(2, 3, 32, 32), with_supervisors=True)
    for t in (out.seg_logits, out.weather_logits, out.time_logits):
        assert torch.isfinite(t).all()
    model.eval()
    assert torch.isfinite(model(torch.zeros(1, 3, 32, 32)).seg_logits).all()


def test_resolution_mismatch():
    with pytest.raises(ShapeError):
        build_model(TINY)(torch.rand(1, 3, 64, 64))
    with pytest.raises(ShapeError):
        build_model(TINY)(torch.rand(3, 32, 32))


def test_unknown_partition():
    with pytest.raises(UnknownPartition):
        parameters_of(build_model(TINY), "Backbone2")
    assert parameters_of(build_model(TINY), "WASHead")


def test_supervisor_flatten_dim():
    assert TINY.supervisor_flatten_dim() == 4 * (2 + 16) * (2 + 16)
    model = build_model(TINY)
    feats = torch.rand(2, 12, 2, 2)
    first = model.was.convs[0](feats)
    assert first.shape[-2:] == (2 + 8, 2 + 8)
    assert model.was.convs(feats).shape == (2, 4, 18, 18)
    assert model.was.fc[0].in_features == TINY.supervisor_flatten_dim()
    heads = [m for m in model.was.fc if isinstance(m, torch.nn.Linear)]
    assert len(heads) == 3 and heads[-1].out_features == 4
    assert [m.out_features for m in model.tas.fc if isinstance(m, torch.nn.Linear)][-1] == 2


def test_supervisor_heads_use_literal_atrous_geometry():
    conv = build_model(TINY).tas.convs[0][0]
    assert conv.kernel_size == (3, 3) and conv.dilation == (2, 2) and conv.padding == (6, 6)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_reach(seed):
    model = build_model(TINY, seed=seed)
    losses = _losses(model, *_batch(seed))
    reach = {
        "seg": {Partition.DCNN, Partition.ENCODER_REST, Partition.DECODER},
        "was": {Partition.DCNN, Partition.WAS_HEAD},
        "tas": {Partition.DCNN, Partition.TAS_HEAD},
    }
    for name, loss in losses.items():
        for part in Partition:
            params = parameters_of(model, part)
            grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
            nonzero = any(g is not None and bool(g.abs().max() > 0) for g in grads)
            assert nonzero == (part in reach[name]), (name, part)


def test_autodiff_matches_finite_differences():
    model = build_model(TINY, seed=1).double()
    x, y, w, t = _batch(1, dtype=torch.float64)
    rng = np.random.default_rng(0)
    checked = 0
    for name in ("seg", "was", "tas"):
        for part in Partition:
            named = named_parameters_of(model, part)
            params = list(named.values())
            grads = torch.autograd.grad(_losses(model, x, y, w, t)[name], params, allow_unused=True)
            for _ in range(5):
                k = int(rng.integers(len(params)))
                idx = int(rng.integers(params[k].numel()))
                auto = 0.0 if grads[k] is None else grads[k].reshape(-1)[idx].item()
                fd = central_difference(lambda: _losses(model, x, y, w, t)[name], params[k], idx)
                assert relative_error(auto, fd) < 1e-3 or abs(auto - fd) < 1e-9, (name, part, auto, fd)
                checked += 1
    assert checked == 75


def test_checkpoint_round_trip(tmp_path):
    model = build_model(TINY, seed=2)
    model(torch.rand(2, 3, 32, 32))  # move BN running stats off their defaults
    path = save_checkpoint(tmp_path / "m.pt", model, iteration=17, extra={"note": "x"})
    ckpt = load_checkpoint(path, expected_config=TINY)
    assert ckpt.iteration == 17 and ckpt.extra == {"note": "x"}
    for (n1, a), (n2, b) in zip(model.state_dict().items(), ckpt.model.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)
    payload = torch.load(path, weights_only=True)
    assert set(payload["parameters"]) == {p.value for p in Partition}
    assert all(k.startswith("was.") for k in payload["parameters"]["WASHead"])


def test_checkpoint_config_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.pt", build_model(TINY), iteration=0)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, expected_config=ModelConfig(input_resolution=(64, 64)))
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "junk.pt")
