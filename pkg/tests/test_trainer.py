from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import DESK_CONFIG
from spacte import config as config_mod
from spacte.data import synthetic_blobs
from spacte.errors import ConfigError, TrainingError
from spacte.losses import VariantConfig, circular_shift, spl_weight
from spacte.model import build_network, desk_cnn, mlp, parameter_vector
from spacte.schedule import LrSchedule
from spacte.trainer import (
    TrainConfig,
    init_state,
    initial_smoothed_loss,
    iteration_objective,
    load_checkpoint,
    make_optimizer,
    read_checkpoint_header,
    sample_deltas,
    save_checkpoint,
    train,
    train_iteration,
)


def small_cfg(**kw):
    base = dict(sigma=0.25, epochs=4, batch_size=25, lr=LrSchedule(initial=0.05, period=10), checkpoint_every=2)
    base.update(kw)
    return TrainConfig(**base)


def blobs(count=100, dim=6):
    return synthetic_blobs(dim, separation=0.6, spread=0.08, count=count, seed=0)


def grads(net):
    return {n: p.grad.detach().clone() for n, p in net.named_parameters() if p.grad is not None}


def batch(dim=6, n=8, shape=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, *(shape or (dim,)), generator=g, dtype=torch.float64)
    y = torch.randint(0, 2, (n,), generator=g)
    return x, y


@pytest.mark.parametrize("spec", [mlp(6, 2, num_heads=1), desk_cnn(1, 2, (3, 8, 8))])
def test_degenerate_matches_gaussian_baseline(spec):
    cfg = small_cfg(cosine=False)
    x, y = batch(shape=spec.input_shape)
    deltas = sample_deltas(x, 2, cfg.sigma, torch.Generator().manual_seed(1))

    net = build_network(spec, seed=0).double().train()
    obj, _ = iteration_objective(net, x, y, deltas, 1.0, cfg, torch.Generator(), nu_override=1.0)
    obj.backward()
    ours = grads(net)

    base = build_network(spec, seed=0).double().train()
    noisy = (x.unsqueeze(0) + deltas).reshape(-1, *x.shape[1:])
    F.cross_entropy(base(noisy)[:, 0], y.repeat(2)).backward()
    theirs = grads(base)
    assert ours.keys() == theirs.keys()
    for name in ours:
        assert torch.allclose(ours[name], theirs[name], rtol=0, atol=1e-12), name


def test_uniform_weights_equal_unweighted_mean():
    spec = mlp(6, 2, num_heads=3)
    cfg = small_cfg(epsilon=2 / 3)
    x, y = batch()
    deltas = sample_deltas(x, 2, cfg.sigma, torch.Generator().manual_seed(1))
    net = build_network(spec, seed=0).double()
    obj, log = iteration_objective(net, x, y, deltas, 1.0, cfg, torch.Generator(), nu_override=1.0)
    obj.backward()
    ours = grads(net)

    ref = build_network(spec, seed=0).double()
    logits = ref((x.unsqueeze(0) + deltas).reshape(-1, 6))
    ce = torch.stack([F.cross_entropy(logits[:, k], y.repeat(2)) for k in range(3)]).mean()
    vecs = [torch.cat([p.reshape(-1) for p in h.parameters()]) for h in ref.heads]
    cos = sum((vecs[i] @ vecs[j]) ** 2 / (vecs[i].norm() * vecs[j].norm())
              for i in range(3) for j in range(3) if i != j)
    # uniform omega is 1/L, so the weighted objective is the unweighted head mean scaled by 1/L
    (ce / 3 + cos).backward()
    for name, g in grads(ref).items():
        assert torch.allclose(ours[name], g, rtol=1e-10, atol=1e-12), name
    assert log.cosine_loss == pytest.approx(float(cos.detach()), rel=1e-10)


def test_nu_log_cross_check():
    cfg = small_cfg()
    net = build_network(mlp(6, 2, num_heads=3), seed=2).double()
    x, y = batch()
    deltas = sample_deltas(x, 3, cfg.sigma, torch.Generator().manual_seed(3))
    lam = 0.6
    _, log = iteration_objective(net, x, y, deltas, lam, cfg, torch.Generator())
    with torch.no_grad():
        logits = net((x.unsqueeze(0) + deltas).reshape(-1, 6)).view(3, 8, 3, 2)
        ce = torch.logsumexp(logits, -1) - logits.gather(-1, y.view(1, 8, 1, 1).expand(3, 8, 3, 1)).squeeze(-1)
    smoothed = ce.mean(0)
    assert torch.allclose(log.nu, spl_weight(smoothed, lam), atol=1e-12)
    assert torch.equal(log.nu_shifted, circular_shift(log.nu))
    assert torch.equal(log.nu_shifted[:, 0], log.nu[:, 2])
    assert np.allclose(log.easy_fraction, (smoothed <= lam).double().mean(0).numpy())
    assert log.omega_argmin == int(np.argmin(smoothed.mean(0).numpy()))


def test_zero_sigma_smoothed_equals_clean():
    cfg = small_cfg(sigma=0.0, draws=4)
    net = build_network(mlp(6, 2, num_heads=2), seed=0).double()
    x, y = batch()
    deltas = sample_deltas(x, 4, 0.0, torch.Generator())
    _, log = iteration_objective(net, x, y, deltas, 1.0, cfg, torch.Generator())
    with torch.no_grad():
        clean = F.cross_entropy(net(x)[:, 0], y)
    assert log.smoothed_loss[0] == pytest.approx(float(clean), abs=1e-12)


def test_iterations_deterministic():
    cfg = small_cfg()
    x, y = batch()
    x = x.float()
    vecs = []
    for _ in range(2):
        state = init_state(mlp(6, 2, num_heads=3), cfg)
        for it in range(3):
            train_iteration(state, x, y, 1.0, cfg, torch.Generator().manual_seed(it))
        vecs.append(parameter_vector(state.network))
    assert torch.equal(vecs[0], vecs[1])


def test_non_finite_loss_reports_head_and_sample():
    cfg = small_cfg()
    state = init_state(mlp(6, 2, num_heads=3), cfg)
    with torch.no_grad():
        state.network.heads[1][-1].bias[0] = float("inf")
    x, y = batch()
    with pytest.raises(TrainingError, match="head 2, sample 0"):
        train_iteration(state, x.float(), y, 1.0, cfg, torch.Generator())


@pytest.mark.parametrize("variant", [VariantConfig("consistency"), VariantConfig("smoothmix", steps=2)])
def test_variants_take_a_step(variant):
    cfg = small_cfg(variant=variant)
    state = init_state(mlp(6, 2, num_heads=3), cfg)
    before = parameter_vector(state.network).clone()
    x, y = batch()
    log = train_iteration(state, x.float(), y, 1.0, cfg, torch.Generator().manual_seed(0))
    assert np.isfinite(log.objective)
    assert not torch.equal(before, parameter_vector(state.network))


def test_optimizer_groups():
    net = build_network(desk_cnn(2, 10, (3, 8, 8)), seed=0)
    opt = make_optimizer(net, LrSchedule())
    decayed = {id(p) for p in opt.param_groups[0]["params"]}
    for name, module in net.named_modules():
        if isinstance(module, torch.nn.BatchNorm2d):
            assert id(module.weight) not in decayed and id(module.bias) not in decayed
    assert opt.param_groups[0]["weight_decay"] == 1e-4
    assert opt.defaults["nesterov"] and opt.defaults["momentum"] == 0.9


def test_zero_epochs_unchanged():
    cfg = small_cfg(epochs=0)
    state, report = train(mlp(6, 2, num_heads=2), cfg, blobs())
    assert report.iterations == 0 and report.epochs_run == 0
    fresh = build_network(mlp(6, 2, num_heads=2), cfg.seed)
    assert torch.equal(parameter_vector(state.network), parameter_vector(fresh))


def test_resume_is_bit_identical(tmp_path):
    spec, data = mlp(6, 2, num_heads=3), blobs(120)
    cfg = small_cfg(epochs=20, checkpoint_every=10)
    full, _ = train(spec, cfg, data)
    train(spec, cfg, data, checkpoint_dir=tmp_path, stop_after=10)
    assert (tmp_path / "epoch_0010.ckpt").exists()
    resumed, report = train(spec, cfg, data, resume_from=tmp_path / "epoch_0010.ckpt")
    assert report.epochs_run == 20
    assert torch.equal(parameter_vector(full.network), parameter_vector(resumed.network))
    for a, b in zip(full.network.state_dict().values(), resumed.network.state_dict().values()):
        assert torch.equal(a, b)
    assert full.history == resumed.history


def test_resume_rejects_other_architecture(tmp_path):
    cfg = small_cfg(epochs=2)
    train(mlp(6, 2, num_heads=3), cfg, blobs(), checkpoint_dir=tmp_path)
    with pytest.raises(ConfigError):
        train(mlp(6, 2, num_heads=2), cfg, blobs(), resume_from=tmp_path / "final.ckpt")


def test_checkpoint_round_trip(tmp_path):
    spec, cfg = desk_cnn(2, 10, (3, 8, 8)), small_cfg()
    state = init_state(spec, cfg)
    x = torch.rand(4, 3, 8, 8)
    train_iteration(state, x, torch.tensor([0, 1, 2, 3]), 1.0, cfg, torch.Generator())
    state.epoch = 3
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, state, spec, cfg, {"note": "x"})
    header, _ = read_checkpoint_header(path)
    assert header["format_version"] == 1 and header["epoch"] == 3 and header["note"] == "x"
    assert header["train_config_sha256"] == cfg.digest()
    back, spec2, _ = load_checkpoint(path, cfg)
    assert spec2 == spec
    for (k, a), b in zip(state.network.state_dict().items(), back.network.state_dict().values()):
        assert torch.equal(a, b), k
    save_checkpoint(tmp_path / "d.ckpt", back, spec, cfg, {"note": "x"})
    assert path.read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_checkpoint_header(tmp_path / "bad.ckpt")


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(sigma=0.25, epsilon=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(sigma=0.25, draws=0)


def test_desk_loss_halves():
    cfg = config_mod.load_config(DESK_CONFIG, env={})
    spec, tcfg = cfg.architecture(), cfg.train_config()
    data = synthetic_blobs(cfg["data.dim"], 2, cfg["data.separation"], cfg["data.spread"], cfg["data.train_count"],
                           cfg["run.seed"], "train")
    before = initial_smoothed_loss(build_network(spec, tcfg.seed), data, tcfg)
    state, report = train(spec, tcfg, data)
    after = initial_smoothed_loss(state, data, tcfg)
    assert report.epochs_run == 20
    assert after <= 0.5 * before
