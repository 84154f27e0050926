import numpy as np
import pytest

from helpers import central_difference, relative_errors, toy_config
from nestedvit.config import FusionSettings, RunConfig, TrainConfig
from nestedvit.errors import ConfigError, NonFiniteLossError
from nestedvit.model import NestedViT
from nestedvit.optim import learning_rate
from nestedvit.recycling import make_transitions
from nestedvit.trainer import Trainer, joint_loss, run_chain


def build(heads=(2, 4), seed=0, alpha=0.0, **train):
    cfg = toy_config(heads=heads)
    model = NestedViT(cfg, seed=seed)
    transitions = make_transitions(cfg, FusionSettings(alpha_init=alpha), seed=seed)
    return cfg, model, transitions, TrainConfig(**train)


def batch(rng, n=8, classes=3):
    return rng.normal(size=(n, 3, 8, 8)).astype(np.float32), rng.integers(0, classes, size=n)


def all_params(model, transitions):
    out = list(model.parameters())
    for t in transitions:
        out.extend(t.parameters().values())
    return out


def joint_grads(model, transitions, images, labels, weights):
    params = all_params(model, transitions)
    for p in params:
        p.grad = None
    outs = run_chain(model, transitions, images, len(weights) - 1)
    total, _ = joint_loss(outs, labels, weights)
    total.backward()
    return [np.zeros_like(p.data, np.float64) if p.grad is None else p.grad.astype(np.float64)
            for p in params]


def test_default_weights_are_half_half():
    cfg = RunConfig.model_validate({
        "model": {"image_size": 8, "patch_size": 4, "num_layers": 1, "num_classes": 3,
                  "stages": [{"heads": 3}, {"heads": 6}]},
    })
    assert cfg.train.loss_weights == [0.5, 0.5]


def test_dead_branch_has_zero_gradients(rng):
    cfg, model, transitions, _ = build(alpha=0.7)
    images, labels = batch(rng)
    joint_grads(model, transitions, images, labels, [1.0, 0.0])
    tr = transitions[0]
    for p in tr.parameters().values():
        assert p.grad is None or np.all(p.grad == 0)
    head = model.params["head.weight"].grad
    assert np.all(head[8:] == 0) and np.any(head[:8] != 0)
    qkv = model.params["blocks.0.attn.qkv.weight"].grad
    assert np.all(qkv[:, 8:] == 0) and np.all(qkv[:, :, 8:] == 0)


def test_single_batch_overfit(rng):
    cfg, model, transitions, train = build(
        learning_rate=3e-3, weight_decay=0.0, schedule="constant", batch_size=8)
    images, labels = batch(rng, 8, 3)
    trainer = Trainer(model, transitions, train, seed=0, total_steps=500)
    for step in range(500):
        losses = trainer.train_step(images, labels)
        if max(losses) < 0.01:
            break
    assert max(losses) < 0.01, (step, losses)


def test_sampled_strategy_needs_three_stages():
    cfg, model, transitions, train = build(strategy="sandwich")
    with pytest.raises(ConfigError):
        Trainer(model, transitions, train)


def test_sandwich_always_visits_ends():
    cfg, model, transitions, train = build(heads=(1, 2, 3), strategy="sandwich")
    trainer = Trainer(model, transitions, train, seed=0)
    for _ in range(200):
        assert trainer.sample_stages() == [0, 1, 2]
    cfg, model, transitions, train = build(heads=(1, 2, 3, 4), strategy="sandwich")
    trainer = Trainer(model, transitions, train, seed=0)
    middles = set()
    for _ in range(200):
        s = trainer.sample_stages()
        assert s[0] == 0 and s[-1] == 3
        middles.add(s[1])
    assert middles == {1, 2}


def test_stochastic_visit_frequencies_are_uniform():
    cfg, model, transitions, train = build(heads=(1, 2, 3), strategy="stochastic")
    trainer = Trainer(model, transitions, train, seed=0)
    counts = np.zeros(3)
    for _ in range(10_000):
        for k in trainer.sample_stages():
            counts[k] += 1
    assert np.all(np.abs(counts / 10_000 - 1 / 3) <= 0.02), counts


@pytest.mark.parametrize("optimizer", ["adamw", "sgd_momentum"])
def test_unvisited_stage_parameters_unchanged(optimizer, rng):
    cfg, model, transitions, train = build(heads=(1, 2, 3), alpha=0.3, strategy="stochastic",
                                           optimizer=optimizer, learning_rate=1e-2)
    trainer = Trainer(model, transitions, train, seed=4)
    seen = set()
    for _ in range(30):
        images, labels = batch(rng)
        before = {k: p.data.copy() for k, p in trainer.named.items()}
        stage = trainer.sample_stages()[0]
        trainer._step(images, labels, [stage])
        seen.add(stage)
        d = cfg.embed_dim(stage)
        for name, p in model.params.items():
            old, new = before["model/" + name], p.data
            inside = model.region(name, stage)
            mask = np.ones(old.shape, bool)
            mask[inside] = False
            assert np.array_equal(old[mask], new[mask]), (name, stage)
        for i, t in enumerate(transitions):
            if t.to_stage > stage:
                for k, p in t.parameters().items():
                    assert np.array_equal(before[f"transitions/{i}/{k}"], p.data)
        assert d > 0
    assert seen == {0, 1, 2}


def test_sampled_step_returns_visited_losses(rng):
    cfg, model, transitions, train = build(heads=(1, 2, 3), strategy="sandwich")
    trainer = Trainer(model, transitions, train, seed=0)
    images, labels = batch(rng)
    assert sorted(trainer.train_step_sampled(images, labels)) == [0, 1, 2]


def test_joint_loss_gradient_matches_finite_difference(rng):
    cfg, model, transitions, _ = build(alpha=0.5)
    rnd = np.random.default_rng(5)
    for p in model.parameters():
        p.data = (p.data + rnd.normal(0, 0.2, size=p.shape)).astype(np.float32)
    transitions[0].bias.data = rnd.normal(0, 0.2, size=16).astype(np.float32)
    images, labels = batch(rng, 4)
    weights = [0.5, 0.5]
    params = all_params(model, transitions)

    def loss():
        outs = run_chain(model, transitions, images, 1)
        return joint_loss(outs, labels, weights)[0]

    for p in params:
        p.grad = None
    loss().backward()
    targets = {
        "patch": model.params["patch.weight"],
        "qkv": model.params["blocks.0.attn.qkv.weight"],
        "fc1": model.params["blocks.0.mlp.fc1.weight"],
        "head": model.params["head.weight"],
        "cls": model.params["cls"],
        "proj": transitions[0].weight,
        "proj_bias": transitions[0].bias,
        "alpha": transitions[0].alpha,
    }
    coord_rng = np.random.default_rng(0)
    for name, target in targets.items():
        flat = coord_rng.choice(target.size, size=min(20, max(target.size, 1)), replace=False)
        coords = [np.unravel_index(i, target.shape) for i in flat] if target.ndim else [()]
        analytic = np.array([target.grad[c] for c in coords])
        numeric = central_difference(lambda: float(loss().data), params, target, coords)
        assert relative_errors(analytic, numeric).max() <= 1e-3, name


def test_shared_weight_gradient_sums_both_stage_losses(rng):
    cfg, model, transitions, _ = build(alpha=0.5)
    images, labels = batch(rng, 4)
    shared = model.params["blocks.0.attn.qkv.weight"]
    coords = [(0, 1, 2), (1, 3, 0), (2, 7, 7), (0, 0, 5)]
    params = all_params(model, transitions)

    def loss(weights):
        return joint_loss(run_chain(model, transitions, images, 1), labels, weights)[0]

    numeric = {w: central_difference(lambda: float(loss(w).data), params, shared, coords)
               for w in [(0.5, 0.5), (1.0, 0.0), (0.0, 1.0)]}
    np.testing.assert_allclose(numeric[(0.5, 0.5)],
                               0.5 * numeric[(1.0, 0.0)] + 0.5 * numeric[(0.0, 1.0)], rtol=1e-6)
    assert np.all(np.abs(numeric[(0.0, 1.0)]) > 0)
    for p in params:
        p.grad = None
    loss((0.5, 0.5)).backward()
    analytic = np.array([shared.grad[c] for c in coords])
    assert relative_errors(analytic, numeric[(0.5, 0.5)]).max() <= 1e-3


def test_loss_weight_linearity(rng):
    cfg, model, transitions, _ = build(alpha=0.4)
    images, labels = batch(rng)
    g1 = joint_grads(model, transitions, images, labels, [1.0, 0.0])
    g2 = joint_grads(model, transitions, images, labels, [0.0, 1.0])
    a, b = 0.3, 1.7
    g = joint_grads(model, transitions, images, labels, [a, b])
    for x, y, z in zip(g, g1, g2):
        assert np.abs(x - (a * y + b * z)).max() <= 1e-5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_stage_and_batch(rng):
    cfg, model, transitions, train = build()
    trainer = Trainer(model, transitions, train)
    images, labels = batch(rng)
    trainer.train_step(images, labels)
    model.params["head.bias"].data[0] = np.inf
    with pytest.raises(NonFiniteLossError) as err:
        trainer.train_step(images, labels)
    assert err.value.stage == 0 and err.value.batch_index == 1
    assert "stage 0" in str(err.value)


def test_training_is_deterministic(rng):
    images, labels = batch(rng)
    runs = []
    for _ in range(2):
        cfg, model, transitions, train = build(seed=2, alpha=0.1)
        trainer = Trainer(model, transitions, train, seed=2, total_steps=5)
        runs.append([trainer.train_step(images, labels) for _ in range(5)])
    assert runs[0] == runs[1]


def test_cosine_schedule():
    assert learning_rate(1.0, "cosine", 0, 10) == 1.0
    assert learning_rate(1.0, "cosine", 5, 10) == pytest.approx(0.5)
    assert learning_rate(1.0, "constant", 7, 10) == 1.0


def test_grad_clip_bounds_update(rng):
    cfg, model, transitions, train = build(grad_clip=1e-3, optimizer="sgd_momentum",
                                           weight_decay=0.0, schedule="constant",
                                           learning_rate=1.0, momentum=0.0)
    trainer = Trainer(model, transitions, train)
    before = {k: p.data.astype(np.float64) for k, p in trainer.named.items()}
    trainer.train_step(*batch(rng))
    sq = sum(float(((p.data - before[k]) ** 2).sum()) for k, p in trainer.named.items())
    assert np.sqrt(sq) <= 1e-3 * (1 + 1e-4)


def test_weights_length_must_match_stages():
    cfg, model, transitions, _ = build()
    with pytest.raises(ConfigError):
        Trainer(model, transitions, TrainConfig(loss_weights=[1.0, 1.0, 1.0]))
