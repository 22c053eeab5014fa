import math

import numpy as np
import pytest

from metaseg import dataset as D
from metaseg import metatrain as M
from metaseg import segnet as S
from metaseg.errors import ConfigError, RoutingError
from metaseg.sampler import Episode, EpisodeBatch, SamplerConfig
from metaseg.segnet import ParamSet

TINY = S.UNetConfig(depth=2, base_channels=4, in_channels=3)


# -- toy objectives ------------------------------------------------------------------

def quadratic(params, task_id, samples, wrt=None):
    """L(w) = (w - 1)^2, independent of the samples."""
    w = params["w"]
    return float(((w - 1.0) ** 2).sum()), {"w": 2.0 * (w - 1.0)}


def linear(params, task_id, samples, wrt=None):
    """Mean squared error of y ~ a*x + b over (x, y) pairs."""
    a, b = float(params["a"][0]), float(params["b"][0])
    x = np.array([s[0] for s in samples])
    y = np.array([s[1] for s in samples])
    r = a * x + b - y
    return float(np.mean(r * r)), {"a": np.array([np.mean(2 * r * x)]), "b": np.array([np.mean(2 * r)])}


def toy_params(**values):
    return ParamSet(None, {k: np.array([float(v)]) for k, v in values.items()})


# -- Adam ------------------------------------------------------------------------------

def test_adam_first_step():
    p, state = M.adam_step(toy_params(w=0.5), {"w": np.array([1.0])}, M.AdamState(), 1e-3)
    assert float(p["w"][0]) == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_zero_gradient():
    p, state = M.adam_step(toy_params(w=0.5), {"w": np.array([0.0])}, M.AdamState(), 1e-3)
    assert float(p["w"][0]) == 0.5 and state.step == 1


def test_adam_matches_reference_trajectory():
    def reference(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
        m = v = 0.0
        out = []
        for t in range(1, steps + 1):
            g = 2.0 * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            out.append(w)
        return out

    params, state = toy_params(w=1.3), M.AdamState()
    ours = []
    for _ in range(10):
        params, state = M.adam_step(params, {"w": 2.0 * params["w"]}, state, 0.05)
        ours.append(float(params["w"][0]))
    assert np.max(np.abs(np.array(ours) - reference(1.3, 0.05, 10))) < 1e-12


def test_adam_leaves_absent_parameters_alone():
    params = toy_params(w=1.0, u=2.0)
    params, state = M.adam_step(params, {"w": np.array([1.0]), "u": np.array([1.0])}, M.AdamState(), 0.1)
    params2, state2 = M.adam_step(params, {"w": np.array([1.0])}, state, 0.1)
    assert params2["u"] is params["u"]
    assert state2.m["u"] is state.m["u"] and state2.v["u"] is state.v["u"]
    assert state2.step == 2


def test_adam_errors():
    with pytest.raises(KeyError):
        M.adam_step(toy_params(w=1), {"zz": np.array([1.0])}, M.AdamState(), 0.1)
    with pytest.raises(Exception, match="shape"):
        M.adam_step(toy_params(w=1), {"w": np.ones(2)}, M.AdamState(), 0.1)


# -- FOMAML ---------------------------------------------------------------------------

def scalar_episode():
    return Episode("t", support=("s",), query=("q",))


def test_scalar_inner_adapt():
    base = ParamSet(None, {"w": np.array([0.0])})
    adapted = M.inner_adapt(base, scalar_episode(), M.MamlConfig(inner_lr=0.5), quadratic)
    assert float(adapted["w"][0]) == 1.0
    assert float(base["w"][0]) == 0.0


def test_inner_adapt_fixed_point():
    base = toy_params(w=1.0)
    assert M.inner_adapt(base, scalar_episode(), M.MamlConfig(inner_lr=0.3), quadratic).equal(base)


def test_scalar_outer_step_is_fixed_point():
    base = ParamSet(None, {"w": np.array([0.0])})
    cfg = M.MamlConfig(inner_lr=0.5, outer_lr=1e-3)
    new, _, metrics = M.maml_outer_step(base, M.AdamState(), EpisodeBatch((scalar_episode(),)), cfg, quadratic)
    assert abs(float(new["w"][0]) - 0.0) < 1e-12
    assert metrics["loss"] == 0.0


def test_linear_meta_toy_matches_closed_form():
    rng = np.random.default_rng(5)
    episodes = []
    for k in range(3):
        x = rng.normal(size=6)
        y = (1.5 + k) * x - 0.5 * k + rng.normal(scale=0.1, size=6)
        pairs = list(zip(x, y))
        episodes.append(Episode(f"t{k}", tuple(pairs[:3]), tuple(pairs[3:])))
    a0, b0, alpha, lr = 0.2, -0.1, 0.05, 1e-2

    def grad(a, b, pairs):
        x, y = np.array(pairs).T
        r = a * x + b - y
        return np.array([np.mean(2 * r * x), np.mean(2 * r)])

    meta_grad = np.zeros(2)
    for ep in episodes:
        ga, gb = grad(a0, b0, ep.support)
        meta_grad += grad(a0 - alpha * ga, b0 - alpha * gb, ep.query)
    meta_grad /= len(episodes)
    expected = np.array([a0, b0]) - lr * meta_grad / (np.abs(meta_grad) + 1e-8)

    cfg = M.MamlConfig(inner_lr=alpha, outer_lr=lr)
    new, _, _ = M.maml_outer_step(toy_params(a=a0, b=b0), M.AdamState(), EpisodeBatch(tuple(episodes)), cfg, linear)
    assert abs(float(new["a"][0]) - expected[0]) < 1e-10
    assert abs(float(new["b"][0]) - expected[1]) < 1e-10


def test_duplicate_episodes_give_same_update():
    ep = Episode("t", ((1.0, 2.0), (2.0, 3.0)), ((0.5, 1.0),))
    cfg = M.MamlConfig(inner_lr=0.1, outer_lr=1e-2)
    one, _, _ = M.maml_outer_step(toy_params(a=0.0, b=0.0), M.AdamState(), EpisodeBatch((ep,)), cfg, linear)
    two, _, _ = M.maml_outer_step(toy_params(a=0.0, b=0.0), M.AdamState(), EpisodeBatch((ep, ep)), cfg, linear)
    assert one.equal(two)


def test_empty_batch_and_bad_order():
    with pytest.raises(ConfigError):
        M.maml_outer_step(toy_params(w=0), M.AdamState(), EpisodeBatch(()), M.MamlConfig(), quadratic)
    with pytest.raises(ConfigError):
        M.MamlConfig(order="second")


@pytest.fixture(scope="module")
def tiny_sources():
    return [D.generate_synthetic_source(40 + k, k, 8, 8, 8, source_id=f"t{k}") for k in (2, 3)]


def test_support_loss_descends_on_random_episodes(tiny_sources):
    src = tiny_sources[1]
    cfg = M.MamlConfig(inner_lr=0.01)
    rng = np.random.default_rng(0)
    wins = 0
    for i in range(100):
        params = S.build_model(TINY, [(src.id, 3)], S.InitSpec(i % 10), dtype=np.float64)
        idx = rng.choice(len(src), size=2, replace=False)
        ep = Episode(src.id, tuple(src.samples[j] for j in idx), (src.samples[0],))
        before = M.loss_on(params, src.id, ep.support)
        after = M.loss_on(M.inner_adapt(params, ep, cfg), src.id, ep.support)
        wins += after <= before
    assert wins >= 95


def test_episode_heads_only_move_their_own(tiny_sources):
    params = S.build_model(TINY, [(s.id, s.num_classes) for s in tiny_sources], dtype=np.float64)
    src = tiny_sources[0]
    ep = Episode(src.id, src.samples[:2], src.samples[2:4])
    new, adam, _ = M.maml_outer_step(params, M.AdamState(), EpisodeBatch((ep,)), M.MamlConfig(outer_lr=1e-3))
    assert all(new[k] is params[k] for k in params.head_keys("t3"))
    assert not any(k.startswith("heads/t3/") for k in adam.m)
    assert not np.array_equal(new["heads/t2/weight"], params["heads/t2/weight"])


def test_worker_count_does_not_change_result(tiny_sources):
    meta = D.build_meta_dataset(tiny_sources, (0.5, 0.5), seed=0)
    params = S.build_model(TINY, [(s.id, s.num_classes) for s in tiny_sources], dtype=np.float64)
    sc = SamplerConfig(episode_size=4, support_size=2, batch_episodes=3, seed=1)
    cfg = M.MamlConfig(outer_lr=1e-3, max_iters=3)
    a, _, la = M.train_maml(params, meta, sc, cfg, workers=1)
    b, _, lb = M.train_maml(params, meta, sc, cfg, workers=3)
    assert la == lb
    assert max(float(np.max(np.abs(a[k] - b[k]))) for k in a) < 1e-12


# -- objectives and transfer ------------------------------------------------------------

def test_zero_head_loss_is_log_two(tiny_sources):
    src = tiny_sources[0]
    params = S.build_model(TINY, [(src.id, 2)], dtype=np.float64)
    params = params.replace({"heads/t2/weight": np.zeros((2, 4, 1, 1))})
    assert M.loss_on(params, src.id, src.samples[:3]) == pytest.approx(math.log(2), abs=1e-12)


def test_loss_matches_pixel_oracle_and_is_order_invariant():
    src = D.generate_synthetic_source(3, 3, 3, 4, 4, source_id="o")
    params = S.build_model(TINY, [("o", 3)], S.InitSpec(2), dtype=np.float64)
    loss = M.loss_on(params, "o", src.samples)
    nll, count = 0.0, 0
    for s in src.samples:
        logits = S.model_forward(params, "o", s.image[None].astype(np.float64))[0]
        for r in range(4):
            for c in range(4):
                z = logits[:, r, c]
                nll += math.log(sum(math.exp(v) for v in z)) - z[s.mask[r, c]]
                count += 1
    assert loss == pytest.approx(nll / count, abs=1e-12)
    assert abs(M.loss_on(params, "o", src.samples[::-1]) - loss) < 1e-12


def test_objective_rejects_foreign_samples(tiny_sources):
    params = S.build_model(TINY, [(s.id, s.num_classes) for s in tiny_sources])
    with pytest.raises(RoutingError):
        M.segmentation_objective(params, "t2", tiny_sources[1].samples[:1])
    with pytest.raises(RoutingError):
        M.transfer_train_step(S.build_model(TINY, [("t2", 2)]), M.AdamState(),
                              tiny_sources[1].samples[:1], M.TransferConfig())


def test_mixed_gradient_matches_finite_differences(tiny_sources):
    params = S.build_model(TINY, [(s.id, s.num_classes) for s in tiny_sources], S.InitSpec(1), dtype=np.float64)
    batch = list(tiny_sources[0].samples[:1]) + list(tiny_sources[1].samples[:3])
    _, grads = M.mixed_objective(params, batch)

    def mixed_loss(p):
        groups = M.group_by_source(batch)
        return sum(len(g) / len(batch) * M.loss_on(p, sid, g) for sid, g in groups.items())

    rng = np.random.default_rng(0)
    eps = 1e-6
    for name in ("backbone/enc0/conv1/weight", "backbone/mid/conv2/bias", "heads/t2/weight", "heads/t3/bias"):
        flat = params[name].ravel()
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            def shifted(d):
                arr = flat.copy()
                arr[i] += d
                return mixed_loss(params.replace({name: arr.reshape(params[name].shape)}))
            numeric = (shifted(eps) - shifted(-eps)) / (2 * eps)
            analytic = grads[name].ravel()[i]
            assert abs(numeric - analytic) <= 1e-6 * max(1.0, abs(numeric)), (name, i)


def test_single_source_transfer_equals_plain_step(tiny_sources):
    src = tiny_sources[1]
    params = S.build_model(TINY, [(src.id, 3)], dtype=np.float64)
    batch = src.samples[:3]
    got, _, _ = M.transfer_train_step(params, M.AdamState(), batch, M.TransferConfig(lr=1e-3))
    _, grads = M.segmentation_objective(params, src.id, batch)
    want, _ = M.adam_step(params, grads, M.AdamState(), 1e-3)
    assert got.equal(want)


def test_duplicated_transfer_batch(tiny_sources):
    params = S.build_model(TINY, [(s.id, s.num_classes) for s in tiny_sources], dtype=np.float64)
    batch = [tiny_sources[0].samples[0], tiny_sources[1].samples[1]]
    _, g1 = M.mixed_objective(params, batch)
    _, g2 = M.mixed_objective(params, batch + batch)
    assert set(g1) == set(g2)
    assert max(float(np.max(np.abs(g1[k] - g2[k]))) for k in g1) < 1e-12


def test_zero_lr_keeps_params(tiny_sources):
    meta = D.build_meta_dataset(tiny_sources, (0.5, 0.5), seed=0)
    params = S.build_model(TINY, [(s.id, s.num_classes) for s in tiny_sources], dtype=np.float64)
    out, _, losses = M.train_transfer(params, meta, SamplerConfig(instance_batch_size=4),
                                      M.TransferConfig(lr=0.0, max_iters=2))
    assert out.equal(params) and len(losses) == 2


# -- refinement ----------------------------------------------------------------------

def test_refine_zero_iters_is_fresh_head_score(tiny_sources):
    src = tiny_sources[1]
    base = S.build_model(TINY, [("t2", 2)], S.InitSpec(4))
    params, score = M.refine_on_new_task(base, src, range(4), range(4, 8), M.RefineConfig(iters=0, head_seed=3))
    from metaseg.evaluation import evaluate_task

    fresh = S.attach_head(base, src.id, 3, S.InitSpec(3))
    assert params.equal(fresh) and score == evaluate_task(fresh, src, range(4, 8))


def test_refine_head_only_freezes_backbone(tiny_sources):
    src = tiny_sources[1]
    base = S.build_model(TINY, [], S.InitSpec(4), dtype=np.float64)
    params, _ = M.refine_on_new_task(base, src, range(4), range(4, 8),
                                     M.RefineConfig(lr=1e-2, iters=2, which_params="head", batch_size=2))
    assert all(params[k] is base[k] for k in base.backbone_keys())
    assert not np.array_equal(params["heads/t3/bias"], np.zeros(3))


def test_refine_rejects_existing_head(tiny_sources):
    base = S.build_model(TINY, [("t3", 3)])
    with pytest.raises(ConfigError):
        M.refine_on_new_task(base, tiny_sources[1], [0], [1], M.RefineConfig())


def test_moving_average():
    ma = M.moving_average([1.0, 2.0, 3.0, 4.0], window=2)
    assert ma.tolist() == [1.0, 1.5, 2.5, 3.5]
