import numpy as np
import pytest

from beliefkit import autodiff as ad
from beliefkit.agent import ActorCritic, TrainConfig, a2c_loss, belief_features, build_agent
from beliefkit.encoder import BeliefEncoder, belief_batch_loss, kl_proxy_loss, regularizer_costs
from beliefkit.envs import make_tiger
from beliefkit.exact import UniformPolicy
from beliefkit.latent import fit_exact, perturb, refine
from beliefkit.rollout import VecEnv, collect

REL_TOL = 1e-4


def rel_err(a, n):
    return abs(a - n) / max(abs(a) + abs(n), 1e-7)


def fd_check(params, loss_fn, names=None, per_param=12, h=1e-6, seed=0):
    """Compare backward() against central differences on sampled entries."""
    rng = np.random.default_rng(seed)
    params.zero_grad()
    ad.backward(loss_fn())
    grads = params.grads()
    worst = 0.0
    for name, node in params:
        if names is not None and name not in names:
            continue
        flat = node.value.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().value)
            flat[i] = old - h
            down = float(loss_fn().value)
            flat[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, rel_err(grads[name].reshape(-1)[i], num))
    return worst


def _primitive_params(rng):
    return ad.Params({"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 5)),
                      "b": rng.normal(size=5), "y": rng.normal(size=(4, 5))})


PRIMITIVES = {
    "affine_tanh": lambda p: ad.sum(ad.tanh(ad.affine(p["x"], p["w"], p["b"]))),
    "mul_add": lambda p: ad.sum(ad.mul(ad.add(ad.matmul(p["x"], p["w"]), p["y"]), p["y"])),
    "square_mean": lambda p: ad.mean(ad.square(ad.matmul(p["x"], p["w"]))),
    "scale_sub": lambda p: ad.sum(ad.scale(p["y"] - ad.matmul(p["x"], p["w"]), 0.3)),
    "softmax": lambda p: ad.sum(ad.mul(ad.softmax(p["y"]), ad.const(np.arange(20.0).reshape(4, 5)))),
    "log_softmax": lambda p: ad.mean(ad.gather(ad.log_softmax(ad.add(p["y"], p["b"])), [0, 2, 4, 1])),
    "sum_axis": lambda p: ad.sum(ad.square(ad.sum(p["y"], axis=1))),
    "concat": lambda p: ad.sum(ad.square(ad.concat([p["x"], p["y"]], axis=1))),
    "relu": lambda p: ad.sum(ad.mul(ad.relu(p["y"]), p["y"])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    params = _primitive_params(np.random.default_rng(1))
    assert fd_check(params, lambda: PRIMITIVES[name](params)) < REL_TOL


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.leaf(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        ad.mul(ad.leaf(np.ones(3)), ad.leaf(np.ones(4)))


@pytest.fixture(scope="module")
def setting():
    tiger = make_tiger()
    refined = refine(tiger)
    m = perturb(fit_exact(refined, sigma=0.1), 0.2, np.random.default_rng(0))
    enc = BeliefEncoder.for_model(m, d_sub=8, hidden=8, seed=3)
    env = VecEnv(tiger, 6, 0, 16)
    policy = UniformPolicy(3)
    collect(env, enc, refined, m, policy.action_probs, 3)
    batch = collect(env, enc, refined, m, policy.action_probs, 5)
    return tiger, refined, m, enc, batch


def test_encoder_kl_proxy_gradient(setting):
    _, _, m, enc, batch = setting
    assert batch.at_root.any() and not batch.at_root.all()

    # the previous belief is a target: held fixed while differentiating
    prev = enc.beliefs(batch.memory, batch.at_root)

    def loss():
        return kl_proxy_loss(enc, m, prev, batch.actions, batch.next_obs, batch.memory,
                             from_root=batch.at_root)[0]

    assert fd_check(enc.params, loss) < REL_TOL


def test_belief_batch_loss_gradient(setting, monkeypatch):
    _, _, m, enc, batch = setting
    frozen = enc.beliefs(batch.memory, batch.at_root)
    monkeypatch.setattr(enc, "beliefs", lambda memory, at_root=None: frozen)
    uniform = lambda mem: np.full((len(mem), 3), 1 / 3)  # noqa: E731
    assert fd_check(enc.params, lambda: belief_batch_loss(enc, m, batch, 0.5, uniform)[0]) < REL_TOL


def test_actor_critic_gradients(setting):
    _, _, m, enc, batch = setting
    ac = ActorCritic(8 + m.n_latent, 3, hidden=8, seed=2, features=belief_features(enc))
    rng = np.random.default_rng(4)
    for k in ac.params.nodes:
        ac.params[k].value = ac.params[k].value + rng.normal(0, 0.3, ac.params[k].shape)
    cfg = TrainConfig()
    returns = rng.normal(size=len(batch.actions))
    args = (ac, batch.memory, batch.actions, returns, cfg, 0.05)
    policy_names = [k for k in ac.params.nodes if k.startswith("pi")]
    assert fd_check(ac.params, lambda: a2c_loss(*args)[0], policy_names) < REL_TOL

    def value_part():
        return ad.scale(ad.mean(ad.square(ad.add(ac.graph(batch.memory)[2], ad.const(-returns)))),
                        cfg.value_coef)

    value_names = [k for k in ac.params.nodes if k.startswith("v")]
    assert fd_check(ac.params, value_part, value_names) < REL_TOL
    # the advantage is a constant in the policy term, so value heads see only the value loss
    ac.params.zero_grad()
    ad.backward(a2c_loss(*args)[0])
    full = ac.params.grads()
    ac.params.zero_grad()
    ad.backward(value_part())
    only = ac.params.grads()
    for k in value_names:
        np.testing.assert_allclose(full[k], only[k], atol=1e-12)


def _reachable(root):
    seen, stack = set(), [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        stack.extend(n.parents)
    return seen


def test_no_backprop_through_time(setting):
    _, _, m, enc, batch = setting
    inner = ~batch.at_root
    prev = enc.beliefs(batch.memory[inner])
    loss = kl_proxy_loss(enc, m, prev, batch.actions[inner], batch.next_obs[inner],
                         batch.memory[inner])[0]
    graph = _reachable(loss)
    assert id(enc.params["beta0"]) not in graph
    enc.params.zero_grad()
    ad.backward(loss)
    assert np.all(enc.params.grads()["beta0"] == 0.0)
    # each step sees the incoming sub-belief as a leaf without parents
    beta_in = enc.input_node(batch.memory[inner])
    assert beta_in.parents == ()


def test_actor_and_encoder_are_isolated():
    tiger = make_tiger()
    refined, m, enc, ac = build_agent(tiger, seed=0, d_sub=8, hidden=8)
    env = VecEnv(tiger, 4, 0)
    batch = collect(env, enc, refined, m, lambda mem, root: ac.probs(mem), 4)
    a2c = a2c_loss(ac, batch.memory, batch.actions, np.ones(len(batch.actions)), TrainConfig())[0]
    belief = belief_batch_loss(enc, m, batch, 0.1, ac.probs)[0]
    a2c_graph, belief_graph = _reachable(a2c), _reachable(belief)
    assert not any(id(n) in a2c_graph for _, n in enc.params)
    assert not any(id(n) in belief_graph for _, n in ac.params)
    enc.params.zero_grad()
    ac.params.zero_grad()
    ad.backward(a2c)
    assert all(np.all(g == 0) for g in enc.params.grads().values())
    ac.params.zero_grad()
    ad.backward(belief)
    assert all(np.all(g == 0) for g in ac.params.grads().values())


def test_regularizer_costs_shape(setting):
    _, _, m, _, batch = setting
    cost_r, cost_p = regularizer_costs(m, batch.next_latent, np.full((len(batch.actions), 3), 1 / 3))
    assert cost_r.shape == cost_p.shape == (len(batch.actions), m.n_latent)
    assert np.all(cost_r >= 0) and np.all(cost_p >= 0)


def test_optimizer_rejects_nan():
    p = ad.Params({"w": np.ones(2)})
    opt = ad.Optimizer(p)
    with pytest.raises(ad.TrainingError):
        opt.step({"w": np.array([np.nan, 0.0])})


def test_sgd_step_and_clip():
    p = ad.Params({"w": np.zeros(2)})
    ad.Optimizer(p, ad.OptimizerConfig("sgd", lr=0.5, max_grad_norm=1.0)).step({"w": np.array([3.0, 4.0])})
    np.testing.assert_allclose(p["w"].value, [-0.3, -0.4])


def test_params_roundtrip(tmp_path):
    p = ad.Params({"a": np.arange(6.0).reshape(2, 3), "b": np.array(2.5)})
    ad.save_params(p, tmp_path / "p.bin")
    back = ad.load_params(tmp_path / "p.bin")
    np.testing.assert_array_equal(back["a"], p["a"].value)
    assert back["b"] == 2.5
    q = ad.Params({"a": np.zeros((2, 3)), "b": np.zeros(())})
    q.load(back)
    with pytest.raises(ad.ShapeError):
        q.load({"a": np.zeros(3)})
