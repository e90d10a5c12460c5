"""Finite-difference gradient checks over every op, the heads and a small model."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, grad_check

GRAD_TOL = 1e-5


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def op_checks(seed: int = 0) -> dict:
    """``name -> max relative error`` for each primitive op."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 3))
    B = rng.normal(size=(3, 5))
    C = rng.normal(size=(4, 3))
    row = rng.normal(size=(3,))
    pos = rng.uniform(0.5, 2.0, size=(4, 3))
    proj = rng.normal(size=(4, 5))
    labels = rng.integers(0, 3, size=4)
    targets = (rng.random((4, 3)) < 0.3).astype(float)
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    W, b = rng.normal(size=(3, 6)), rng.normal(size=6)

    def s(t):
        return T.sum_(T.mul(t, Tensor(rng_fixed(t.shape))))

    fixed = {}

    def rng_fixed(shape):
        if shape not in fixed:
            fixed[shape] = np.random.default_rng(hash(shape) % 2**32).normal(size=shape)
        return fixed[shape]

    checks = {
        "add": (lambda x: s(x + Tensor(C)), A),
        "add_broadcast": (lambda x: s(Tensor(A) + x), row),
        "sub": (lambda x: s(T.sub(Tensor(C), x)), A),
        "mul": (lambda x: s(x * Tensor(C)), A),
        "matmul": (lambda x: s(x @ Tensor(B)), A),
        "matmul_right": (lambda x: s(Tensor(A) @ x), B),
        "transpose": (lambda x: s(T.transpose(x)), A),
        "reshape": (lambda x: s(T.reshape(x, (3, 4))), A),
        "index": (lambda x: s(T.index(x, (np.array([0, 2, 2]), slice(None)))), A),
        "take_rows": (lambda x: s(T.take_rows(x, np.array([3, 1, 1]))), A),
        "sum_axis": (lambda x: s(T.sum_(x, axis=0)), A),
        "mean": (lambda x: s(T.mean(x, axis=1)), A),
        "exp": (lambda x: s(T.exp(x)), A),
        "log": (lambda x: s(T.log(x)), pos),
        "relu": (lambda x: s(T.relu(x)), _away_from_zero(rng, (4, 3))),
        "sigmoid": (lambda x: s(T.sigmoid(x)), A),
        "tanh": (lambda x: s(T.tanh(x)), A),
        "concat": (lambda x: s(T.concat([x, Tensor(C), x], axis=1)), A),
        "linear": (lambda x: s(T.linear(x, Tensor(W), Tensor(b))), A),
        "linear_weight": (lambda w: s(T.linear(Tensor(A), w, Tensor(b))), W),
        "softmax": (lambda x: s(T.softmax(x, axis=1)), A),
        "layernorm": (lambda x: s(T.layernorm(x, Tensor(gamma), Tensor(beta))), A),
        "mse": (lambda x: T.mse(x, Tensor(C)), A),
        "l1": (lambda x: T.l1(x, Tensor(C + 0.05)), A),
        "cross_entropy": (lambda x: T.cross_entropy(x, labels), A),
        "focal": (lambda x: T.sigmoid_focal_loss(x, targets), A),
        "projection": (lambda x: s(x @ Tensor(proj)), rng.normal(size=(2, 4))),
    }
    out = {name: grad_check(f, x) for name, (f, x) in checks.items()}
    out["detach"] = detach_check(A)
    return out


def detach_check(x) -> float:
    """``sum(x^2 + detach(x))`` with the detached value frozen during differencing."""
    tape = T.DetachTape()

    def f(t):
        with tape.active():
            return T.sum_(t * t + T.detach(t))

    return grad_check(f, x)


def attention_checks(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    n, d = 8, 4
    Q, K, V = (rng.normal(size=(n, d)) for _ in range(3))
    mask = rng.random((n, n)) < 0.4
    mask[0] = True
    bias = rng.normal(size=(n, n))
    proj = rng.normal(size=(n, d))
    out = {}
    for heads in (1, 2):
        for name, x in (("q", Q), ("k", K), ("v", V)):
            def f(t, name=name, heads=heads):
                args = {"q": Tensor(Q), "k": Tensor(K), "v": Tensor(V)}
                args[name] = t
                o = T.masked_attention(args["q"], args["k"], args["v"], mask, heads=heads, bias=bias)
                return T.sum_(o * Tensor(proj))
            out[f"masked_attention_h{heads}_{name}"] = grad_check(f, x)
    return out


def _tiny_setup(seed: int):
    from .model import DenseBEV, DenseBEVConfig
    from .training.losses import Targets
    from .training.scenes import SceneConfig, generate_scene

    cfg = DenseBEVConfig(grid_n=8, grid_m=8, extent_x=4.0, extent_y=4.0, patch_radius=1, hidden=16,
                         dim=8, heads=2, num_layers=2, n_queries=12, seed=seed)
    scfg = SceneConfig(grid_n=8, grid_m=8, extent_x=4.0, extent_y=4.0, num_objects=(2, 3),
                       class_sizes=((0.8, 1.2, 1.5, 2.0), (0.5, 0.8, 0.5, 0.8)), margin=0.5)
    scene = generate_scene(seed, scfg)[0]
    model = DenseBEV(cfg)
    prng = np.random.default_rng(seed + 1)
    for name, t in model.params.items():
        if ".reg.w2" in name:
            t.data = prng.normal(0.0, 0.02, size=t.shape)
    targets = Targets.from_boxes(scene.gt_boxes, scene.gt_labels, cfg.use_velocity)
    return model, scene, targets


def head_checks(seed: int = 0) -> dict:
    model, scene, _ = _tiny_setup(seed)
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(6, model.config.dim))
    ref = model.anchors()[:6]
    proj_l = rng.normal(size=(6, model.config.num_classes))
    proj_r = rng.normal(size=(6, model.config.param_dim))

    def f(x):
        out = model.auxiliary_head(1, x, ref)
        return T.sum_(out.logits * Tensor(proj_l)) + T.sum_(out.pred * Tensor(proj_r))

    return {"auxiliary_head": grad_check(f, feats)}


def model_checks(seed: int = 0, coords_per_param: int = 6) -> dict:
    """Total loss of a two-layer toy model against finite differences on sampled weights."""
    from .training.losses import total_loss

    model, scene, targets = _tiny_setup(seed)
    rng = np.random.default_rng(seed + 2)
    names = ["enc.w1", "enc.w2", "enc.tsa.wq", "enc.tsa.wo", "head0.cls.w1", "head0.reg.w2",
             "dec1.sa.wv", "dec1.ca.wq", "dec1.ln2.g", "dec1.ffn.w1", "head1.reg.w2",
             "dec2.ca.wk", "head2.cls.b2", "head2.reg.w1"]
    out = {}
    for name in names:
        original = model.params[name]

        tape = T.DetachTape()

        def f(x, name=name, tape=tape):
            model.params[name] = x
            with tape.active():
                res = model.forward(scene.observation)
                loss, _, _ = total_loss(res, targets, model.config.lambdas)
            return loss

        size = original.data.size
        coords = rng.choice(size, size=min(coords_per_param, size), replace=False)
        out[f"model:{name}"] = grad_check(f, original.data, coords=coords)
        model.params[name] = original
    return out


def run_all(seed: int = 0) -> dict:
    res = {}
    res.update(op_checks(seed))
    res.update(attention_checks(seed))
    res.update(head_checks(seed))
    res.update(model_checks(seed))
    return res
