"""Central-difference gradient verification for named subgraphs.

Each registered component builds, for a seed, a list of named tensors and
a loss closure that runs a fresh forward pass. The runner compares
reverse-mode gradients against (f(x+h) - f(x-h)) / 2h on a sample of
coordinates, reporting the worst relative error.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import SelfAttention
from .encoder import QuestionEncoder
from .model import VqaModel
from .modulation import BetaModulator, GammaModulator, modulated_sa_forward
from .nn import BatchNorm2d, Initializer, Linear
from .resnet import ResidualBlock, desk_plan
from .shapeworld import ANSWERS
from .tensor import Tensor

DEFAULT_H = 1e-5
DEFAULT_SEEDS = tuple(range(20))


def numeric_gradient(loss_fn, tensor: Tensor, coords, h: float = DEFAULT_H) -> np.ndarray:
    """Central differences of loss_fn at the given flat coordinates."""
    flat = tensor.data.reshape(-1)
    out = np.empty(len(coords))
    with T.no_grad():
        for k, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = loss_fn().item()
            flat[idx] = orig - h
            fm = loss_fn().item()
            flat[idx] = orig
            out[k] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    if denom < 1e-8:
        return abs(a - n)
    return abs(a - n) / denom


@dataclass
class GradcheckReport:
    component: str
    tolerance: float
    seeds: tuple
    coords_checked: int = 0
    max_rel_error: float = 0.0
    worst: str = ""
    passed: bool = True

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"gradcheck {self.component}: {status}  "
            f"max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:.0e}, "
            f"{self.coords_checked} coords, {len(self.seeds)} seeds, worst at {self.worst or 'n/a'})"
        )


def _allocate_coords(params, budget: int, rng: np.random.Generator):
    """Spread a coordinate budget over tensors, proportional to size."""
    sizes = np.array([p.size for _, p in params], dtype=np.int64)
    total = int(sizes.sum())
    take = np.minimum(sizes, np.maximum(1, (budget * sizes) // max(total, 1)))
    while take.sum() > budget and take.max() > 1:
        take[np.argmax(take)] -= 1
    plan = []
    for (name, p), k in zip(params, take):
        k = int(min(k, p.size))
        coords = rng.choice(p.size, size=k, replace=False)
        plan.append((name, p, sorted(int(c) for c in coords)))
    return plan


def run_gradcheck(component: str, *, seeds=DEFAULT_SEEDS, max_coords: int = 200, h: float = DEFAULT_H) -> GradcheckReport:
    if component not in COMPONENTS:
        raise KeyError(f"unknown gradcheck component {component!r}; have {sorted(COMPONENTS)}")
    builder, tol = COMPONENTS[component]
    report = GradcheckReport(component=component, tolerance=tol, seeds=tuple(seeds))
    for seed in seeds:
        params, loss_fn = builder(int(seed))
        loss = loss_fn()
        T.backward(loss)
        grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}
        for _, p in params:
            p.grad = None
        rng = np.random.default_rng([seed, zlib.crc32(component.encode())])
        for name, p, coords in _allocate_coords(params, max_coords, rng):
            numeric = numeric_gradient(loss_fn, p, coords, h=h)
            analytic = grads[name].reshape(-1)[coords]
            for a, n, c in zip(analytic, numeric, coords):
                err = relative_error(float(a), float(n))
                report.coords_checked += 1
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst = f"{name}[{c}] seed {seed}"
    report.passed = report.max_rel_error < tol
    return report


# ----------------------------------------------------------------------
# component builders


def _loss_direction(shape, rng) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _build_linear(seed):
    rng = np.random.default_rng([seed, 11])
    layer = Linear(6, 4, init=Initializer(seed), scope="gc.linear")
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    direction = _loss_direction((3, 4), rng)

    def loss_fn():
        return T.tsum(T.mul(layer(x), direction))

    return [("w", layer.w), ("b", layer.b), ("x", x)], loss_fn


def _build_matmul(seed):
    rng = np.random.default_rng([seed, 12])
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    direction = _loss_direction((3, 2), rng)

    def loss_fn():
        return T.tsum(T.mul(T.matmul(a, b), direction))

    return [("a", a), ("b", b)], loss_fn


def _build_conv(seed):
    rng = np.random.default_rng([seed, 13])
    x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    direction = _loss_direction((2, 3, 5, 5), rng)

    def loss_fn():
        return T.tsum(T.mul(T.conv2d(x, w, stride=1, pad=1), direction))

    return [("x", x), ("w", w)], loss_fn


def _build_batchnorm(seed):
    rng = np.random.default_rng([seed, 14])
    bn = BatchNorm2d(3)
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, size=3)
    bn.beta.data[...] = rng.normal(size=3) * 0.3
    x = Tensor(rng.normal(size=(4, 3, 4, 4)), requires_grad=True)
    direction = _loss_direction((4, 3, 4, 4), rng)

    def loss_fn():
        return T.tsum(T.mul(bn(x), direction))

    return [("gamma", bn.gamma), ("beta", bn.beta), ("x", x)], loss_fn


def _build_softmax(seed):
    rng = np.random.default_rng([seed, 15])
    x = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    direction = _loss_direction((5, 7), rng)

    def loss_fn():
        return T.tsum(T.mul(T.softmax(x, axis=1), direction))

    return [("x", x)], loss_fn


def _build_sa(seed):
    rng = np.random.default_rng([seed, 16])
    layer = SelfAttention(8, 2, init=Initializer(seed), scope="gc.sa")
    layer.gamma.data[...] = 0.5
    x = Tensor(rng.normal(size=(8, 16)), requires_grad=True)
    direction = _loss_direction((8, 16), rng)

    def loss_fn():
        return T.tsum(T.mul(layer(x), direction))

    params = [(n, p) for n, p in layer.named_parameters()]
    params.append(("x", x))
    return params, loss_fn


def _build_gamma_mod(squash):
    def build(seed):
        rng = np.random.default_rng([seed, 17])
        layer = SelfAttention(6, 2, init=Initializer(seed), scope="gc.gsa")
        mod = GammaModulator(10, squash=squash)
        mod.w.data[...] = rng.normal(size=(10, 1)) * 0.4
        h = Tensor(rng.normal(size=(2, 10)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 6, 9)), requires_grad=True)
        direction = _loss_direction((2, 6, 9), rng)

        def loss_fn():
            maps = layer.attention_maps(x)
            mixed = layer.mix_values(x, maps)
            return T.tsum(T.mul(mod(h, mixed, x), direction))

        return [("w_h", mod.w), ("h", h), ("x", x), ("value_w", layer.value_w)], loss_fn

    return build


def _build_beta_mod(seed):
    rng = np.random.default_rng([seed, 18])
    layer = SelfAttention(6, 2, init=Initializer(seed), scope="gc.bsa")
    layer.gamma.data[...] = 0.7
    mod = BetaModulator(6, 10, 5, init=Initializer(seed), scope="gc.bmod")
    h = Tensor(rng.normal(size=(2, 10)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 6, 8)), requires_grad=True)
    direction = _loss_direction((2, 6, 8), rng)

    def loss_fn():
        return T.tsum(T.mul(modulated_sa_forward(layer, mod, h, x), direction))

    params = [("p_w", mod.p_w), ("q_w", mod.q_w), ("h", h), ("x", x), ("gamma", layer.gamma)]
    params.extend((n, p) for n, p in layer.named_parameters() if n != "gamma")
    return params, loss_fn


def _build_block_sa(seed):
    rng = np.random.default_rng([seed, 19])
    init = Initializer(seed)
    sa = SelfAttention(8, 1, init=init, scope="gc.block.sa")
    sa.gamma.data[...] = 0.3
    block = ResidualBlock(8, 8, 1, init=init, scope="gc.block", sa=sa)
    x = Tensor(rng.normal(size=(2, 8, 4, 4)), requires_grad=True)
    direction = _loss_direction((2, 8, 4, 4), rng)

    def loss_fn():
        return T.tsum(T.mul(block(x), direction))

    params = [(n, p) for n, p in block.named_parameters()]
    params.append(("x", x))
    return params, loss_fn


def _build_encoder(seed):
    rng = np.random.default_rng([seed, 20])
    enc = QuestionEncoder(12, embed_dim=5, hidden_dim=6, cell="gated", init=Initializer(seed), scope="gc.enc")
    tokens = rng.integers(2, 12, size=(3, 4))
    direction = _loss_direction((3, 6), rng)

    def loss_fn():
        return T.tsum(T.mul(enc(tokens), direction))

    return list(enc.named_parameters()), loss_fn


def _build_model(seed):
    rng = np.random.default_rng([seed, 21])
    plan = desk_plan(sa_placements=frozenset({(3, 3)}))
    model = VqaModel(plan, vocab_size=20, answers=ANSWERS, seed=seed)
    model.train()
    for _, _, sa, _ in model.backbone.attention_sites():
        sa.gamma.data[...] = 0.25  # move off the exact-identity point
    images = rng.uniform(0.0, 1.0, size=(2, 3, 32, 32))
    tokens = rng.integers(2, 20, size=(2, 6))
    labels = rng.integers(0, len(ANSWERS), size=2)

    def loss_fn():
        return T.softmax_cross_entropy(model.forward(images, tokens), labels)

    return list(model.named_parameters()), loss_fn


COMPONENTS = {
    "linear": (_build_linear, 1e-6),
    "matmul": (_build_matmul, 1e-6),
    "conv": (_build_conv, 1e-5),
    "batchnorm": (_build_batchnorm, 1e-4),
    "softmax": (_build_softmax, 1e-6),
    "sa": (_build_sa, 1e-4),
    "gamma-mod": (_build_gamma_mod("none"), 1e-4),
    "gamma-mod-sigmoid": (_build_gamma_mod("sigmoid"), 1e-4),
    "beta-mod": (_build_beta_mod, 1e-4),
    "block-sa": (_build_block_sa, 1e-4),
    "encoder": (_build_encoder, 1e-4),
    "model": (_build_model, 1e-4),
}
