"""Finite-difference checks over every differentiable operation and module.

Each case is a float64 micro-instance. Outputs are contracted against a
fixed random tensor before checking, so symmetric reductions (a plain sum
through batch normalization, for instance) cannot hide a wrong gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from dtnet import ops
from dtnet.gradcheck import GradcheckReport, gradcheck
from dtnet.mdic import DmParams, EmParams, MdicConfig, ThresholdSpec, dm_forward, em_forward, threshold_conv
from dtnet.tensor import Tensor

SCOPES = ("all", "conv", "bn", "pool", "bilinear", "flip", "threshold", "em", "dm", "model", "loss", "plumbing")


@dataclass
class Case:
    name: str
    scope: str
    f: Callable[..., Tensor]
    inputs: list[Tensor]
    max_coords: int | None = None


@dataclass
class CaseResult:
    name: str
    scope: str
    report: GradcheckReport
    seconds: float


def _projected(f, shape_seed: int):
    """Wrap ``f`` so its output is reduced by a fixed random weighting."""
    cache: dict = {}

    def g(*xs):
        out = f(*xs)
        if out.data.ndim == 0:
            return out
        if "w" not in cache:
            cache["w"] = Tensor(np.random.default_rng(shape_seed).normal(size=out.shape))
        return ops.sum(ops.mul(out, cache["w"]))

    return g


def _randn(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _away_from(rng, shape, points, gap=1e-3) -> Tensor:
    """Normal draws nudged away from the kinks at ``points``."""
    a = rng.normal(size=shape)
    for p in points:
        near = np.abs(a - p) < gap
        a[near] = p + np.where(a[near] >= p, gap, -gap) * 2
    return Tensor(a)


def _store_from_specs(specs, rng) -> dict[str, Tensor]:
    store = {}
    for s in specs:
        if s.init == "he":
            arr = rng.uniform(-1, 1, size=s.shape) * np.sqrt(6.0 / s.fan_in)
        elif s.init == "ones":
            arr = 1.0 + 0.1 * rng.normal(size=s.shape) if s.trainable else np.ones(s.shape)
        else:
            arr = 0.1 * rng.normal(size=s.shape) if s.trainable else np.zeros(s.shape)
        store[s.name] = Tensor(arr)
    return store


def _module_case(kind: str, seed: int) -> Case:
    from dtnet.mdic import dm_param_specs, em_param_specs

    rng = np.random.default_rng(seed)
    cfg = MdicConfig(4, 4)
    if kind == "em":
        specs = em_param_specs("m", cfg)
        store = _store_from_specs(specs, rng)
        params = EmParams.from_store(store, "m", cfg, ThresholdSpec(0.1, "epsilon"))
        names = [s.name for s in specs if s.trainable]
        x = _randn(rng, 1, 4, 8, 8)

        def f(x, *ws):
            skip, pooled = em_forward(x, params, "train")
            return ops.concat_channels([ops.maxpool2(skip), pooled])

    else:
        specs = dm_param_specs("m", cfg)
        store = _store_from_specs(specs, rng)
        params = DmParams.from_store(store, "m", cfg)
        names = [s.name for s in specs if s.trainable]
        x = _randn(rng, 1, 4, 4, 4)
        skip = _randn(rng, 1, 4, 8, 8)
        names = names + ["__skip"]
        store["__skip"] = skip

        def f(x, *ws):
            return dm_forward(x, skip, params, "train")

    return Case(f"{kind}_forward", kind, _projected(f, seed + 1), [x] + [store[n] for n in names])


def _model_case(seed: int) -> Case:
    from dtnet.model import DtNetConfig, build
    from dtnet.train import softmax_xent

    cfg = DtNetConfig(encoder_filters=(4, 4, 4, 4, 4), input_size=32, num_classes=3)
    model = build(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = _randn(rng, 2, 1, 32, 32)
    labels = rng.integers(0, 3, size=(2, 32, 32))
    picked = [
        model.store["enc1/part2/branch3/conv/weight"],
        model.store["enc3/integrate_b/bn/gamma"],
        model.store["dec5/fuse/conv/weight"],
        model.store["classifier/conv/weight"],
    ]

    def f(x, *ws):
        return softmax_xent(model.forward(x, "train"), labels)

    return Case("model_loss", "model", f, [x, *picked], 12)


def build_cases(scope: str = "all", seed: int = 0) -> list[Case]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {', '.join(SCOPES)}")
    from dtnet.train import softmax_xent

    rng = np.random.default_rng(seed)
    cases: list[Case] = []

    def add(name, sc, f, inputs, max_coords=None):
        cases.append(Case(name, sc, _projected(f, seed + len(cases)), inputs, max_coords))

    for k in (1, 3, 5):
        add(f"conv2d_k{k}", "conv", ops.conv2d, [_randn(rng, 2, 3, 5, 5), _randn(rng, 4, 3, k, k), _randn(rng, 4)])
    add(
        "batchnorm_train", "bn",
        lambda x, g, b: ops.batchnorm(x, g, b, None, None, "train"),
        [_randn(rng, 3, 2, 3, 3), _randn(rng, 2), _randn(rng, 2)],
    )
    rm, rv = Tensor(rng.normal(size=2)), Tensor(rng.uniform(0.5, 2, size=2))
    add(
        "batchnorm_infer", "bn",
        lambda x, g, b: ops.batchnorm(x, g, b, rm, rv, "infer"),
        [_randn(rng, 2, 2, 3, 3), _randn(rng, 2), _randn(rng, 2)],
    )
    add("relu", "plumbing", ops.relu, [_away_from(rng, (2, 3, 4, 4), [0.0])])
    add("add", "plumbing", ops.add, [_randn(rng, 2, 3), _randn(rng, 2, 3)])
    add("mul", "plumbing", ops.mul, [_randn(rng, 2, 3), _randn(rng, 2, 3)])
    add("sum", "plumbing", ops.sum, [_randn(rng, 2, 3, 2)])
    add("mean", "plumbing", ops.mean, [_randn(rng, 2, 3, 2)])
    add("maxpool2", "pool", ops.maxpool2, [_randn(rng, 2, 3, 6, 6)])
    add("bilinear_up2", "bilinear", ops.bilinear_up2, [_randn(rng, 2, 3, 4, 4)])
    for kind in ops.FlipKind:
        add(f"flip_{kind.name.lower()}", "flip", lambda x, k=kind: ops.flip_apply(x, k), [_randn(rng, 1, 2, 4, 4)])
    add("split4", "plumbing", lambda x: ops.concat_channels(list(ops.split4(x))[::-1]), [_randn(rng, 1, 8, 3, 3)])
    add("concat_channels", "plumbing", lambda a, b: ops.concat_channels([a, b]), [_randn(rng, 1, 2, 3, 3), _randn(rng, 1, 3, 3, 3)])
    for variant in ("hard", "epsilon"):
        spec = ThresholdSpec(0.3, variant)
        add(
            f"threshold_{variant}", "threshold",
            lambda x, s=spec: threshold_conv(x, s),
            [_away_from(rng, (2, 3, 4, 4), [0.0, 0.3])],
        )
    labels = rng.integers(0, 4, size=(2, 3, 3))
    add("softmax_xent", "loss", lambda z: softmax_xent(z, labels), [_randn(rng, 2, 4, 3, 3)])
    cases.append(_module_case("em", seed + 100))
    cases.append(_module_case("dm", seed + 200))
    if scope in ("model", "all"):
        cases.append(_model_case(seed + 300))
    return [c for c in cases if scope == "all" or c.scope == scope]


def run_suite(scope: str = "all", eps: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> list[CaseResult]:
    results = []
    for case in build_cases(scope, seed):
        start = time.perf_counter()
        report = gradcheck(case.f, case.inputs, eps=eps, tol=tol, max_coords=case.max_coords, seed=seed)
        results.append(CaseResult(case.name, case.scope, report, time.perf_counter() - start))
    return results
