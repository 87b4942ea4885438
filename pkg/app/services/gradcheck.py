"""Central finite-difference checks of the autodiff gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from app.models.schemas import Dimension, GradCheckConfig, ModelConfig
from app.services.losses import total_loss
from app.services.model import GaitModel
from app.services.mta import MtaBlock
from app.services.mtp import MtpHead
from app.services.tensor import (
    Module,
    Tensor,
    conv,
    dense,
    elementwise,
    leaky_relu,
    log_softmax,
    no_grad,
    parameter,
    power,
    reduce,
    sigmoid,
    sqrt,
    stack,
)

logger = logging.getLogger(__name__)

Program = Callable[[], Tensor]

DEFAULT_FLOOR = 1e-8
SUITES = ("ops", "mhn_mta", "mtp", "model")


class GradCheckError(RuntimeError):
    """The checked program is not deterministic."""


@dataclass
class GradCheckResult:
    max_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    entries: int = 0


def grad_check(
    program: Program,
    params: dict[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = DEFAULT_FLOOR,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Largest ``|analytic - numeric| / max(floor, |analytic| + |numeric|)`` over checked entries.

    ``max_entries`` samples that many entries per parameter instead of all of them.
    """
    named = params if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    with no_grad():
        first = program().numpy()
        second = program().numpy()
    if not np.array_equal(first, second):
        raise GradCheckError("program returned different values for identical parameters")

    for p in named.values():
        p.grad = None
    loss = program()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named.items()}

    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    for name, p in named.items():
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            picks = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            picks = np.arange(flat.size)
        worst = 0.0
        for pick in picks:
            index = np.unravel_index(int(pick), p.shape)
            original = p.data[index]
            with no_grad():
                p.data[index] = original + eps
                plus = program().item()
                p.data[index] = original - eps
                minus = program().item()
            p.data[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[name][index])
            error = abs(exact - numeric) / max(floor, abs(exact) + abs(numeric))
            worst = max(worst, error)
            result.entries += 1
        result.per_param[name] = worst
        result.max_error = max(result.max_error, worst)
    logger.debug("grad_check: %d entries, max relative error %.3e", result.entries, result.max_error)
    return result


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)``; random weights keep the upstream gradient non-uniform."""
    return reduce(out * Tensor(weights), "sum", range(out.ndim)).reshape(())


# ----------------------------------------------------------------------
# Suites
# ----------------------------------------------------------------------
def _untied(rng: np.random.Generator, shape: tuple[int, ...], low: float = -2.0, high: float = 2.0) -> np.ndarray:
    """Random values at least ``(high - low) / (2 size)`` apart, so max never ties under a finite step."""
    size = int(np.prod(shape))
    values = np.linspace(low, high, size) + rng.uniform(-0.25, 0.25, size) * (high - low) / size
    return rng.permutation(values).reshape(shape)


def op_programs(rng: np.random.Generator) -> dict[str, tuple[Program, dict[str, Tensor]]]:
    programs: dict[str, tuple[Program, dict[str, Tensor]]] = {}

    def add(name: str, build: Callable[..., Tensor], **shapes: tuple[int, ...]) -> None:
        tensors = {key: parameter(rng.uniform(-2.0, 2.0, size=shape)) for key, shape in shapes.items()}
        probe = build(**tensors)
        weights = rng.normal(size=probe.shape)
        programs[name] = (lambda: weighted_sum(build(**tensors), weights), tensors)

    add("conv1d", lambda x, k: conv(x, k, dims=1), x=(2, 3, 7), k=(4, 3, 3))
    add("conv2d", lambda x, k: conv(x, k, dims=2), x=(2, 2, 5, 4), k=(3, 2, 3, 3))
    add("dense", lambda x, w: dense(x, w), x=(3, 5), w=(4, 5))
    add("leaky_relu", lambda x: leaky_relu(x), x=(4, 6))
    add("sigmoid", lambda x: sigmoid(x), x=(4, 6))
    add("reduce_mean", lambda x: reduce(x, "mean", (1, 2)), x=(3, 4, 5))
    add("elementwise_mul", lambda a, b: elementwise(a, b, "mul"), a=(3, 1, 2, 2), b=(3, 4, 2, 2))
    add("elementwise_add", lambda a, b: elementwise(a, b, "add"), a=(1, 4, 2), b=(3, 4, 2))
    add("log_softmax", lambda x: log_softmax(x), x=(3, 5))
    add("stack", lambda a, b: stack([a, b], axis=1), a=(3, 2), b=(3, 2))

    positive = parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    exponent = parameter(np.array([2.5]))
    pow_weights = rng.normal(size=(3, 4))
    programs["power"] = (
        lambda: weighted_sum(power(positive, exponent), pow_weights),
        {"x": positive, "p": exponent},
    )
    sqrt_weights = rng.normal(size=(3, 4))
    programs["sqrt"] = (lambda: weighted_sum(sqrt(positive), sqrt_weights), {"x": positive})

    spread = parameter(_untied(rng, (3, 4, 5)))
    max_weights = rng.normal(size=(3, 1, 1))
    programs["reduce_max"] = (lambda: weighted_sum(reduce(spread, "max", (1, 2)), max_weights), {"x": spread})
    return programs


def _module_program(forward: Callable[[Tensor], Tensor], x: Tensor, weights: np.ndarray) -> Program:
    return lambda: weighted_sum(forward(x), weights)


def condition_meta_weights(module: Module, rng: np.random.Generator) -> None:
    """Redraw every generator output layer at ``1 / sqrt(C)`` so generated weights are O(1)."""
    for path, p in module.named_parameters().items():
        if path.endswith("w_meta2"):
            bound = 1.0 / np.sqrt(p.shape[1])
            p.data = rng.uniform(-bound, bound, size=p.shape)


def mta_programs(rng: np.random.Generator, mode: str = "meta") -> dict[str, tuple[Program, dict[str, Tensor]]]:
    """One program per dimension on a ``4 x 6 x 8 x 6`` input with non-zero channel means."""
    programs = {}
    shape = (4, 6, 8, 6)
    for dim in Dimension:
        block = MtaBlock(dim, *shape, rng=rng, kernel_set=(1, 3, 5), ratio=2, mode=mode, gate=True)
        condition_meta_weights(block, rng)
        x = parameter(rng.uniform(0.0, 2.0, size=shape))
        weights = rng.normal(size=shape)
        params = {f"block.{name}": p for name, p in block.named_parameters().items()}
        params["input"] = x
        programs[f"mta_{dim.value}"] = (_module_program(block.forward, x, weights), params)
    return programs


def mtp_programs(rng: np.random.Generator) -> dict[str, tuple[Program, dict[str, Tensor]]]:
    programs = {}
    shape = (4, 6, 4, 3)
    for weighting in ("meta", "static"):
        head = MtpHead(4, 6, rng=rng, weighting=weighting)
        condition_meta_weights(head, rng)
        x = parameter(rng.uniform(0.2, 2.0, size=shape))
        weights = rng.normal(size=(4, 1, 4, 3))
        params = {f"head.{name}": p for name, p in head.named_parameters().items()}
        params["input"] = x
        programs[f"mtp_{weighting}"] = (_module_program(head.forward, x, weights), params)
    return programs


def model_program(config: ModelConfig, rng: np.random.Generator) -> tuple[Program, dict[str, Tensor]]:
    """Full objective on two identities x two continuous-valued clips."""
    model = GaitModel(config, num_classes=2)
    condition_meta_weights(model, rng)
    height, width = config.resolution
    clips = [Tensor(rng.uniform(0.0, 1.0, size=(1, config.clip_length, height, width))) for _ in range(4)]
    labels = np.array([0, 0, 1, 1])

    def program() -> Tensor:
        embeddings = stack([model.embed(clip) for clip in clips], axis=0)
        return total_loss(embeddings, labels, model.classifiers, config.margin).total

    return program, model.named_parameters()


def run_suites(
    config: GradCheckConfig,
    model_config: ModelConfig,
    suites: Sequence[str] = SUITES,
) -> dict[str, float]:
    """Max relative error per checked program, grouped by suite name prefix."""
    rng = np.random.default_rng(config.seed)
    errors: dict[str, float] = {}
    for suite in suites:
        if suite == "ops":
            checks = {name: (prog, params, None) for name, (prog, params) in op_programs(rng).items()}
        elif suite == "mhn_mta":
            checks = {
                name: (prog, params, config.entries_per_param)
                for name, (prog, params) in mta_programs(rng).items()
            }
        elif suite == "mtp":
            checks = {
                name: (prog, params, config.entries_per_param)
                for name, (prog, params) in mtp_programs(rng).items()
            }
        elif suite == "model":
            prog, params = model_program(model_config, rng)
            checks = {"model": (prog, params, config.entries_per_param)}
        else:
            raise ValueError(f"unknown grad-check suite {suite!r}")
        for name, (prog, params, entries) in checks.items():
            result = grad_check(prog, params, eps=config.eps, max_entries=entries, seed=config.seed)
            errors[f"{suite}/{name}"] = result.max_error
            logger.info("grad_check %s/%s: max relative error %.3e", suite, name, result.max_error)
    return errors
