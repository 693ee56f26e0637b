"""
Central finite-difference checks for reverse-mode gradients.
"""

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from src.autodiff import ops
from src.autodiff.engine import DiffNode, gradients, parameter


def numerical_gradient(
    fn: Callable[[Sequence[np.ndarray]], float],
    inputs: Sequence[np.ndarray],
    index: int,
    h: float = 1e-5,
) -> np.ndarray:
    """Central differences of a scalar function with respect to inputs[index]."""
    values = [np.array(v, dtype=np.float64) for v in inputs]
    target = values[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn(values)
        flat[i] = original - h
        minus = fn(values)
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / max(scale, 1e-12))


def check_gradients(
    build: Callable[[Sequence[DiffNode]], DiffNode],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    h: float = 1e-5,
) -> float:
    """
    Compare reverse-mode gradients of an op against finite differences.

    The op output is contracted with a fixed random projection so every
    output entry contributes to the scalar being differentiated.

    Args:
        build: Maps input nodes to the op output
        inputs: Input arrays
        seed: Seed for the projection
        h: Finite-difference step

    Returns:
        Largest relative error over all inputs
    """
    nodes = [parameter(v) for v in inputs]
    out = build(nodes)
    projection = np.random.default_rng(seed).normal(size=out.shape)

    def scalar(node_out: DiffNode) -> DiffNode:
        return ops.sum(ops.mul(node_out, ops.as_node(projection)))

    analytic = gradients(scalar(out), nodes)

    def evaluate(values: Sequence[np.ndarray]) -> float:
        return float(np.sum(build([parameter(v) for v in values]).value * projection))

    worst = 0.0
    for i, grad in enumerate(analytic):
        numeric = numerical_gradient(evaluate, inputs, i, h)
        worst = max(worst, relative_error(grad, numeric))
    return worst


InputFactory = Callable[[np.random.Generator], List[np.ndarray]]
Builder = Callable[[Sequence[DiffNode]], DiffNode]


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _distinct(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    # spaced values keep the max-pool argmax stable under finite differences
    count = int(np.prod(shape))
    return (rng.permutation(count) * 0.1 + rng.uniform(0, 0.01, size=count)).reshape(shape)


# Every differentiable op with a small input generator
GRADIENT_CASES: Dict[str, Tuple[Builder, InputFactory]] = {
    "matmul": (lambda n: ops.matmul(n[0], n[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "transpose": (lambda n: ops.transpose(n[0]), lambda r: [r.normal(size=(3, 5))]),
    "dense": (
        lambda n: ops.dense(n[0], n[1], n[2]),
        lambda r: [r.normal(size=(4, 3)), r.normal(size=(3, 5)), r.normal(size=(5,))],
    ),
    "conv2d": (
        lambda n: ops.conv2d(n[0], n[1], n[2], stride=1, padding=1),
        lambda r: [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))],
    ),
    "conv2d_strided": (
        lambda n: ops.conv2d(n[0], n[1], n[2], stride=2, padding=0),
        lambda r: [r.normal(size=(1, 2, 7, 7)), r.normal(size=(2, 2, 3, 3)), r.normal(size=(2,))],
    ),
    "max_pool2d": (lambda n: ops.max_pool2d(n[0], 2), lambda r: [_distinct(r, (2, 2, 4, 4))]),
    "global_avg_pool": (lambda n: ops.global_avg_pool(n[0]), lambda r: [r.normal(size=(2, 3, 4, 4))]),
    "relu": (lambda n: ops.relu(n[0]), lambda r: [_away_from_zero(r, (4, 5))]),
    "exp": (lambda n: ops.exp(n[0]), lambda r: [r.uniform(-1.0, 1.0, size=(3, 4))]),
    "log": (lambda n: ops.log(n[0]), lambda r: [r.uniform(0.5, 2.0, size=(3, 4))]),
    "add": (lambda n: ops.add(n[0], n[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "add_bias": (lambda n: ops.add(n[0], n[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda n: ops.sub(n[0], n[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "mul": (lambda n: ops.mul(n[0], n[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "scale": (lambda n: ops.scale(n[0], n[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=())]),
    "sum": (lambda n: ops.sum(n[0]), lambda r: [r.normal(size=(3, 4))]),
    "sum_axis": (lambda n: ops.sum(n[0], axis=1), lambda r: [r.normal(size=(3, 4, 2))]),
    "mean": (lambda n: ops.mean(n[0], axis=0), lambda r: [r.normal(size=(5, 3))]),
    "reshape": (lambda n: ops.reshape(n[0], (2, 6)), lambda r: [r.normal(size=(3, 4))]),
    "concat": (
        lambda n: ops.concat([n[0], n[1]], axis=0),
        lambda r: [r.normal(size=(2, 3)), r.normal(size=(4, 3))],
    ),
    "take_rows": (lambda n: ops.take_rows(n[0], [0, 2, 2, 4]), lambda r: [r.normal(size=(5, 3))]),
    "pick": (lambda n: ops.pick(n[0], [1, 0, 3]), lambda r: [r.normal(size=(3, 4))]),
    "softmax": (lambda n: ops.softmax(n[0]), lambda r: [r.normal(size=(3, 4))]),
    "log_softmax": (lambda n: ops.log_softmax(n[0]), lambda r: [r.normal(size=(3, 4))]),
    "layer_norm": (
        lambda n: ops.layer_norm(n[0], n[1], n[2]),
        lambda r: [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))],
    ),
    "l2_normalize": (lambda n: ops.l2_normalize(n[0]), lambda r: [r.normal(size=(3, 5))]),
    "cosine_similarity": (
        lambda n: ops.cosine_similarity(n[0], n[1]),
        lambda r: [r.normal(size=(3, 5)), r.normal(size=(3, 5))],
    ),
}


def check_op(name: str, seed: int, h: float = 1e-5) -> float:
    """Worst relative gradient error of a registered op for one seed."""
    build, make_inputs = GRADIENT_CASES[name]
    rng = np.random.default_rng(seed)
    return check_gradients(build, make_inputs(rng), seed=seed, h=h)


# Shape-preserving steps on a (3, 4) node; extras are (weight 4x4, bias, gamma, beta)
ChainStep = Callable[[DiffNode, Sequence[DiffNode]], DiffNode]

CHAIN_STEPS: Dict[str, ChainStep] = {
    "matmul": lambda x, e: ops.matmul(x, e[0]),
    "dense": lambda x, e: ops.dense(x, e[0], e[1]),
    "add_bias": lambda x, e: ops.add(x, e[1]),
    "double_transpose": lambda x, e: ops.transpose(ops.transpose(x)),
    "reshape": lambda x, e: ops.reshape(ops.reshape(x, (2, 6)), (3, 4)),
    "take_rows": lambda x, e: ops.take_rows(ops.concat([x, x], axis=0), [0, 4, 2]),
    "scale": lambda x, e: ops.scale(x, 0.5),
    "exp_softmax": lambda x, e: ops.exp(ops.softmax(x)),
    "log_softmax": lambda x, e: ops.log_softmax(x),
    "layer_norm": lambda x, e: ops.layer_norm(x, e[2], e[3]),
    "l2_normalize": lambda x, e: ops.l2_normalize(x),
}


def random_chain(seed: int, length: int = 5) -> Tuple[List[str], Builder, List[np.ndarray]]:
    """Draw a composition of chain steps and its inputs."""
    rng = np.random.default_rng(seed)
    names = [str(n) for n in rng.choice(sorted(CHAIN_STEPS), size=length)]
    inputs = [
        rng.normal(size=(3, 4)),
        0.5 * rng.normal(size=(4, 4)),
        rng.normal(size=(4,)),
        rng.uniform(0.5, 1.5, size=(4,)),
        rng.normal(size=(4,)),
    ]

    def build(nodes: Sequence[DiffNode]) -> DiffNode:
        x = nodes[0]
        for name in names:
            x = CHAIN_STEPS[name](x, nodes[1:])
        return x

    return names, build, inputs


def check_chain(seed: int, length: int = 5, h: float = 1e-5) -> float:
    """Worst relative gradient error of a random composition of ops."""
    _, build, inputs = random_chain(seed, length)
    return check_gradients(build, inputs, seed=seed, h=h)
