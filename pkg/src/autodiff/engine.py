"""
Reverse-mode automatic differentiation over dense float64 arrays.

A DiffNode holds a value, the nodes it was computed from and the local
backward rule mapping the output gradient to one gradient per parent.
Gradients are accumulated in reverse topological order.
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import GraphError, NumericalError

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class DiffNode:
    """A value in a differentiable computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "op", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: Tuple["DiffNode", ...] = (),
        backward_rule: Optional[BackwardRule] = None,
        requires_grad: bool = False,
        op: str = "",
        name: str = "",
    ):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise GraphError(f"item() needs a single-element node, got shape {self.shape}")
        return float(self.value.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = self.name or self.op or "leaf"
        return f"DiffNode({label}, shape={self.shape}, requires_grad={self.requires_grad})"


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def constant(value, name: str = "") -> DiffNode:
    """Leaf node that never receives a gradient."""
    if isinstance(value, DiffNode):
        return value
    return DiffNode(_as_array(value), name=name)


def parameter(value, name: str = "") -> DiffNode:
    """Leaf node whose gradient is populated by backward()."""
    return DiffNode(_as_array(value), requires_grad=True, name=name)


def make_node(op: str, value: np.ndarray, parents: Sequence[DiffNode], backward_rule: BackwardRule) -> DiffNode:
    """
    Create an op output node, rejecting non-finite results.

    Args:
        op: Operation name (for diagnostics)
        value: Computed output
        parents: Input nodes
        backward_rule: Maps output gradient to a gradient per parent

    Returns:
        New DiffNode

    Raises:
        NumericalError: If the value holds NaN or Inf
    """
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op} produced non-finite values")
    requires_grad = any(p.requires_grad for p in parents)
    return DiffNode(
        value,
        parents=tuple(parents),
        backward_rule=backward_rule if requires_grad else None,
        requires_grad=requires_grad,
        op=op,
    )


def _topological_order(root: DiffNode) -> List[DiffNode]:
    # iterative DFS; graphs through a deep CNN exceed the recursion limit
    order: List[DiffNode] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def _check_scalar(root: DiffNode) -> None:
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")


def _propagate(root: DiffNode, order: List[DiffNode]) -> Dict[int, np.ndarray]:
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        upstream = grads.get(id(node))
        if upstream is None or node.backward_rule is None:
            continue
        parent_grads = node.backward_rule(upstream)
        for parent, grad in zip(node.parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            if grad.shape != parent.value.shape:
                raise GraphError(
                    f"{node.op} backward produced gradient {grad.shape} for input {parent.value.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
    return grads


def backward(root: DiffNode) -> None:
    """
    Populate .grad on every requires_grad node reachable from a scalar root.

    Running backward a second time over nodes that still hold gradients is an
    error; call zero_grad on the leaves first.

    Raises:
        GraphError: Non-scalar root or stale gradients in the graph
    """
    _check_scalar(root)
    if not root.requires_grad:
        return

    order = _topological_order(root)
    stale = [node for node in order if node.grad is not None]
    if stale:
        raise GraphError(
            f"backward already ran for {len(stale)} nodes (first: {stale[0]!r}); reset gradients first"
        )

    grads = _propagate(root, order)
    for node in order:
        grad = grads.get(id(node))
        node.grad = grad if grad is not None else np.zeros_like(node.value)


def gradients(root: DiffNode, targets: Sequence[DiffNode]) -> List[np.ndarray]:
    """
    Gradients of a scalar root with respect to the given nodes, without
    touching any node's .grad field.

    Args:
        root: Scalar output
        targets: Nodes to differentiate against (leaves or intermediates)

    Returns:
        One array per target, zeros where the target does not influence root
    """
    _check_scalar(root)
    if not root.requires_grad:
        return [np.zeros_like(t.value) for t in targets]
    grads = _propagate(root, _topological_order(root))
    return [grads.get(id(t), np.zeros_like(t.value)) for t in targets]


def zero_grad(nodes: Sequence[DiffNode]) -> None:
    for node in nodes:
        node.grad = None
