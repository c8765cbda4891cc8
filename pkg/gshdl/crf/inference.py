"""Tree-reweighted message passing on grid CRFs.

Messages live in the log domain. With node aggregate
``A_s = -theta_u(s) + rho * sum_{t in N(s)} m_{t->s}`` the update of the
directed message ``a -> b`` is::

    m_{a->b}(x_b) = lse_{x_a} [ -theta_ab(x_a, x_b) / rho + A_a(x_a) - m_{b->a}(x_a) ]

normalized over ``x_b`` and damped as ``(1 - damping) * new + damping * old``.
Every step can be recorded on a tape so that the unrolled iterations can be
differentiated in reverse.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from ..errors import ConfigError, NumericalError
from .potentials import SCHEDULES, GridGraph, Potentials

logger = logging.getLogger("gshdl.crf")


@dataclass(frozen=True)
class InferenceOptions:
    """Message-passing settings.

    ``tolerance`` > 0 stops early once no message moves by more than it
    within an iteration; 0 always runs ``iterations`` iterations.
    """

    iterations: int = 20
    damping: float = 0.5
    schedule: str = "sequential"
    tolerance: float = 0.0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not 0 <= self.damping < 1:
            raise ConfigError(f"damping must be in [0, 1), got {self.damping}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown message schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.tolerance < 0:
            raise ConfigError(f"tolerance must be >= 0, got {self.tolerance}")


@dataclass
class Beliefs:
    """Normalized node ``(H, W, C)`` and edge ``(E, C, C)`` pseudo-marginals."""

    node_beliefs: np.ndarray
    edge_beliefs: np.ndarray
    iterations_run: int


class MessageState:
    """Messages of a (possibly batched) grid plus the tape of recorded steps."""

    def __init__(self, graph: GridGraph, theta_u: np.ndarray, tables: np.ndarray, options: InferenceOptions):
        self.graph = graph
        self.theta_u = theta_u
        self.options = options
        self.rho = graph.rho
        e = graph.num_edges
        # -theta / rho for every directed edge, oriented [x_source, x_target]
        self.scaled = -np.concatenate([tables, tables.transpose(0, 2, 1)]) / self.rho
        # row 2E is the zero padding used by graph.incoming
        self.messages = np.zeros((2 * e + 1, theta_u.shape[1]))
        self.tape: List[Tuple[np.ndarray, np.ndarray]] = []
        self.iterations_run = 0

    def aggregate(self, nodes: Optional[np.ndarray] = None) -> np.ndarray:
        incoming = self.graph.incoming if nodes is None else self.graph.incoming[nodes]
        theta = self.theta_u if nodes is None else self.theta_u[nodes]
        return -theta + self.rho * self.messages[incoming].sum(axis=1)

    def _step_terms(self, group: np.ndarray):
        sources = self.graph.src[group]
        cavity = self.aggregate(sources) - self.messages[self.graph.reverse[group]]
        q = self.scaled[group] + cavity[:, :, None]
        raw = logsumexp(q, axis=1)
        new = raw - logsumexp(raw, axis=1, keepdims=True)
        return sources, q, raw, new

    def run(self, record: bool = False) -> None:
        alpha = self.options.damping
        steps = self.graph.schedule(self.options.schedule)
        for _ in range(self.options.iterations):
            before = self.messages.copy() if self.options.tolerance > 0 else None
            for group in steps:
                _, _, _, new = self._step_terms(group)
                if record:
                    self.tape.append((group, self.messages[group].copy()))
                self.messages[group] = (1.0 - alpha) * new + alpha * self.messages[group]
            self.iterations_run += 1
            if not np.all(np.isfinite(self.messages)):
                raise NumericalError(f"non-finite messages after iteration {self.iterations_run}")
            if before is not None and np.max(np.abs(self.messages - before), initial=0.0) < self.options.tolerance:
                break

    def log_beliefs(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unnormalized node ``(N, C)`` and edge ``(E, C, C)`` log-beliefs."""
        e = self.graph.num_edges
        u, v = self.graph.endpoints
        a = self.aggregate()
        z = (self.scaled[:e]
             + (a[u] - self.messages[e:2 * e])[:, :, None]
             + (a[v] - self.messages[:e])[:, None, :])
        return a, z

    def beliefs(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flat node ``(N, C)`` and edge ``(E, C, C)`` beliefs."""
        node_logits, edge_logits = self.log_beliefs()
        node = softmax(node_logits, axis=1)
        e, c = edge_logits.shape[0], edge_logits.shape[1]
        edge = softmax(edge_logits.reshape(e, c * c), axis=1).reshape(e, c, c)
        return node, edge

    def backward(self, grad_node_logits: np.ndarray, grad_edge_logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Reverse pass from gradients w.r.t. the node and edge logits.

        Consumes the tape and restores the initial messages.

        Returns:
            Tuple[np.ndarray, np.ndarray]: Gradients w.r.t. ``theta_u`` ``(N, C)``
            and the undirected pairwise tables ``(E, C, C)``
        """
        graph = self.graph
        e = graph.num_edges
        u, v = graph.endpoints
        alpha = self.options.damping
        rho = self.rho

        g_messages = np.zeros_like(self.messages)
        g_theta = np.zeros_like(self.theta_u)
        g_scaled = np.zeros_like(self.scaled)

        g_scaled[:e] += grad_edge_logits
        g_u = grad_edge_logits.sum(axis=2)
        g_v = grad_edge_logits.sum(axis=1)
        g_a = grad_node_logits.copy()
        np.add.at(g_a, u, g_u)
        np.add.at(g_a, v, g_v)
        g_messages[e:2 * e] -= g_u
        g_messages[:e] -= g_v
        g_theta -= g_a
        np.add.at(g_messages, graph.incoming, rho * g_a[:, None, :])
        g_messages[-1] = 0.0

        while self.tape:
            group, previous = self.tape.pop()
            self.messages[group] = previous
            sources, q, raw, new = self._step_terms(group)
            g_post = g_messages[group]
            g_new = (1.0 - alpha) * g_post
            g_messages[group] = alpha * g_post
            g_raw = g_new - np.exp(new) * g_new.sum(axis=1, keepdims=True)
            g_q = np.exp(q - raw[:, None, :]) * g_raw[:, None, :]
            g_scaled[group] += g_q
            g_cavity = g_q.sum(axis=2)
            g_messages[graph.reverse[group]] -= g_cavity
            np.add.at(g_theta, sources, -g_cavity)
            np.add.at(g_messages, graph.incoming[sources], rho * g_cavity[:, None, :])
            g_messages[-1] = 0.0

        g_tables = -(g_scaled[:e] + g_scaled[e:].transpose(0, 2, 1)) / rho
        return g_theta, g_tables


def stack_potentials(potentials: Sequence[Potentials]) -> Tuple[GridGraph, np.ndarray, np.ndarray]:
    """Disjoint-union graph plus flat unary and pairwise arrays for same-size images."""
    first = potentials[0].unary.shape
    if any(p.unary.shape != first for p in potentials):
        raise ConfigError("stacked potentials must share height, width and label count")
    h, w, c = first
    graph = GridGraph(h, w, c, batch=len(potentials))
    theta_u = np.concatenate([p.unary.reshape(-1, c) for p in potentials])
    tables = np.concatenate([p.pairwise for p in potentials]) if graph.num_edges else np.zeros((0, c, c))
    return graph, theta_u, tables


def trw_infer_many(potentials: Sequence[Potentials], options: InferenceOptions) -> List[Beliefs]:
    """Run inference jointly on several same-size images."""
    graph, theta_u, tables = stack_potentials(potentials)
    state = MessageState(graph, theta_u, tables, options)
    state.run()
    node, edge = state.beliefs()
    h, w, c = potentials[0].unary.shape
    per_edge = graph.edges_per_image
    return [
        Beliefs(
            node_beliefs=node[b * graph.pixels:(b + 1) * graph.pixels].reshape(h, w, c),
            edge_beliefs=edge[b * per_edge:(b + 1) * per_edge],
            iterations_run=state.iterations_run,
        )
        for b in range(graph.batch)
    ]


def trw_infer(potentials: Potentials, max_iterations: int = 20, damping: float = 0.5,
              schedule: str = "sequential", tolerance: float = 0.0) -> Beliefs:
    """Tree-reweighted pseudo-marginals with uniform edge appearance ``rho``.

    Args:
        potentials: Finite unary and pairwise potentials
        max_iterations: Message-passing iterations (one forward and one backward raster sweep each)
        damping: Weight of the previous message, in ``[0, 1)``
        schedule: ``sequential`` (raster sweeps) or ``parallel``
        tolerance: Early-stop threshold on the largest message change; 0 disables

    Returns:
        Beliefs: Normalized node and edge beliefs

    Raises:
        ConfigError: Invalid damping or schedule
        NumericalError: Non-finite messages
    """
    options = InferenceOptions(max_iterations, damping, schedule, tolerance)
    (beliefs,) = trw_infer_many([potentials], options)
    logger.debug(f"TRW on {potentials.unary.shape[:2]} grid ran {beliefs.iterations_run} iterations")
    return beliefs


def labels_from_beliefs(beliefs: Beliefs) -> np.ndarray:
    """Per-node argmax; ties go to the smaller label index."""
    return np.argmax(beliefs.node_beliefs, axis=2)


def segment(potentials: Potentials, inference_iterations: int = 20, damping: float = 0.5,
            schedule: str = "sequential") -> np.ndarray:
    """``H x W`` labeling from the argmax of the TRW node beliefs."""
    return labels_from_beliefs(trw_infer(potentials, inference_iterations, damping, schedule))


def segment_many(potentials: Sequence[Potentials], options: InferenceOptions) -> List[np.ndarray]:
    """Labelings of several images, batching same-size images together."""
    labels: List[Optional[np.ndarray]] = [None] * len(potentials)
    groups = {}
    for i, p in enumerate(potentials):
        groups.setdefault(p.unary.shape, []).append(i)
    for indices in groups.values():
        for i, beliefs in zip(indices, trw_infer_many([potentials[i] for i in indices], options)):
            labels[i] = labels_from_beliefs(beliefs)
    return labels
