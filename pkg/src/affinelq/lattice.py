"""Non-recombining Bernoulli tree discretization of a d-dimensional Brownian filtration.

Level l holds 2**(d*l) nodes, one per sign history. Each step every Brownian
component moves +-sqrt(step), and each of the 2**d children of a node carries
probability 2**(-d). Conditional expectations and martingale coefficients are
therefore exact sums, which is the whole point of the construction: adapted
quantities live on the tree with no statistical error, only time-discretization
error.

Storage convention for adapted fields: one numpy array per level with the node
axis first, e.g. shape (2**(d*l), n, n) for a matrix field. The children of
node j at level l occupy the slice j*2**d : (j+1)*2**d at level l+1, child m
encoding sign +1 for component i when bit i of m is 0 and -1 when it is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadDimensions, MissingChild


def _child_sign_matrix(d: int) -> np.ndarray:
    m = np.arange(2**d)[:, None]
    bits = (m >> np.arange(d)[None, :]) & 1
    return np.where(bits == 0, 1.0, -1.0)


@dataclass(frozen=True)
class FiltrationLattice:
    """Carrier for all adapted quantities at desk scale.

    Parameters
    ----------
    depth : int
        Number of time steps L; the tree has levels 0..L.
    step : float
        Time step. Increments are +-sqrt(step) per Brownian component.
    d : int
        Brownian dimension.
    max_nodes : int
        Memory budget: 2**(d*depth) may not exceed this.
    """

    depth: int
    step: float
    d: int = 1
    max_nodes: int = 2**21
    _paths: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.depth < 1 or self.d < 1:
            raise BadDimensions("lattice depth and Brownian dimension must be >= 1")
        if self.step <= 0.0:
            raise BadDimensions("lattice step must be positive")
        if 2 ** (self.d * self.depth) > self.max_nodes:
            raise BadDimensions(
                f"lattice with depth {self.depth} and d={self.d} needs "
                f"{2**(self.d*self.depth)} leaves, over the budget {self.max_nodes}"
            )

    @property
    def branching(self) -> int:
        return 2**self.d

    @property
    def times(self) -> np.ndarray:
        return self.step * np.arange(self.depth + 1)

    @property
    def child_signs(self) -> np.ndarray:
        """(2**d, d) array of per-branch increment signs."""
        return _child_sign_matrix(self.d)

    def n_nodes(self, level: int) -> int:
        return 2 ** (self.d * level)

    def node_paths(self, level: int) -> np.ndarray:
        """Brownian values W at a level, shape (2**(d*level), d)."""
        if level not in self._paths:
            if level == 0:
                w = np.zeros((1, self.d))
            else:
                prev = self.node_paths(level - 1)
                inc = np.sqrt(self.step) * self.child_signs
                w = (prev[:, None, :] + inc[None, :, :]).reshape(-1, self.d)
            self._paths[level] = w
        return self._paths[level]

    # -- per-node operations ------------------------------------------------

    def condexp(self, children: np.ndarray, node: int | None = None) -> np.ndarray:
        """Exact conditional expectation: equal-weight average over the 2**d children."""
        children = np.asarray(children, dtype=float)
        if children.shape[0] != self.branching:
            raise MissingChild(
                f"expected {self.branching} children, got {children.shape[0]}"
            )
        return children.mean(axis=0)

    def martingale_coefficient(
        self, children: np.ndarray, node: int | None = None, i: int = 0
    ) -> np.ndarray:
        """Integrand of the dW^i part recovered from child differences.

        Returns E[V xi_i] / step over the children, which for d=1 reduces to
        (V_plus - V_minus) / (2 sqrt(step)).
        """
        children = np.asarray(children, dtype=float)
        if children.shape[0] != self.branching:
            raise MissingChild(
                f"expected {self.branching} children, got {children.shape[0]}"
            )
        signs = self.child_signs[:, i]
        shape = (-1,) + (1,) * (children.ndim - 1)
        return (signs.reshape(shape) * children).mean(axis=0) / np.sqrt(self.step)

    # -- level-sweep operations (node axis first) ----------------------------

    def _group_children(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        m = values.shape[0] // self.branching
        return values.reshape((m, self.branching) + values.shape[1:])

    def condexp_level(self, values: np.ndarray) -> np.ndarray:
        """condexp applied to a whole level at once; values live at level l+1."""
        return self._group_children(values).mean(axis=1)

    def martingale_coefficient_level(self, values: np.ndarray, i: int) -> np.ndarray:
        g = self._group_children(values)
        signs = self.child_signs[:, i].reshape((1, self.branching) + (1,) * (g.ndim - 2))
        return (signs * g).mean(axis=1) / np.sqrt(self.step)

    def mixed_sign_level(self, values: np.ndarray, i: int, j: int) -> np.ndarray:
        """E[sigma_i sigma_j V] per parent node; the i=j case returns condexp."""
        g = self._group_children(values)
        s = self.child_signs[:, i] * self.child_signs[:, j]
        signs = s.reshape((1, self.branching) + (1,) * (g.ndim - 2))
        return (signs * g).mean(axis=1)

    def level_expectation(self, values: np.ndarray) -> np.ndarray:
        """Unconditional expectation of a level field (all nodes equally likely)."""
        return np.asarray(values).mean(axis=0)

    def subtree_expectation(self, values: np.ndarray, base_level: int) -> np.ndarray:
        """Conditional expectation of a level field given the sigma-field at base_level.

        values has the node axis of some level l >= base_level; returns one entry
        per base-level node, averaging over its descendants.
        """
        values = np.asarray(values)
        m_base = self.n_nodes(base_level)
        if values.shape[0] % m_base != 0:
            raise MissingChild(
                f"level field of size {values.shape[0]} is not refined from "
                f"{m_base} base nodes"
            )
        block = values.shape[0] // m_base
        return values.reshape((m_base, block) + values.shape[1:]).mean(axis=1)

    def dump_csv(self, path, level_fields: dict[str, list[np.ndarray]]) -> None:
        """Debug dump: one row per (level, node) with flattened field values."""
        import csv

        names = list(level_fields)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", "node_id"] + names)
            for level in range(self.depth + 1):
                for node in range(self.n_nodes(level)):
                    row = [level, node]
                    for name in names:
                        row.append(
                            " ".join(repr(v) for v in np.ravel(level_fields[name][level][node]))
                        )
                    writer.writerow(row)
