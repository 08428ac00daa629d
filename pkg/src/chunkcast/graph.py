"""Immutable operator nodes forming the user-facing compute graph.

A node describes a tensor (source or derived) and how to produce any one of
its chunks.  Nodes are cheap value objects; no data is computed until chunks
are requested through the engine.  Identities are deterministic digests over
(name, params, input identities), so equal graphs built in different
processes agree on every operator and chunk id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import EmbeddingData, OperatorId, TensorMetaData, operator_id
from .store import Location


@dataclass(frozen=True)
class OperatorNode:
    """One operator in the compute graph.

    Exactly one of (`kernel`, `task_body`) is set.  `kernel` ops declare
    their input footprint via `dependencies` and get a generic engine task;
    `task_body` ops (renderers) drive the engine themselves.
    """

    name: str
    params: object
    inputs: tuple
    md: TensorMetaData
    embedding: EmbeddingData | None = None
    dependencies: object = None  # callable(h) -> list[list[h]] per input
    kernel: object = None  # callable(h, inputs: list[list[ndarray]], out: ndarray)
    task_body: object = None  # callable(ctx) -> generator
    location_override: Location | None = None
    supports_inplace: bool = False
    op_id: OperatorId = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "op_id", operator_id(self.name, self.params, [n.op_id for n in self.inputs])
        )

    def __hash__(self):
        return hash(self.op_id.value)

    def __eq__(self, other):
        return isinstance(other, OperatorNode) and self.op_id == other.op_id

    def __repr__(self):
        return f"<{self.name} {self.op_id.hex()[:10]} size={self.md.size}>"

    # conveniences so graphs read like array code; implemented in ops.py and
    # attached there to avoid an import cycle
    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def abs(self):
        from . import ops

        return ops.absolute(self)

    __abs__ = abs

    def cast(self, element_type):
        from . import ops

        return ops.cast(self, element_type)

    def __getitem__(self, key):
        from . import ops

        return ops.slice_node_getitem(self, key)

    def separable_conv(self, kernels):
        from . import ops

        return ops.separable_conv(self, kernels)

    def single_level_lod(self):
        from . import ops

        return ops.single_level_lod(self)


def describe(node: OperatorNode) -> dict:
    """Plain-data description of a graph; rebuilding it reproduces all ids."""
    return {
        "name": node.name,
        "params": node.params,
        "inputs": [describe(i) for i in node.inputs],
    }


def ids_of_description(desc: dict) -> OperatorId:
    inputs = [ids_of_description(d) for d in desc["inputs"]]
    return operator_id(desc["name"], desc["params"], inputs)
