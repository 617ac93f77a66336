"""
Learnable audio queries and visual naming.

The bank is one Parameter Q of shape C_Q × (N + P): N pre-trained columns
plus P prompt columns appended for classes added during fine-tuning. Class i
of the pre-training corpus owns column i; prompted classes own N, N+1, ...
"""
import numpy as np

from apps.separator.exceptions import DimensionError, InputError, UsageError
from apps.tensorcore import ops
from apps.tensorcore.nn import Module
from apps.tensorcore.tensor import Parameter, Tensor, get_default_dtype

QUERY_INIT_STD = 0.02
PROMPT_INIT_STD = 0.02


class QueryBank(Module):
    def __init__(self, channels: int, n_queries: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, QUERY_INIT_STD, (channels, n_queries)))
        self._n_base = n_queries
        self._prompt_classes: list[int] = []

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def n_base(self) -> int:
        return self._n_base

    @property
    def columns(self) -> int:
        return self.weight.shape[1]

    @property
    def prompt_classes(self) -> list[int]:
        return list(self._prompt_classes)

    def query_map(self) -> dict:
        """class_id → column for every class the bank can name."""
        mapping = {c: c for c in range(self._n_base)}
        mapping.update({c: self._n_base + i for i, c in enumerate(self._prompt_classes)})
        return mapping

    def column_for(self, class_id: int) -> int:
        try:
            return self.query_map()[class_id]
        except KeyError:
            raise InputError(f"class {class_id} has no query (bank names {sorted(self.query_map())})") from None

    def append_prompts(self, class_ids, rng: np.random.Generator) -> list[int]:
        """Append one N(0, PROMPT_INIT_STD²) column per class; returns their column indices."""
        class_ids = list(class_ids)
        taken = [c for c in class_ids if c in self.query_map()]
        if taken or len(set(class_ids)) != len(class_ids):
            raise InputError(f"classes already named or repeated: {taken or class_ids}")
        start = self.columns
        fresh = rng.normal(0.0, PROMPT_INIT_STD, (self.channels, len(class_ids))).astype(self.weight.dtype)
        self.weight.data = np.concatenate([self.weight.data, fresh], axis=1)
        self.weight.grad = None
        self._prompt_classes.extend(class_ids)
        return list(range(start, self.columns))

    def restore_prompts(self, class_ids):
        """Re-register prompt classes whose columns come back from a checkpoint."""
        if self._prompt_classes:
            raise UsageError("prompt classes are already registered")
        self._prompt_classes = list(class_ids)


def visually_name(bank: QueryBank, assignments, detach_unassigned: bool = False) -> Tensor:
    """
    Q_v = Q + A where column i of A is the object feature assigned to query i
    (zero for unassigned queries). Returns a C_Q × columns Tensor.

    With detach_unassigned the unassigned columns keep their values but enter
    the graph as constants, so nothing downstream reaches their parameters.

    Raises:
      InputError: repeated query index or index outside the bank.
      DimensionError: feature width differs from C_Q.
    """
    addend = np.zeros(bank.weight.shape, dtype=bank.weight.dtype)
    seen = set()
    for index, feature in assignments:
        if not 0 <= index < bank.columns:
            raise InputError(f"query index {index} outside a bank of {bank.columns} columns")
        if index in seen:
            raise InputError(f"query {index} assigned twice")
        feature = np.asarray(feature, dtype=get_default_dtype()).reshape(-1)
        if feature.size != bank.channels:
            raise DimensionError("object feature width", feature.shape, (bank.channels,))
        addend[:, index] = feature
        seen.add(index)
    if not detach_unassigned:
        return ops.add(bank.weight, addend)
    keep = np.zeros(bank.columns, dtype=bank.weight.dtype)
    keep[list(seen)] = 1
    return ops.add(ops.mul(bank.weight, keep), bank.weight.data * (1 - keep) + addend)


def assign_queries(bank: QueryBank, class_ids, policy: str, rng: np.random.Generator = None) -> list[int]:
    """
    Query column for each source. 'visual' names the query of the source's
    class; 'random' draws distinct columns uniformly.
    """
    if policy == 'random':
        if len(class_ids) > bank.columns:
            raise InputError(f"{len(class_ids)} sources exceed the {bank.columns} available queries")
        rng = rng if rng is not None else np.random.default_rng()
        return [int(i) for i in rng.choice(bank.columns, size=len(class_ids), replace=False)]
    return [bank.column_for(c) for c in class_ids]
