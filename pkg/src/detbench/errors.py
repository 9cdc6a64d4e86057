"""Exception types shared across the toolkit."""


class InputError(ValueError):
    """Caller supplied an invalid value, shape or file."""


class GraphError(InputError):
    """A cost graph could not be resolved."""

    def __init__(self, node, message):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


class UndefinedMetricError(InputError):
    """Evaluation has nothing to average over (no class carries ground truth)."""


class AdapterError(RuntimeError):
    """A detector adapter raised while being benchmarked or evaluated."""

    def __init__(self, phase, iteration, cause):
        super().__init__(f"adapter failed in {phase} iteration {iteration}: {type(cause).__name__}: {cause}")
        self.phase = phase
        self.iteration = iteration
