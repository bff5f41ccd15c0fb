"""Layer cost model for pipeline simulation."""
from dataclasses import dataclass, replace
import enum
import math

from ..exceptions import InvalidInputError


class LayerKind(str, enum.Enum):
    EMBEDDING = "Embedding"
    DENSE = "Dense"
    MOE = "MoE"
    MTP_TRANSFORMER = "MTPTransformer"
    MTP_LOSS = "MTPLoss"
    LM_LOSS = "LMLoss"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for kind in cls:
            if value in (kind.value, kind.name):
                return kind
        raise InvalidInputError(f"unknown layer kind {value!r}")


# forward cost in units of one MoE forward; Dense:MoE = 1:2
DEFAULT_FWD = {
    LayerKind.EMBEDDING: 0.5,
    LayerKind.DENSE: 0.5,
    LayerKind.MOE: 1.0,
    LayerKind.MTP_TRANSFORMER: 1.19,
    LayerKind.MTP_LOSS: 0.51,
    LayerKind.LM_LOSS: 0.5,
}
MTP_FWD = 1.7
MTP_TRANSFORMER_FRACTION = 0.7
BWD_RATIO = 2.0


@dataclass(frozen=True)
class LayerSpec:
    """One schedulable layer. ``bwd_cost`` defaults to twice the forward
    cost and ``act_memory`` to the forward cost."""

    kind: LayerKind
    fwd_cost: float = None
    bwd_cost: float = None
    act_memory: float = None

    def __post_init__(self):
        kind = LayerKind.parse(self.kind)
        fwd = DEFAULT_FWD[kind] if self.fwd_cost is None else float(self.fwd_cost)
        bwd = BWD_RATIO * fwd if self.bwd_cost is None else float(self.bwd_cost)
        mem = fwd if self.act_memory is None else float(self.act_memory)
        for name, val in (("fwd_cost", fwd), ("bwd_cost", bwd), ("act_memory", mem)):
            if not (math.isfinite(val) and val >= 0):
                raise InvalidInputError(f"{name} must be a finite non-negative number, got {val}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "fwd_cost", fwd)
        object.__setattr__(self, "bwd_cost", bwd)
        object.__setattr__(self, "act_memory", mem)

    def with_costs(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class MTPBlock:
    """An unsplit multi-token-prediction block: ``k`` transformer sublayers
    plus a loss computation, costed as a whole."""

    k: int = 1
    fwd_cost: float = MTP_FWD
    bwd_cost: float = None
    act_memory: float = None

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise InvalidInputError(f"MTP block needs k >= 1 transformer sublayers, got {self.k}")


def split_mtp(layers, transformer_fraction=MTP_TRANSFORMER_FRACTION):
    """Replace the (single) :class:`MTPBlock` with ``k`` MTPTransformer layers
    and one MTPLoss layer.

    ``transformer_fraction`` of every cost goes to the transformer sublayers
    (shared equally); the rest to the loss layer.
    """
    if not 0 <= transformer_fraction <= 1:
        raise InvalidInputError("transformer_fraction must lie in [0, 1]")
    blocks = [i for i, layer in enumerate(layers) if isinstance(layer, MTPBlock)]
    if len(blocks) > 1:
        raise InvalidInputError(f"expected at most one MTP block, found {len(blocks)}")
    out = []
    for layer in layers:
        if not isinstance(layer, MTPBlock):
            out.append(layer if isinstance(layer, LayerSpec) else LayerSpec(layer))
            continue
        fwd = layer.fwd_cost
        bwd = BWD_RATIO * fwd if layer.bwd_cost is None else layer.bwd_cost
        mem = fwd if layer.act_memory is None else layer.act_memory
        tf, lf = transformer_fraction, 1.0 - transformer_fraction
        for _ in range(layer.k):
            out.append(LayerSpec(LayerKind.MTP_TRANSFORMER, fwd * tf / layer.k, bwd * tf / layer.k, mem * tf / layer.k))
        out.append(LayerSpec(LayerKind.MTP_LOSS, fwd * lf, bwd * lf, mem * lf))
    return out


RECOMPUTE_MODES = ("none", "full", "mtp_partial", "fast_expert")


def recompute_cost(layer, mode):
    """Extra backward work a recompute mode adds to one layer.

    ``full`` replays the whole forward; ``fast_expert`` halves that for MoE
    layers; ``mtp_partial`` replays only MTP transformer sublayers and never
    the MTP loss.
    """
    if mode == "none":
        return 0.0
    if mode == "full":
        return layer.fwd_cost
    if mode == "fast_expert":
        return 0.5 * layer.fwd_cost if layer.kind is LayerKind.MOE else layer.fwd_cost
    if mode == "mtp_partial":
        return layer.fwd_cost if layer.kind is LayerKind.MTP_TRANSFORMER else 0.0
    raise InvalidInputError(f"unknown recompute mode {mode!r}")
