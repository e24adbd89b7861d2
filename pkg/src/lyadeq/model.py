"""Full classifiers: feature extractor -> DEQ -> [Lyapunov module] -> head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .deq import DEQParams, DEQStats, deq_forward
from .fixedpoint import SolverConfig
from .layers import (
    ICNNParams,
    LinearParams,
    OrthogonalFCParams,
    feature_extractor_forward,
    linear_forward,
    orthogonal_fc_forward,
    orthogonal_weight,
)
from .lyapunov import StabilityConfig, stabilized_state
from .tensor import Tensor

# variant -> (lyapunov module, orthogonal head)
VARIANTS = {
    "deq": (False, False),
    "deq-orth": (False, True),
    "lyadeq-noorth": (True, False),
    "lyadeq": (True, True),
}

VARIANT_LABELS = {
    "deq": "DEQ (baseline)",
    "deq-orth": "DEQ w/ orthog. FC",
    "lyadeq-noorth": "LyaDEQ w/o orthog. FC",
    "lyadeq": "LyaDEQ w/ orthog. FC",
}


@dataclass
class ModelParams:
    variant: str
    feature: LinearParams
    deq: DEQParams
    icnn: ICNNParams | None
    head: LinearParams | OrthogonalFCParams

    @property
    def uses_lyapunov(self) -> bool:
        return self.icnn is not None

    @property
    def orthogonal(self) -> bool:
        return isinstance(self.head, OrthogonalFCParams)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("feature.weight", self.feature.weight), ("feature.bias", self.feature.bias)]
        names = ["deq.W1", "deq.b1", "deq.W2", "deq.b2", "deq.norm_inner.scale",
                 "deq.norm_inner.shift", "deq.norm_out.scale", "deq.norm_out.shift"]
        out += list(zip(names, self.deq.parameters()))
        if self.icnn is not None:
            out += list(zip(["icnn.W0", "icnn.b0", "icnn.W1", "icnn.b1", "icnn.U1_raw"],
                            self.icnn.parameters()))
        if self.orthogonal:
            out.append(("head.vectors", self.head.vectors))
        else:
            out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        """Non-trainable state (frozen batch-norm statistics)."""
        out = []
        for nm, norm in (("deq.norm_inner", self.deq.norm_inner), ("deq.norm_out", self.deq.norm_out)):
            if norm.kind == "batch":
                out += [(f"{nm}.running_mean", norm.running_mean), (f"{nm}.running_var", norm.running_var)]
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_model(variant: str, seed: int = 0, n_in: int = 784, state: int = 64, classes: int = 10,
               norm: str = "layer", icnn_hidden: int = 64, d: float = 0.1) -> ModelParams:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    lyap, orth = VARIANTS[variant]
    rng = np.random.default_rng(seed)
    feature = LinearParams.init(n_in, state, rng, "feature")
    deq = DEQParams.init(state, rng, norm)
    # separate stream so variants share feature/DEQ initialization for a seed
    rng2 = np.random.default_rng([seed, 1])
    icnn = ICNNParams.init(state, rng2, icnn_hidden, d) if lyap else None
    rng3 = np.random.default_rng([seed, 2])
    head = OrthogonalFCParams.init(state, classes, rng3) if orth else LinearParams.init(state, classes, rng3, "head")
    return ModelParams(variant, feature, deq, icnn, head)


@dataclass
class ForwardResult:
    logits: Tensor
    zstar: Tensor
    report: object
    state: Tensor


def forward(model: ModelParams, x, solver: SolverConfig = SolverConfig(),
            stability: StabilityConfig = StabilityConfig(), stats: DEQStats | None = None,
            solver_name: str = "anderson", head_weight: Tensor | None = None) -> ForwardResult:
    x = T.as_tensor(x)
    feats = feature_extractor_forward(model.feature, x)
    zstar, report = deq_forward(model.deq, feats, solver, solver_name, stats)
    h = zstar
    if model.icnn is not None:
        h = stabilized_state(model.deq, model.icnn, zstar, feats, stability)
    if model.orthogonal:
        logits = orthogonal_fc_forward(model.head, h, head_weight)
    else:
        logits = linear_forward(model.head, h)
    return ForwardResult(logits, zstar, report, h)


def predict(model: ModelParams, x: np.ndarray, solver: SolverConfig = SolverConfig(),
            stability: StabilityConfig = StabilityConfig(), batch: int = 500) -> np.ndarray:
    out = []
    with T.no_grad():
        W = orthogonal_weight(model.head) if model.orthogonal else None
        for i in range(0, len(x), batch):
            res = forward(model, x[i : i + batch], solver, stability, head_weight=W)
            out.append(np.argmax(res.logits.data, axis=1))
    T.get_graph().clear()
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def loss_and_input_grad(model: ModelParams, x: np.ndarray, y: np.ndarray,
                        solver: SolverConfig = SolverConfig(),
                        stability: StabilityConfig = StabilityConfig(),
                        head_weight: Tensor | None = None) -> tuple[float, np.ndarray]:
    """Cross-entropy and its gradient w.r.t. the raw input pixels (white-box access)."""
    xt = Tensor(x, requires_grad=True)
    if head_weight is None and model.orthogonal:
        with T.no_grad():
            head_weight = orthogonal_weight(model.head)
    res = forward(model, xt, solver, stability, head_weight=head_weight)
    loss = T.softmax_cross_entropy(res.logits, y)
    (gx,) = T.grad(loss, xt)
    T.get_graph().clear()
    return float(loss.data), gx.data
