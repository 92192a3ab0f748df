"""LoRA modules, the SAML mixture-of-LoRA-experts layer, routing statistics and pruning.

A SAML layer computes, per token ``x``::

    g = softmax(W_g x)
    h = W0 x + (alpha / r) * (sum_i g_i B_i) (sum_i g_i A_i) x

i.e. the gated A and B factors are summed *before* they are multiplied.  The
double-sum expansion ``sum_i sum_j g_i g_j B_i A_j x`` is kept as a slow
reference for testing.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, PruneError, ShapeError
from .numerics import Parameter, SeededRng, Tensor
from .quantization import QuantizedTensor, dequantize_array

MODES = ("full", "collapsed_single_lora", "top1_with_router")
PRUNE_MODES = ("collapse_prune", "top1_with_router", "top1_no_router")


class LoraModule:
    """Low-rank delta ``(alpha / r) B A`` with ``A: [r, k]`` and ``B: [d, r]``."""

    def __init__(self, A, B, alpha: float | None = None, name: str = "lora"):
        self.A = A if isinstance(A, Parameter) else Parameter(A, name=f"{name}.A")
        self.B = B if isinstance(B, Parameter) else Parameter(B, name=f"{name}.B")
        r, k = self.A.shape
        d, rb = self.B.shape
        if rb != r:
            raise ShapeError(f"LoRA factors disagree on rank: A {self.A.shape}, B {self.B.shape}")
        if r > min(d, k):
            raise ShapeError(f"LoRA rank {r} exceeds min(d={d}, k={k})")
        self.alpha = float(r if alpha is None else alpha)

    @classmethod
    def init(cls, d: int, k: int, rank: int, alpha: float | None, rng: SeededRng, std: float = 0.02, name: str = "lora"):
        """Gaussian A, zero B: the delta starts at exactly zero."""
        A = rng.normal((rank, k), std=std)
        B = np.zeros((d, rank), dtype=np.float32)
        return cls(Parameter(A, name=f"{name}.A"), Parameter(B, name=f"{name}.B"), alpha)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B]

    def num_params(self) -> int:
        return self.A.data.size + self.B.data.size

    def dense_delta(self) -> np.ndarray:
        return self.scaling * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))

    def delta(self, X: Tensor) -> Tensor:
        """``(alpha/r) B A x`` for every row of ``X: [T, k]``."""
        u = nx.matmul(X, nx.transpose(self.A))
        return nx.scale(nx.matmul(u, nx.transpose(self.B)), self.scaling)

    def copy(self) -> LoraModule:
        return LoraModule(self.A.copy(), self.B.copy(), self.alpha)

    def same_shape(self, other: LoraModule) -> bool:
        return self.A.shape == other.A.shape and self.B.shape == other.B.shape and self.alpha == other.alpha


class Router:
    """Soft router: ``softmax(W_g x)`` with one logit row per expert."""

    def __init__(self, W_g):
        self.W_g = W_g if isinstance(W_g, Parameter) else Parameter(W_g, name="router.W_g")

    @classmethod
    def init(cls, n: int, k: int, rng: SeededRng, std: float = 0.02):
        return cls(Parameter(rng.normal((n, k), std=std), name="router.W_g"))

    @property
    def n(self) -> int:
        return self.W_g.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W_g]

    def copy(self) -> Router:
        return Router(self.W_g.copy())


def _rows(x) -> tuple[Tensor, bool]:
    x = nx.as_tensor(x)
    if x.ndim == 1:
        return nx.reshape(x, (1, x.shape[0])), True
    if x.ndim != 2:
        raise ShapeError(f"expected input [k] or [tokens, k], got {x.shape}")
    return x, False


def _base_tensor(base) -> Tensor:
    if isinstance(base, Tensor):
        return base
    if isinstance(base, QuantizedTensor):
        return Tensor(dequantize_array(base))
    return Tensor(base)


def lora_forward(m: LoraModule, W0_effective, x) -> Tensor:
    """``W0 x + (alpha/r) B (A x)`` for a single vector or a batch of rows."""
    W0 = _base_tensor(W0_effective)
    X, squeeze = _rows(x)
    if W0.shape != (m.d, m.k) or X.shape[1] != m.k:
        raise ShapeError(f"lora_forward: W0 {W0.shape}, LoRA d={m.d} k={m.k}, input {X.shape}")
    h = nx.add(nx.matmul(X, nx.transpose(W0)), m.delta(X))
    return nx.reshape(h, (m.d,)) if squeeze else h


def route(router: Router, x) -> Tensor:
    X, squeeze = _rows(x)
    if X.shape[1] != router.W_g.shape[1]:
        raise ShapeError(f"route: input {X.shape} does not match router {router.W_g.shape}")
    g = nx.softmax(nx.matmul(X, nx.transpose(router.W_g)), axis=-1)
    return nx.reshape(g, (router.n,)) if squeeze else g


class AdaptedLinear:
    """Frozen base projection (FP32 or quantised) plus optional frozen bias."""

    def __init__(self, base, bias=None, name: str = ""):
        self.name = name
        if isinstance(base, QuantizedTensor):
            self.base = base
        else:
            self.base = base if isinstance(base, Parameter) else Parameter(base, trainable=False)
            self.base.trainable = False
            self.base.name = f"{name}.base"
        if bias is not None and not isinstance(bias, Parameter):
            bias = Parameter(bias, trainable=False)
        if bias is not None:
            bias.trainable = False
            bias.name = f"{name}.bias"
        self.bias = bias
        self._dequantised: Tensor | None = None

    @property
    def quantized(self) -> bool:
        return isinstance(self.base, QuantizedTensor)

    @property
    def d(self) -> int:
        return self.base.shape[0]

    @property
    def k(self) -> int:
        return self.base.shape[1]

    def base_weight(self) -> Tensor:
        if self.quantized:
            if self._dequantised is None:
                self._dequantised = Tensor(dequantize_array(self.base))
            return self._dequantised
        return self.base

    def set_base(self, base) -> None:
        self.base = base
        self._dequantised = None

    def base_forward(self, X: Tensor) -> Tensor:
        h = nx.matmul(X, nx.transpose(self.base_weight()))
        return nx.add_bias(h, self.bias) if self.bias is not None else h

    def base_parameters(self) -> list:
        out = [self.base]
        if self.bias is not None:
            out.append(self.bias)
        return out

    def trainable_parameters(self) -> list[Parameter]:
        raise NotImplementedError


class LoraLinear(AdaptedLinear):
    """Frozen linear layer carrying exactly one LoRA (the feed-forward placement)."""

    def __init__(self, base, lora: LoraModule, bias=None, name: str = ""):
        super().__init__(base, bias, name)
        if (lora.d, lora.k) != tuple(self.base.shape):
            raise ShapeError(f"{name}: LoRA ({lora.d}x{lora.k}) does not fit base {tuple(self.base.shape)}")
        self.lora = lora
        lora.A.name, lora.B.name = f"{name}.lora.A", f"{name}.lora.B"

    def forward(self, X: Tensor, adapters: bool = True) -> Tensor:
        h = self.base_forward(X)
        return nx.add(h, self.lora.delta(X)) if adapters else h

    def trainable_parameters(self) -> list[Parameter]:
        return self.lora.parameters()


class SamlLayer(AdaptedLinear):
    """Attention projection whose delta is a soft mixture of LoRA experts."""

    def __init__(self, base, experts: list[LoraModule], router: Router | None, mode: str = "full",
                 bias=None, name: str = "", dominant: int | None = None):
        super().__init__(base, bias, name)
        if mode not in MODES:
            raise ConfigError(f"unknown SAML mode {mode!r}")
        if not experts:
            raise ShapeError(f"{name}: a SAML layer needs at least one expert")
        first = experts[0]
        for e in experts[1:]:
            if not first.same_shape(e):
                raise ShapeError(f"{name}: experts must share shapes and alpha")
        if (first.d, first.k) != tuple(self.base.shape):
            raise ShapeError(f"{name}: experts ({first.d}x{first.k}) do not fit base {tuple(self.base.shape)}")
        if mode == "collapsed_single_lora" and (len(experts) != 1 or router is not None):
            raise ShapeError(f"{name}: collapsed layer keeps exactly one expert and no router")
        if mode == "top1_with_router" and (len(experts) != 1 or router is None or dominant is None):
            raise ShapeError(f"{name}: top1_with_router keeps one expert, the router and its index")
        if mode == "full" and router is None and len(experts) != 1:
            raise ShapeError(f"{name}: {len(experts)} experts need a router")
        if router is not None and router.W_g.shape[1] != first.k:
            raise ShapeError(f"{name}: router {router.W_g.shape} does not match input size {first.k}")
        if mode == "full" and router is not None and router.n != len(experts):
            raise ShapeError(f"{name}: router has {router.n} rows for {len(experts)} experts")
        self.experts = experts
        self.router = router
        self.mode = mode
        self.dominant = dominant
        self.gate_log: list[np.ndarray] | None = None
        self._rename()

    def _rename(self) -> None:
        for i, e in enumerate(self.experts):
            e.A.name, e.B.name = f"{self.name}.experts.{i}.A", f"{self.name}.experts.{i}.B"
        if self.router is not None:
            self.router.W_g.name = f"{self.name}.router.W_g"

    @classmethod
    def init(cls, base, n_experts: int, rank: int, alpha: float | None, rng: SeededRng,
             bias=None, name: str = "", donors: list[LoraModule] | None = None, std: float = 0.02) -> SamlLayer:
        """Donor copies when ``donors`` is given, else Gaussian-A / zero-B experts.

        A single expert gets no router: its gate is identically 1.
        """
        d, k = base.shape
        if donors is not None:
            experts = init_experts_from_loras(donors)
        else:
            experts = [LoraModule.init(d, k, rank, alpha, rng.spawn("expert", i), std=std) for i in range(n_experts)]
        router = Router.init(len(experts), k, rng.spawn("router"), std=std) if len(experts) > 1 else None
        return cls(base, experts, router, "full", bias=bias, name=name)

    @property
    def n(self) -> int:
        return len(self.experts)

    @property
    def rank(self) -> int:
        return self.experts[0].rank

    @property
    def alpha(self) -> float:
        return self.experts[0].alpha

    @property
    def scaling(self) -> float:
        return self.experts[0].scaling

    def router_parameters(self) -> list[Parameter]:
        return self.router.parameters() if self.router is not None else []

    def expert_parameters(self) -> list[Parameter]:
        return [p for e in self.experts for p in e.parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return self.router_parameters() + self.expert_parameters()

    def num_adapter_params(self) -> int:
        return int(sum(p.data.size for p in self.trainable_parameters()))

    def gates(self, X: Tensor) -> Tensor:
        if self.router is None:
            return Tensor(np.ones((X.shape[0], 1), dtype=np.float32))
        return route(self.router, X)

    def delta(self, X: Tensor) -> Tensor:
        if self.mode == "collapsed_single_lora" or (self.mode == "full" and self.router is None):
            if self.gate_log is not None:
                self.gate_log.append(np.ones((X.shape[0], 1), dtype=np.float32))
            return self.experts[0].delta(X)
        G = route(self.router, X)
        if self.gate_log is not None:
            self.gate_log.append(G.data.copy())
        if self.mode == "top1_with_router":
            onehot = np.zeros(self.router.n, dtype=np.float32)
            onehot[self.dominant] = 1.0
            g_d = nx.einsum("tn,n->t", G, Tensor(onehot))
            return nx.einsum("t,t,td->td", g_d, g_d, self.experts[0].delta(X))
        A_all = nx.stack([e.A for e in self.experts])  # [n, r, k]
        B_all = nx.stack([e.B for e in self.experts])  # [n, d, r]
        A_mix = nx.einsum("tn,nrk->trk", G, A_all)
        B_mix = nx.einsum("tn,ndr->tdr", G, B_all)
        u = nx.einsum("trk,tk->tr", A_mix, X)
        return nx.scale(nx.einsum("tdr,tr->td", B_mix, u), self.scaling)

    def forward(self, X: Tensor, adapters: bool = True) -> Tensor:
        h = self.base_forward(X)
        return nx.add(h, self.delta(X)) if adapters else h

    def copy(self) -> SamlLayer:
        """Independent adapters; the frozen base is shared."""
        new = SamlLayer(self.base, [e.copy() for e in self.experts],
                        self.router.copy() if self.router is not None else None,
                        self.mode, bias=self.bias, name=self.name, dominant=self.dominant)
        new._dequantised = self._dequantised
        return new


def saml_forward(layer: SamlLayer, x) -> Tensor:
    """Output of a full-mode SAML layer for ``x: [k]`` or ``[tokens, k]``."""
    if layer.mode != "full":
        raise PruneError(f"saml_forward expects a full layer, {layer.name!r} is {layer.mode}")
    X, squeeze = _rows(x)
    if X.shape[1] != layer.k:
        raise ShapeError(f"saml_forward: input {X.shape} does not match layer input size {layer.k}")
    h = layer.forward(X)
    return nx.reshape(h, (layer.d,)) if squeeze else h


def saml_forward_reference(layer: SamlLayer, x) -> np.ndarray:
    """Multiply-then-add expansion ``sum_i sum_j g_i g_j B_i (A_j x)`` in float64.

    Same function as :func:`saml_forward`, evaluated the slow way with explicit
    loops over expert pairs.
    """
    if layer.mode != "full":
        raise PruneError(f"saml_forward_reference expects a full layer, got {layer.mode}")
    X = np.atleast_2d(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
    if X.shape[1] != layer.k:
        raise ShapeError(f"saml_forward_reference: input {X.shape} vs layer input size {layer.k}")
    W0 = layer.base_weight().data.astype(np.float64)
    out = X @ W0.T
    if layer.bias is not None:
        out = out + layer.bias.data.astype(np.float64)
    if layer.router is None:
        gates = np.ones((X.shape[0], 1))
    else:
        logits = X @ layer.router.W_g.data.astype(np.float64).T
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        gates = e / e.sum(axis=1, keepdims=True)
    A = [e.A.data.astype(np.float64) for e in layer.experts]
    B = [e.B.data.astype(np.float64) for e in layer.experts]
    for t in range(X.shape[0]):
        acc = np.zeros(layer.d)
        for i in range(layer.n):
            for j in range(layer.n):
                acc += gates[t, i] * gates[t, j] * (B[i] @ (A[j] @ X[t]))
        out[t] += layer.scaling * acc
    return out[0] if np.ndim(x.data if isinstance(x, Tensor) else x) == 1 else out


# ---------------------------------------------------------------------------
# routing statistics, collapse detection, pruning


@dataclass
class RoutingStats:
    mean_gates: np.ndarray
    mean_entropy: float
    top1_fraction: float
    dominant_expert: int
    n_inputs: int

    @classmethod
    def from_gates(cls, gates: np.ndarray) -> RoutingStats:
        G = np.asarray(gates, dtype=np.float64)
        if G.ndim != 2 or G.shape[0] == 0:
            raise ValueError("routing statistics need at least one gate vector")
        mean_gates = G.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.where(G > 0, G * np.log(G), 0.0).sum(axis=1)
        dominant = int(np.argmax(mean_gates))
        top1 = float(np.mean(np.argmax(G, axis=1) == dominant))
        return cls(mean_gates, float(ent.mean()), top1, dominant, int(G.shape[0]))

    @property
    def dominant_gate(self) -> float:
        return float(self.mean_gates[self.dominant_expert])

    def summary(self) -> dict:
        return {
            "mean_gates": [float(v) for v in self.mean_gates],
            "mean_entropy": self.mean_entropy,
            "top1_fraction": self.top1_fraction,
            "dominant_expert": self.dominant_expert,
            "n_inputs": self.n_inputs,
        }

    @classmethod
    def from_summary(cls, d: dict) -> RoutingStats:
        return cls(np.asarray(d["mean_gates"]), float(d["mean_entropy"]), float(d["top1_fraction"]),
                   int(d["dominant_expert"]), int(d["n_inputs"]))


def collect_routing_stats(layer: SamlLayer, calibration_inputs) -> RoutingStats:
    if layer.mode != "full":
        raise PruneError(f"routing statistics need a full layer, {layer.name!r} is {layer.mode}")
    X = np.asarray(calibration_inputs.data if isinstance(calibration_inputs, Tensor) else calibration_inputs,
                   dtype=np.float32)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("calibration set is empty")
    with nx.no_grad():
        G = layer.gates(Tensor(X)).data
    return RoutingStats.from_gates(G)


COLLAPSED, IMBALANCED, HEALTHY = "collapsed", "imbalanced", "healthy"


def detect_collapse(stats: RoutingStats, collapse_threshold: float = 0.99, imbalance_threshold: float = 0.90) -> str:
    for name, t in (("collapse_threshold", collapse_threshold), ("imbalance_threshold", imbalance_threshold)):
        if not 0 < t <= 1:
            raise ConfigError(f"{name} must lie in (0, 1], got {t}")
    g = stats.dominant_gate
    if g >= collapse_threshold:
        return COLLAPSED
    if g >= imbalance_threshold:
        return IMBALANCED
    return HEALTHY


@dataclass
class PruneReport:
    layers_collapsed: list[str] = field(default_factory=list)
    layers_imbalanced: list[str] = field(default_factory=list)
    params_removed: int = 0
    modes: dict[str, str] = field(default_factory=dict)

    def merge(self, other: PruneReport) -> None:
        self.layers_collapsed += other.layers_collapsed
        self.layers_imbalanced += other.layers_imbalanced
        self.params_removed += other.params_removed
        self.modes.update(other.modes)

    def as_dict(self) -> dict:
        return {
            "layers_collapsed": list(self.layers_collapsed),
            "layers_imbalanced": list(self.layers_imbalanced),
            "params_removed": int(self.params_removed),
            "modes": dict(self.modes),
        }


def collapse_prune_removed(n: int, d: int, k: int, r: int) -> int:
    """Parameters deleted when an n-expert layer collapses to one LoRA."""
    return (n - 1) * (r * k + d * r) + n * k


def prune_layer(layer: SamlLayer, mode: str, stats: RoutingStats) -> tuple[SamlLayer, PruneReport]:
    """Shrink a full SAML layer around its dominant expert.

    ``collapse_prune`` and ``top1_no_router`` keep only that expert with the
    gate fixed at 1.  ``top1_with_router`` also keeps the full router and
    scales the kept expert by the square of its n-way softmax gate.
    """
    if mode not in PRUNE_MODES:
        raise ConfigError(f"unknown prune mode {mode!r}; expected one of {PRUNE_MODES}")
    if layer.mode != "full":
        raise PruneError(f"layer {layer.name!r} is already pruned ({layer.mode})")
    if stats.mean_gates.shape != (layer.n,):
        raise PruneError(f"stats cover {stats.mean_gates.size} experts, layer {layer.name!r} has {layer.n}")
    d = stats.dominant_expert
    kept = layer.experts[d].copy()
    if mode == "top1_with_router" and layer.router is not None:
        new = SamlLayer(layer.base, [kept], layer.router.copy(), "top1_with_router",
                        bias=layer.bias, name=layer.name, dominant=d)
    else:
        new = SamlLayer(layer.base, [kept], None, "collapsed_single_lora",
                        bias=layer.bias, name=layer.name, dominant=d)
    new._dequantised = layer._dequantised
    removed = layer.num_adapter_params() - new.num_adapter_params()
    return new, PruneReport(params_removed=removed, modes={layer.name: mode})


def init_experts_from_loras(donors: list[LoraModule]) -> list[LoraModule]:
    """Deep copies of per-speaker donor LoRAs, one expert each."""
    if not donors:
        raise ShapeError("at least one donor LoRA is required")
    for dn in donors[1:]:
        if not donors[0].same_shape(dn):
            raise ShapeError(f"donor shapes disagree: {donors[0].A.shape}/{donors[0].B.shape} "
                             f"vs {dn.A.shape}/{dn.B.shape}")
    return [copy.deepcopy(dn) for dn in donors]
