"""Tiny transformer encoder-classifier hosting SAML attention and LoRA feed-forward layers.

Every attention projection (query/key/value/output by default) is a
:class:`~saml.adapters.SamlLayer`; each of the two feed-forward linears carries
one :class:`~saml.adapters.LoraModule`.  Base weights are frozen once the base
model has been trained and may be stored NF4-quantised.
"""

from __future__ import annotations

import copy
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .adapters import AdaptedLinear, LoraLinear, LoraModule, Router, SamlLayer
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    IntegrityError,
    StageOrderError,
    TruncatedCheckpointError,
    UnknownDtypeError,
    VersionMismatchError,
)
from .numerics import Parameter, SeededRng, Tensor
from .quantization import DEFAULT_BLOCK_SIZE, QuantizedTensor, dequantize_array, measure, quantize_blockwise

PROJECTIONS = ("q", "k", "v", "o")


@dataclass
class ModelConfig:
    vocab_size: int = 32
    max_len: int = 16
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    ff_hidden: int = 128
    n_experts: int = 4
    lora_rank: int = 2
    lora_alpha: float | None = None  # None -> alpha = rank
    saml_targets: tuple[str, ...] = PROJECTIONS
    block_size: int = DEFAULT_BLOCK_SIZE
    seed: int = 0
    adapter_init_std: float = 0.02

    def __post_init__(self):
        self.saml_targets = tuple(self.saml_targets)
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("vocab_size", "max_len", "d_model", "n_heads", "n_blocks", "ff_hidden",
                     "n_experts", "lora_rank", "block_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                problems.append(f"{name} must be a positive integer (got {v!r})")
        if not problems and self.d_model % self.n_heads:
            problems.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not problems and self.lora_rank > min(self.d_model, self.ff_hidden):
            problems.append(f"lora_rank ({self.lora_rank}) exceeds the smallest adapted dimension")
        if self.lora_alpha is not None and not self.lora_alpha > 0:
            problems.append(f"lora_alpha must be positive (got {self.lora_alpha!r})")
        bad = [t for t in self.saml_targets if t not in PROJECTIONS]
        if bad:
            problems.append(f"saml_targets contains unknown projections {bad}")
        if not 0 <= int(self.seed) < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def alpha(self) -> float:
        return float(self.lora_rank if self.lora_alpha is None else self.lora_alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["saml_targets"] = list(self.saml_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


class FrozenLinear(AdaptedLinear):
    """Base weight without adapters (embedding tables, classifier head, untargeted projections)."""

    def forward(self, X: Tensor, adapters: bool = True) -> Tensor:
        return self.base_forward(X)

    def trainable_parameters(self) -> list[Parameter]:
        return []


class Block:
    def __init__(self, cfg: ModelConfig, rng: SeededRng, index: int):
        d, f = cfg.d_model, cfg.ff_hidden
        p = f"blocks.{index}"
        self.n_heads = cfg.n_heads
        self.ln1 = (Parameter(np.ones(d), False, f"{p}.ln1.gamma"), Parameter(np.zeros(d), False, f"{p}.ln1.beta"))
        self.ln2 = (Parameter(np.ones(d), False, f"{p}.ln2.gamma"), Parameter(np.zeros(d), False, f"{p}.ln2.beta"))
        self.attn: dict[str, AdaptedLinear] = {}
        for proj in PROJECTIONS:
            name = f"{p}.attn.{proj}"
            w = rng.spawn(name, "base").normal((d, d), std=1 / math.sqrt(d))
            if proj in cfg.saml_targets:
                self.attn[proj] = SamlLayer.init(w, cfg.n_experts, cfg.lora_rank, cfg.alpha,
                                                 rng.spawn(name, "adapter"), name=name, std=cfg.adapter_init_std)
            else:
                self.attn[proj] = FrozenLinear(w, name=name)
        self.ff1 = _lora_linear(f"{p}.ff1", f, d, cfg, rng)
        self.ff2 = _lora_linear(f"{p}.ff2", d, f, cfg, rng)

    def forward(self, x: Tensor, batch: int, length: int, adapters: bool) -> Tensor:
        d = x.shape[1]
        h, dh = self.n_heads, d // self.n_heads
        a = nx.layer_norm(x, *self.ln1)
        q, k, v = (nx.reshape(self.attn[n].forward(a, adapters), (batch, length, h, dh)) for n in "qkv")
        scores = nx.scale(nx.einsum("blhe,bmhe->bhlm", q, k), 1.0 / math.sqrt(dh))
        ctx = nx.einsum("bhlm,bmhe->blhe", nx.softmax(scores, axis=-1), v)
        x = nx.add(x, self.attn["o"].forward(nx.reshape(ctx, (batch * length, d)), adapters))
        f = nx.layer_norm(x, *self.ln2)
        f = self.ff2.forward(nx.gelu(self.ff1.forward(f, adapters)), adapters)
        return nx.add(x, f)


def _lora_linear(name: str, d_out: int, d_in: int, cfg: ModelConfig, rng: SeededRng) -> LoraLinear:
    w = rng.spawn(name, "base").normal((d_out, d_in), std=1 / math.sqrt(d_in))
    lora = LoraModule.init(d_out, d_in, cfg.lora_rank, cfg.alpha, rng.spawn(name, "adapter"), std=cfg.adapter_init_std)
    return LoraLinear(w, lora, bias=np.zeros(d_out, dtype=np.float32), name=name)


class TinyTransformer:
    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        self.cfg = cfg
        d, V = cfg.d_model, cfg.vocab_size
        self.tok_emb = FrozenLinear(rng.spawn("tok_emb").normal((V, d), std=1.0), name="tok_emb")
        self.pos_emb = FrozenLinear(rng.spawn("pos_emb").normal((cfg.max_len, d), std=0.5), name="pos_emb")
        self.blocks = [Block(cfg, rng.spawn("block", i), i) for i in range(cfg.n_blocks)]
        self.ln_f = (Parameter(np.ones(d), False, "ln_f.gamma"), Parameter(np.zeros(d), False, "ln_f.beta"))
        self.head = FrozenLinear(rng.spawn("head").normal((V, d), std=1 / math.sqrt(d)),
                                 bias=np.zeros(V, dtype=np.float32), name="head")
        self.meta: dict = {"stage": "base", "speaker_id": None, "seed": int(cfg.seed)}

    # -- structure ---------------------------------------------------------

    def base_linears(self) -> list[AdaptedLinear]:
        out: list[AdaptedLinear] = [self.tok_emb, self.pos_emb]
        for b in self.blocks:
            out += [b.attn[p] for p in PROJECTIONS] + [b.ff1, b.ff2]
        return out + [self.head]

    def saml_layers(self) -> list[SamlLayer]:
        return [b.attn[p] for b in self.blocks for p in PROJECTIONS if isinstance(b.attn[p], SamlLayer)]

    def lora_linears(self) -> list[LoraLinear]:
        return [lin for b in self.blocks for lin in (b.ff1, b.ff2)]

    def norm_parameters(self) -> list[Parameter]:
        out = []
        for b in self.blocks:
            out += [*b.ln1, *b.ln2]
        return out + list(self.ln_f)

    def router_parameters(self) -> list[Parameter]:
        return [p for s in self.saml_layers() for p in s.router_parameters()]

    def expert_parameters(self) -> list[Parameter]:
        """SAML experts plus feed-forward LoRAs: everything adapted except routers."""
        out = [p for s in self.saml_layers() for p in s.expert_parameters()]
        return out + [p for lin in self.lora_linears() for p in lin.trainable_parameters()]

    def adapter_parameters(self) -> list[Parameter]:
        return self.router_parameters() + self.expert_parameters()

    def base_parameters(self) -> list[Parameter]:
        """FP32 base tensors (quantised weights are not Parameters)."""
        out = [t for lin in self.base_linears() for t in lin.base_parameters() if isinstance(t, Parameter)]
        return out + self.norm_parameters()

    @property
    def quantized(self) -> bool:
        return any(lin.quantized for lin in self.base_linears())

    def set_base_trainable(self, flag: bool) -> None:
        if flag and self.quantized:
            raise StageOrderError("a quantised base cannot be trained")
        for p in self.base_parameters():
            p.trainable = flag

    def set_adapters_trainable(self, flag: bool) -> None:
        for p in self.adapter_parameters():
            p.trainable = flag

    def named_tensors(self) -> dict[str, Parameter | QuantizedTensor]:
        """Every stored tensor under a stable dotted name."""
        out: dict = {}
        for lin in self.base_linears():
            out[f"{lin.name}.base"] = lin.base
            if lin.bias is not None:
                out[f"{lin.name}.bias"] = lin.bias
        for p in self.norm_parameters():
            out[p.name] = p
        for p in self.adapter_parameters():
            out[p.name] = p
        return dict(sorted(out.items()))

    def copy(self) -> TinyTransformer:
        return copy.deepcopy(self)

    # -- computation -------------------------------------------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        t = np.asarray(tokens)
        if t.ndim != 2:
            raise ValueError(f"tokens must be [batch, length], got shape {t.shape}")
        if not np.issubdtype(t.dtype, np.integer):
            raise TypeError("tokens must be integer ids")
        if t.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence length {t.shape[1]} exceeds max_len {self.cfg.max_len}")
        if t.size and (t.min() < 0 or t.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id outside [0, {self.cfg.vocab_size})")
        return t

    def encode(self, tokens, adapters: bool = True) -> Tensor:
        """Final-norm representation of every position, ``[batch * length, d_model]``."""
        t = self._check_tokens(tokens)
        B, L = t.shape
        x = nx.add(nx.embedding(self.tok_emb.base_weight(), t),
                   nx.embedding(self.pos_emb.base_weight(), np.broadcast_to(np.arange(L), (B, L))))
        x = nx.reshape(x, (B * L, self.cfg.d_model))
        for block in self.blocks:
            x = block.forward(x, B, L, adapters)
        return nx.layer_norm(x, *self.ln_f)

    def forward(self, tokens, adapters: bool = True) -> Tensor:
        """Per-position label logits, rows ordered batch-major: ``[batch * length, vocab]``."""
        return self.head.forward(self.encode(tokens, adapters))

    __call__ = forward


def build_model(cfg: ModelConfig, rng: SeededRng | None = None) -> TinyTransformer:
    cfg.validate()
    return TinyTransformer(cfg, rng if rng is not None else SeededRng(cfg.seed))


def forward(m: TinyTransformer, tokens, adapters: bool = True) -> Tensor:
    return m.forward(tokens, adapters)


# ---------------------------------------------------------------------------
# quantisation and accounting


def quantize_base(m: TinyTransformer, block_size: int | None = None, codebook: str = "nf4") -> TinyTransformer:
    """Copy of ``m`` with every base weight matrix stored block-wise 4-bit.

    Embeddings, attention and feed-forward bases and the classifier head are
    quantised; biases and layer-norm parameters stay FP32.
    """
    if m.quantized:
        raise StageOrderError("model base is already quantised")
    bs = int(block_size or m.cfg.block_size)
    out = m.copy()
    out.set_base_trainable(False)
    per_tensor = {}
    fp32_bytes = q_bytes = 0
    for lin in out.base_linears():
        w = lin.base.data
        q = quantize_blockwise(w, bs, codebook)
        rep = measure(q, w)
        per_tensor[f"{lin.name}.base"] = {**rep.as_dict(), "std": float(w.std())}
        fp32_bytes += 4 * w.size
        q_bytes += q.payload_nbytes()
        lin.set_base(q)
    out.cfg = _with_block_size(m.cfg, bs)
    out.meta = dict(m.meta)
    out.meta["compression"] = {
        "block_size": bs,
        "codebook": codebook,
        "bits_per_weight": 4.0 + 32.0 / bs,
        "fp32_weight_bytes": fp32_bytes,
        "quantized_weight_bytes": q_bytes,
        "payload_ratio": fp32_bytes / q_bytes,
        "tensors": per_tensor,
    }
    return out


def _with_block_size(cfg: ModelConfig, bs: int) -> ModelConfig:
    d = cfg.to_dict()
    d["block_size"] = bs
    return ModelConfig.from_dict(d)


def count_params(m: TinyTransformer) -> dict:
    """Exact parameter counts; trainable counts honour the current flags."""
    def size(t) -> int:
        return int(np.prod(t.shape, dtype=np.int64))

    by = {
        "embeddings": size(m.tok_emb.base) + size(m.pos_emb.base),
        "attention_base": sum(size(b.attn[p].base) for b in m.blocks for p in PROJECTIONS),
        "ff_base": sum(size(lin.base) for lin in m.lora_linears()),
        "head": size(m.head.base),
        "biases_norms": sum(size(t) for t in m.norm_parameters())
        + sum(size(lin.bias) for lin in m.base_linears() if lin.bias is not None),
        "routers": sum(size(p) for p in m.router_parameters()),
        "experts": sum(size(p) for s in m.saml_layers() for p in s.expert_parameters()),
        "ff_lora": sum(size(p) for lin in m.lora_linears() for p in lin.trainable_parameters()),
    }
    total = sum(by.values())
    everything = m.base_parameters() + m.adapter_parameters()
    trainable = sum(size(p) for p in everything if p.trainable)
    return {"total": total, "trainable": trainable, "trainable_fraction": trainable / total, "by_component": by}


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "SAMLCKPT" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_tensors
#   per tensor: u16 name_len | name | u8 dtype | u8 ndim | u32 shape[ndim]
#               | u32 block_size | u64 payload_len | u32 crc32(payload) | payload
#
# All integers little-endian.  fp32 payloads are raw little-endian floats;
# nf4/uniform4 payloads are the block scales followed by the packed codes.

MAGIC = b"SAMLCKPT"
FORMAT_VERSION = 1
DTYPES = {"fp32": 0, "nf4": 1, "uniform4": 2}
_DTYPE_NAMES = {v: k for k, v in DTYPES.items()}


def _layer_layout(m: TinyTransformer) -> dict:
    return {
        s.name: {"mode": s.mode, "n_experts": s.n, "has_router": s.router is not None,
                 "router_rows": s.router.n if s.router is not None else 0, "dominant": s.dominant}
        for s in m.saml_layers()
    }


def _metadata(m: TinyTransformer) -> dict:
    return {"config": m.cfg.to_dict(), "layers": _layer_layout(m), **m.meta}


def serialize(m: TinyTransformer, quantize_adapters: bool = False) -> bytes:
    meta = json.dumps(_metadata(m) | {"adapters_quantized": bool(quantize_adapters)},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta]
    tensors = m.named_tensors()
    adapter_names = {p.name for p in m.adapter_parameters()}
    chunks.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        if isinstance(t, QuantizedTensor):
            dtype, shape, bs, payload = t.codebook_id, t.shape, t.block_size, t.to_bytes()
        elif quantize_adapters and name in adapter_names:
            q = quantize_blockwise(t.data, m.cfg.block_size)
            dtype, shape, bs, payload = "nf4", q.shape, q.block_size, q.to_bytes()
        else:
            dtype, shape, bs, payload = "fp32", t.shape, 0, t.data.astype("<f4").tobytes()
        raw = name.encode("utf-8")
        chunks += [
            struct.pack("<H", len(raw)), raw,
            struct.pack("<BB", DTYPES[dtype], len(shape)),
            struct.pack(f"<{len(shape)}I", *shape),
            struct.pack("<IQI", bs, len(payload), zlib.crc32(payload)),
            payload,
        ]
    return b"".join(chunks)


def save_checkpoint(m: TinyTransformer, path, quantize_adapters: bool = False) -> Path:
    path = Path(path)
    path.write_bytes(serialize(m, quantize_adapters))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


@dataclass
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    block_size: int
    payload: bytes = field(repr=False)


def read_checkpoint(path) -> tuple[dict, list[TensorRecord]]:
    """Parse and integrity-check a checkpoint without building a model."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a SAML checkpoint (bad magic)")
    version, meta_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: metadata is not valid JSON ({exc})") from None
    (count,) = r.unpack("<I", "tensor count")
    records = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        code, ndim = r.unpack("<BB", f"dtype of {name}")
        if code not in _DTYPE_NAMES:
            raise UnknownDtypeError(f"tensor {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        bs, plen, crc = r.unpack("<IQI", f"header of {name}")
        payload = r.take(plen, f"payload of {name}")
        if zlib.crc32(payload) != crc:
            raise IntegrityError(name, f"tensor {name!r}: payload checksum mismatch")
        records.append(TensorRecord(name, _DTYPE_NAMES[code], tuple(shape), bs, payload))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} unexpected trailing bytes")
    return meta, records


def _restructure(m: TinyTransformer, layout: dict) -> None:
    for block in m.blocks:
        for proj, layer in list(block.attn.items()):
            spec = layout.get(layer.name) if isinstance(layer, SamlLayer) else None
            if spec is None:
                continue
            if spec["mode"] == "full" and spec["n_experts"] == layer.n:
                continue
            k, d, r = layer.k, layer.d, layer.rank
            experts = [LoraModule(np.zeros((r, k), np.float32), np.zeros((d, r), np.float32), layer.alpha)
                       for _ in range(spec["n_experts"])]
            router = Router(np.zeros((spec["router_rows"], k), np.float32)) if spec["has_router"] else None
            block.attn[proj] = SamlLayer(layer.base, experts, router, spec["mode"], bias=layer.bias,
                                         name=layer.name, dominant=spec["dominant"])


def load_checkpoint(path) -> TinyTransformer:
    meta, records = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    m = build_model(cfg, SeededRng(cfg.seed))
    _restructure(m, meta.get("layers", {}))
    slots = {}
    for lin in m.base_linears():
        slots[f"{lin.name}.base"] = ("base", lin)
        if lin.bias is not None:
            slots[f"{lin.name}.bias"] = ("param", lin.bias)
    for p in m.norm_parameters() + m.adapter_parameters():
        slots[p.name] = ("param", p)
    seen = set()
    for rec in records:
        if rec.name not in slots:
            raise CheckpointError(f"tensor {rec.name!r} does not belong to this architecture")
        kind, target = slots[rec.name]
        if rec.dtype == "fp32":
            if len(rec.payload) != 4 * int(np.prod(rec.shape, dtype=np.int64)):
                raise CheckpointError(f"tensor {rec.name!r}: payload size does not match shape {rec.shape}")
            arr = np.frombuffer(rec.payload, dtype="<f4").astype(np.float32).reshape(rec.shape)
            value = arr
        else:
            value = QuantizedTensor.from_bytes(rec.payload, rec.shape, rec.block_size, rec.dtype)
        if kind == "base":
            expect = tuple(target.base.shape)
            if tuple(rec.shape) != expect:
                raise CheckpointError(f"tensor {rec.name!r}: shape {rec.shape} vs expected {expect}")
            if isinstance(value, QuantizedTensor):
                target.set_base(value)
            else:
                target.set_base(Parameter(value, trainable=False, name=rec.name))
        else:
            if tuple(rec.shape) != target.shape:
                raise CheckpointError(f"tensor {rec.name!r}: shape {rec.shape} vs expected {target.shape}")
            target.data = dequantize_array(value) if isinstance(value, QuantizedTensor) else value
        seen.add(rec.name)
    missing = set(slots) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    m.meta = {k: v for k, v in meta.items() if k not in ("config", "layers", "adapters_quantized")}
    return m


def payload_sizes(path) -> dict[str, tuple[str, int]]:
    """``name -> (dtype, payload bytes)`` for every tensor in a checkpoint."""
    _, records = read_checkpoint(path)
    return {r.name: (r.dtype, len(r.payload)) for r in records}
