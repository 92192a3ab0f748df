"""Quantise / pretrain / adapt pipeline on a synthetic multi-speaker labelling task.

The task: a clean token sequence is drawn from a shared sparse Markov chain and
the model must recover it (per-position labels) from a distorted observation.
Distortion happens in two layers.  A corpus-wide *domain* permutation plays the
role of the mismatch between the base model's training data and the target
domain; each speaker then applies its own token confusion kernel, a swap of a
few token pairs mixed with a speaker-specific noise distribution.  Stage 2
can learn the shared part from many speakers, stage 3 only the speaker part.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .adapters import (COLLAPSED, IMBALANCED, PRUNE_MODES, PruneReport, RoutingStats, SamlLayer, detect_collapse,
                       init_experts_from_loras, prune_layer)
from .errors import ConfigError, CorpusError, NumericError, SpeakerOverlapError, StageOrderError, ValidationError
from .model import ModelConfig, TinyTransformer, build_model, count_params, quantize_base
from .numerics import Optimizer, OptimizerConfig, SeededRng

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class CorpusConfig:
    n_speakers: int = 60
    n_target_speakers: int = 10
    utterances_per_speaker: int = 60
    seq_len: int = 16
    vocab: int = 32
    master_seed: int = 0
    successors: int = 4
    domain_swaps: int = 4
    speaker_swaps: int = 4
    noise: float = 0.05
    tv_floor: float = 0.05
    base_utterances: int = 4000
    base_noise: float = 0.1

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise CorpusError("need at least two speakers")
        if not 0 < self.n_target_speakers < self.n_speakers:
            raise CorpusError("target speakers must be a non-empty strict subset of all speakers")
        if self.utterances_per_speaker < 5:
            raise CorpusError("need at least 5 utterances per speaker for a 2/5-1/5-2/5 split")
        if self.seq_len < 1 or self.successors < 1 or self.successors > self.vocab:
            raise CorpusError("invalid sequence length or successor count")
        if not 0 <= self.noise < 1 or not 0 <= self.base_noise < 1:
            raise CorpusError("noise rates must lie in [0, 1)")
        if 2 * (self.domain_swaps + self.speaker_swaps) > self.vocab:
            raise CorpusError(f"vocabulary of {self.vocab} is too small for "
                              f"{self.domain_swaps}+{self.speaker_swaps} swapped pairs")


@dataclass
class SpeakerSpec:
    """A speaker's stochastic channel ``K[clean, observed]`` (rows sum to 1)."""

    speaker_id: int
    seed: int
    swaps: list[tuple[int, int]]
    bias: np.ndarray
    noise: float

    def permutation(self, vocab: int) -> np.ndarray:
        perm = np.arange(vocab)
        for a, b in self.swaps:
            perm[a], perm[b] = perm[b], perm[a]
        return perm

    def kernel(self, vocab: int, domain_perm: np.ndarray | None = None) -> np.ndarray:
        perm = self.permutation(vocab)
        if domain_perm is not None:
            perm = perm[domain_perm]
        e = np.exp(self.bias - self.bias.max())
        K = np.tile(self.noise * e / e.sum(), (vocab, 1))
        K[np.arange(vocab), perm] += 1 - self.noise
        return K


def speaker_tv(a: SpeakerSpec, b: SpeakerSpec, vocab: int) -> float:
    """Mean over clean tokens of the total-variation distance between kernel rows."""
    Ka, Kb = a.kernel(vocab), b.kernel(vocab)
    return float(0.5 * np.abs(Ka - Kb).sum(axis=1).mean())


@dataclass
class Utterance:
    speaker_id: int
    tokens: np.ndarray
    labels: np.ndarray
    split: str


@dataclass
class SyntheticCorpus:
    config: CorpusConfig
    transition: np.ndarray
    domain_perm: np.ndarray
    speakers: dict[int, SpeakerSpec]
    utterances: list[Utterance]
    pretrain_speakers: list[int]
    target_speakers: list[int]

    def select(self, split: str | None = None, speakers=None) -> list[Utterance]:
        wanted = None if speakers is None else set(int(s) for s in speakers)
        return [u for u in self.utterances
                if (split is None or u.split == split) and (wanted is None or u.speaker_id in wanted)]

    def arrays(self, split: str | None = None, speakers=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        utts = self.select(split, speakers)
        if not utts:
            raise CorpusError(f"no utterances for split={split!r} speakers={speakers}")
        return (np.stack([u.tokens for u in utts]), np.stack([u.labels for u in utts]),
                np.array([u.speaker_id for u in utts]))

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "transition": self.transition.tolist(),
            "domain_perm": self.domain_perm.tolist(),
            "speakers": [
                {"speaker_id": s.speaker_id, "seed": s.seed, "swaps": [list(p) for p in s.swaps],
                 "bias": s.bias.tolist(), "noise": s.noise}
                for s in self.speakers.values()
            ],
            "utterances": [
                {"speaker_id": u.speaker_id, "tokens": u.tokens.tolist(), "labels": u.labels.tolist(), "split": u.split}
                for u in self.utterances
            ],
            "pretrain_speakers": self.pretrain_speakers,
            "target_speakers": self.target_speakers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticCorpus:
        speakers = {
            s["speaker_id"]: SpeakerSpec(s["speaker_id"], s["seed"], [tuple(p) for p in s["swaps"]],
                                         np.asarray(s["bias"]), s["noise"])
            for s in d["speakers"]
        }
        utts = [Utterance(u["speaker_id"], np.asarray(u["tokens"], dtype=np.int64),
                          np.asarray(u["labels"], dtype=np.int64), u["split"]) for u in d["utterances"]]
        return cls(CorpusConfig(**d["config"]), np.asarray(d["transition"]), np.asarray(d["domain_perm"]),
                   speakers, utts, list(d["pretrain_speakers"]), list(d["target_speakers"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> SyntheticCorpus:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _markov_chain(vocab: int, successors: int, rng: SeededRng) -> np.ndarray:
    P = np.zeros((vocab, vocab))
    for v in range(vocab):
        nxt = rng.choice(vocab, size=successors, replace=False)
        P[v, nxt] = rng.dirichlet(np.full(successors, 2.0))
    return P


def _random_swaps(vocab: int, n_pairs: int, rng: SeededRng, avoid=()) -> list[tuple[int, int]]:
    pool = np.array([v for v in range(vocab) if v not in set(avoid)])
    chosen = rng.choice(pool.size, size=2 * n_pairs, replace=False)
    toks = pool[chosen]
    return [(int(min(a, b)), int(max(a, b))) for a, b in zip(toks[0::2], toks[1::2])]


def sample_clean(transition: np.ndarray, n: int, seq_len: int, rng: SeededRng) -> np.ndarray:
    vocab = transition.shape[0]
    out = np.empty((n, seq_len), dtype=np.int64)
    out[:, 0] = rng.integers(0, vocab, size=n)
    cdf = np.cumsum(transition, axis=1)
    for t in range(1, seq_len):
        u = rng.random(n)
        rows = cdf[out[:, t - 1]]
        out[:, t] = np.minimum((u[:, None] > rows).sum(axis=1), vocab - 1)
    return out


def _emit(clean: np.ndarray, K: np.ndarray, rng: SeededRng) -> np.ndarray:
    cdf = np.cumsum(K, axis=1)
    u = rng.random(clean.shape)
    obs = (u[..., None] > cdf[clean]).sum(axis=-1)
    return np.minimum(obs, K.shape[0] - 1).astype(np.int64)


def split_sizes(n: int) -> tuple[int, int, int]:
    """2/5 train, 1/5 dev, the remainder test."""
    train, dev = (2 * n) // 5, n // 5
    return train, dev, n - train - dev


def generate_corpus(n_speakers: int = 60, utterances_per_speaker: int = 60, seq_len: int = 16, vocab: int = 32,
                    master_seed: int = 0, **overrides) -> SyntheticCorpus:
    cfg = CorpusConfig(n_speakers=n_speakers, utterances_per_speaker=utterances_per_speaker, seq_len=seq_len,
                       vocab=vocab, master_seed=master_seed, **overrides)
    return generate_corpus_from_config(cfg)


def generate_corpus_from_config(cfg: CorpusConfig) -> SyntheticCorpus:
    cfg.validate()
    root = SeededRng(cfg.master_seed)
    transition = _markov_chain(cfg.vocab, cfg.successors, root.spawn("language"))
    domain_swaps = _random_swaps(cfg.vocab, cfg.domain_swaps, root.spawn("domain"))
    domain_perm = np.arange(cfg.vocab)
    for a, b in domain_swaps:
        domain_perm[a], domain_perm[b] = domain_perm[b], domain_perm[a]

    speakers: dict[int, SpeakerSpec] = {}
    for sid in range(cfg.n_speakers):
        srng = root.spawn("speaker", sid)
        for _attempt in range(200):
            spec = SpeakerSpec(sid, srng.seed, _random_swaps(cfg.vocab, cfg.speaker_swaps, srng),
                               srng.normal(cfg.vocab, std=1.0).astype(np.float64), cfg.noise)
            if all(speaker_tv(spec, other, cfg.vocab) >= cfg.tv_floor for other in speakers.values()):
                break
        else:
            raise CorpusError(f"vocabulary of {cfg.vocab} is too small to keep speaker {sid} "
                              f"at total-variation distance >= {cfg.tv_floor} from the others")
        speakers[sid] = spec

    utterances: list[Utterance] = []
    n_train, n_dev, _ = split_sizes(cfg.utterances_per_speaker)
    for sid, spec in speakers.items():
        urng = root.spawn("utterances", sid)
        K = spec.kernel(cfg.vocab, domain_perm)
        seen: set[bytes] = set()
        rows: list[tuple[np.ndarray, np.ndarray]] = []
        while len(rows) < cfg.utterances_per_speaker:
            clean = sample_clean(transition, cfg.utterances_per_speaker, cfg.seq_len, urng)
            obs = _emit(clean, K, urng)
            for c, o in zip(clean, obs):
                key = o.tobytes()
                if key not in seen and len(rows) < cfg.utterances_per_speaker:
                    seen.add(key)
                    rows.append((o, c))
        order = urng.permutation(len(rows))
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
            utterances.append(Utterance(sid, rows[idx][0], rows[idx][1], split))
    targets = list(range(cfg.n_speakers - cfg.n_target_speakers, cfg.n_speakers))
    pretrain = list(range(cfg.n_speakers - cfg.n_target_speakers))
    return SyntheticCorpus(cfg, transition, domain_perm, speakers, utterances, pretrain, targets)


def generate_base_data(corpus: SyntheticCorpus, n: int | None = None, seed_label: str = "base"):
    """Generic training data for the base model: same language, no domain or speaker shift."""
    cfg = corpus.config
    rng = SeededRng(cfg.master_seed).spawn(seed_label)
    n = cfg.base_utterances if n is None else n
    clean = sample_clean(corpus.transition, n, cfg.seq_len, rng)
    K = np.full((cfg.vocab, cfg.vocab), cfg.base_noise / cfg.vocab)
    K[np.arange(cfg.vocab), np.arange(cfg.vocab)] += 1 - cfg.base_noise
    return _emit(clean, K, rng), clean


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 600
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    interleave_period: int = 1
    eval_every: int = 50

    def validate(self) -> None:
        if self.stage not in ("base", "pretrain", "adapt", "donor"):
            raise ValidationError(f"unknown training stage {self.stage!r}")
        for name in ("batch_size", "interleave_period", "eval_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.steps < 0:
            raise ValidationError("steps must be non-negative")

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.optimizer, self.lr, (self.beta1, self.beta2), self.eps)


def interleave_phase(step: int, period: int, has_router: bool) -> str:
    """``"experts"`` on even periods, ``"router"`` on odd ones; always experts without a router."""
    if not has_router:
        return "experts"
    return "experts" if (step // period) % 2 == 0 else "router"


def apply_phase(m: TinyTransformer, phase: str) -> None:
    for p in m.expert_parameters():
        p.trainable = phase == "experts"
    for p in m.router_parameters():
        p.trainable = phase == "router"


class MetricsLog:
    """Line-delimited JSON records, kept in memory and optionally appended to a file."""

    def __init__(self, path=None, echo: bool = False):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        self.echo = echo

    def emit(self, record: dict) -> None:
        self.records.append(record)
        line = json.dumps(record, sort_keys=True)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(line + "\n")
        if self.echo:
            print(line)


def _batches(n: int, batch_size: int, rng: SeededRng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def _loss(m: TinyTransformer, tokens: np.ndarray, labels: np.ndarray, adapters: bool = True) -> nx.Tensor:
    loss = nx.cross_entropy(m.forward(tokens, adapters), labels.reshape(-1))
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite training loss {float(loss.data)}")
    return loss


def mean_loss(m: TinyTransformer, tokens: np.ndarray, labels: np.ndarray, adapters: bool = True,
              chunk: int = 256) -> float:
    """Token-averaged cross-entropy without recording a tape."""
    total, count = 0.0, 0
    with nx.no_grad():
        for i in range(0, len(tokens), chunk):
            t, lab = tokens[i:i + chunk], labels[i:i + chunk]
            total += float(nx.cross_entropy(m.forward(t, adapters), lab.reshape(-1)).data) * lab.size
            count += lab.size
    return total / count


def _snapshot(params) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params, snap) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()


def train_adapters(m: TinyTransformer, train: tuple[np.ndarray, np.ndarray], dev: tuple[np.ndarray, np.ndarray],
                   cfg: TrainConfig, rng: SeededRng, log_: MetricsLog | None = None, stage: str = "stage2",
                   speaker=None, grad_hook: Callable[[int, str, TinyTransformer], None] | None = None,
                   seed=None) -> dict:
    """Interleaved router/expert training in place, keeping the best-dev adapters.

    ``seed`` is only written into the metric records.  Returns a summary with
    the best dev loss and the step it was reached at.
    """
    cfg.validate()
    params = m.adapter_parameters()
    has_router = bool(m.router_parameters())
    seed = m.meta.get("master_seed", m.meta.get("seed")) if seed is None else seed
    opt = Optimizer(params, cfg.optimizer_config())
    tokens, labels = train
    best = mean_loss(m, *dev)
    best_step, snap = 0, _snapshot(params)
    if log_ is not None:
        log_.emit(_record(stage, 0, speaker, best, None, seed, "dev"))
    batches = _batches(len(tokens), cfg.batch_size, rng)
    for step in range(cfg.steps):
        phase = interleave_phase(step, cfg.interleave_period, has_router)
        apply_phase(m, phase)
        idx = next(batches)
        loss = _loss(m, tokens[idx], labels[idx])
        nx.backward(loss)
        if grad_hook is not None:
            grad_hook(step, phase, m)
        opt.step()
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            dev_loss = mean_loss(m, *dev)
            if log_ is not None:
                log_.emit(_record(stage, step + 1, speaker, dev_loss, float(loss.data), seed, "dev"))
            if dev_loss < best:
                best, best_step, snap = dev_loss, step + 1, _snapshot(params)
    _restore(params, snap)
    m.set_adapters_trainable(True)
    return {"best_dev_loss": best, "best_step": best_step}


def _record(stage, step, speaker, loss, train_loss, seed, split, ter=None, layers=None) -> dict:
    return {"stage": stage, "step": step, "speaker": speaker, "split": split, "loss": loss,
            "train_loss": train_loss, "token_error_rate": ter, "layers": layers or {}, "seed": seed}


def train_base(corpus: SyntheticCorpus, model_cfg: ModelConfig, steps: int = 800, batch_size: int = 64,
               lr: float = 3e-3) -> TinyTransformer:
    """Fit every base weight on generic data; adapters stay out of the graph."""
    if model_cfg.vocab_size != corpus.config.vocab or model_cfg.max_len < corpus.config.seq_len:
        raise ValidationError("model vocabulary/length do not match the corpus")
    m = build_model(model_cfg, SeededRng(model_cfg.seed))
    m.set_adapters_trainable(False)
    m.set_base_trainable(True)
    tokens, labels = generate_base_data(corpus)
    params = m.base_parameters()
    opt = Optimizer(params, OptimizerConfig("adam", lr))
    rng = SeededRng(corpus.config.master_seed).spawn("base-training")
    batches = _batches(len(tokens), batch_size, rng)
    for _ in range(steps):
        idx = next(batches)
        nx.backward(_loss(m, tokens[idx], labels[idx], adapters=False))
        opt.step()
    m.set_base_trainable(False)
    m.set_adapters_trainable(True)
    m.meta.update(stage="base", master_seed=corpus.config.master_seed)
    return m


# ---------------------------------------------------------------------------
# stages


def stage1(m: TinyTransformer, block_size: int | None = None, probe_tokens: np.ndarray | None = None) -> TinyTransformer:
    """Quantise the base; with ``probe_tokens`` also record the largest logit shift it causes."""
    if m.quantized:
        raise StageOrderError("stage 1 needs an FP32 model; this one is already quantised")
    out = quantize_base(m, block_size)
    out.meta["stage"] = "stage1"
    if probe_tokens is not None:
        with nx.no_grad():
            diff = np.abs(m.forward(probe_tokens, adapters=False).data - out.forward(probe_tokens, adapters=False).data)
        out.meta["compression"]["max_logit_diff"] = float(diff.max())
    return out


def _check_disjoint(pretrain, targets) -> None:
    overlap = sorted(set(int(s) for s in pretrain) & set(int(s) for s in targets))
    if overlap:
        raise SpeakerOverlapError(f"pretraining and adaptation speakers overlap: {overlap}")


def stage2_pretrain(m_q: TinyTransformer, corpus: SyntheticCorpus, cfg: TrainConfig, speakers=None,
                    exclude=None, fp32_mode: bool = False, log_: MetricsLog | None = None,
                    donors: dict[str, list] | None = None, grad_hook=None) -> TinyTransformer:
    """Pretrain routers, experts and feed-forward LoRAs on many speakers.

    ``speakers`` defaults to the corpus' pretraining speakers and ``exclude``
    to its adaptation targets; any overlap is an error.
    """
    stage = m_q.meta.get("stage")
    if stage != "stage1" and not (fp32_mode and stage == "base"):
        raise StageOrderError(f"stage 2 needs a stage-1 (quantised) model, got stage {stage!r}"
                              + ("" if fp32_mode else "; pass fp32_mode for an unquantised run"))
    speakers = list(corpus.pretrain_speakers if speakers is None else speakers)
    exclude = list(corpus.target_speakers if exclude is None else exclude)
    _check_disjoint(speakers, exclude)
    m = m_q.copy()
    if donors:
        for layer in m.saml_layers():
            if layer.name in donors:
                layer.experts = init_experts_from_loras(donors[layer.name])
                layer._rename()
    rng = SeededRng(corpus.config.master_seed).spawn("stage2", m.cfg.seed)
    tr = corpus.arrays("train", speakers)[:2]
    dev = corpus.arrays("dev", speakers)[:2]
    summary = train_adapters(m, tr, dev, cfg, rng, log_, "stage2", None, grad_hook, corpus.config.master_seed)
    m.meta.update(stage="stage2", pretrain_speakers=speakers, pretrain_summary=summary, fp32_mode=bool(fp32_mode))
    return m


def stage3_adapt(m_p: TinyTransformer, corpus: SyntheticCorpus, speaker: int, cfg: TrainConfig,
                 log_: MetricsLog | None = None) -> TinyTransformer:
    if m_p.meta.get("stage") != "stage2":
        raise StageOrderError(f"stage 3 needs a stage-2 (pretrained) model, got stage {m_p.meta.get('stage')!r}")
    _check_disjoint(m_p.meta.get("pretrain_speakers", []), [speaker])
    train = corpus.select("train", [speaker])
    if not train:
        raise CorpusError(f"speaker {speaker} has no training utterances")
    m = m_p.copy()
    rng = SeededRng(corpus.config.master_seed).spawn("stage3", speaker)
    summary = train_adapters(m, corpus.arrays("train", [speaker])[:2], corpus.arrays("dev", [speaker])[:2],
                             cfg, rng, log_, "stage3", int(speaker), seed=corpus.config.master_seed)
    m.meta.update(stage="stage3", speaker_id=int(speaker), adapt_summary=summary)
    return m


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SpeakerMetrics:
    loss: float
    token_error_rate: float
    n_tokens: int


@dataclass
class EvalReport:
    split: str
    per_speaker: dict[int, SpeakerMetrics]
    mean_loss: float
    mean_token_error_rate: float
    routing: dict[str, RoutingStats] = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "split": self.split,
            "per_speaker": {str(k): asdict(v) for k, v in self.per_speaker.items()},
            "mean_loss": self.mean_loss,
            "mean_token_error_rate": self.mean_token_error_rate,
            "routing": {k: v.summary() for k, v in self.routing.items()},
            "params": {k: v for k, v in self.params.items() if k != "by_component"},
        }


def _speaker_metrics(m, tokens, labels, adapters=True, chunk=256) -> SpeakerMetrics:
    total, wrong = 0.0, 0
    with nx.no_grad():
        for i in range(0, len(tokens), chunk):
            t, lab = tokens[i:i + chunk], labels[i:i + chunk].reshape(-1)
            logits = m.forward(t, adapters)
            total += float(nx.cross_entropy(logits, lab).data) * lab.size
            wrong += int((logits.data.argmax(axis=1) != lab).sum())
    n = labels.size
    return SpeakerMetrics(total / n, wrong / n, int(n))


def token_error_rate(predictions, targets) -> float:
    p, t = np.asarray(predictions).reshape(-1), np.asarray(targets).reshape(-1)
    if p.shape != t.shape or t.size == 0:
        raise ValidationError("predictions and targets must be non-empty and equally long")
    return float(np.mean(p != t))


def evaluate(m: TinyTransformer, corpus: SyntheticCorpus, split: str, speakers=None, adapters: bool = True,
             models: dict[int, TinyTransformer] | None = None) -> EvalReport:
    """Per-speaker loss / token error rate and their unweighted mean over speakers.

    ``models`` optionally maps a speaker to its own adapted model; other
    speakers are scored with ``m``.
    """
    speakers = sorted(set(corpus.target_speakers if speakers is None else speakers))
    logs: dict[str, list[np.ndarray]] = {}
    layers_by_model = {}
    per: dict[int, SpeakerMetrics] = {}
    for sid in speakers:
        model = (models or {}).get(sid, m)
        utts = corpus.select(split, [sid])
        if not utts:
            raise CorpusError(f"speaker {sid} has no {split!r} utterances")
        for layer in model.saml_layers():
            layer.gate_log = []
        layers_by_model[id(model)] = model
        try:
            per[sid] = _speaker_metrics(model, np.stack([u.tokens for u in utts]), np.stack([u.labels for u in utts]),
                                        adapters)
            for layer in model.saml_layers():
                if layer.router is not None and layer.gate_log:
                    logs.setdefault(layer.name, []).extend(layer.gate_log)
        finally:
            for layer in model.saml_layers():
                layer.gate_log = None
    if not per:
        raise CorpusError("evaluation needs at least one speaker")
    routing = {name: RoutingStats.from_gates(np.concatenate(g)) for name, g in sorted(logs.items())}
    return EvalReport(split, per, float(np.mean([v.loss for v in per.values()])),
                      float(np.mean([v.token_error_rate for v in per.values()])), routing, count_params(m))


def eval_records(report: EvalReport, stage: str, seed) -> list[dict]:
    layers = {k: {"top1_fraction": v.top1_fraction, "entropy": v.mean_entropy} for k, v in report.routing.items()}
    out = [_record(stage, None, sid, v.loss, None, seed, report.split, v.token_error_rate, layers)
           for sid, v in report.per_speaker.items()]
    out.append(_record(stage, None, "mean", report.mean_loss, None, seed, report.split,
                       report.mean_token_error_rate, layers))
    return out


# ---------------------------------------------------------------------------
# pruning


def layer_routing(m: TinyTransformer, tokens: np.ndarray) -> dict[str, RoutingStats]:
    """Routing statistics of every routed SAML layer on ``tokens`` (calibration inputs)."""
    for layer in m.saml_layers():
        layer.gate_log = []
    try:
        with nx.no_grad():
            for i in range(0, len(tokens), 256):
                m.forward(tokens[i:i + 256])
        return {layer.name: RoutingStats.from_gates(np.concatenate(layer.gate_log))
                for layer in m.saml_layers() if layer.router is not None and layer.gate_log}
    finally:
        for layer in m.saml_layers():
            layer.gate_log = None


def prune_model(m: TinyTransformer, calibration_tokens: np.ndarray, mode: str = "collapse_prune",
                collapse_threshold: float = 0.99, imbalance_threshold: float = 0.90) -> tuple[TinyTransformer, PruneReport]:
    """Prune SAML layers whose routing has collapsed onto one expert.

    ``collapse_prune`` touches collapsed layers only; the top-1 modes also
    shrink imbalanced ones.  Healthy layers are left alone.
    """
    if mode not in PRUNE_MODES:
        raise ConfigError(f"unknown prune mode {mode!r}; expected one of {PRUNE_MODES}")
    for name, t in (("collapse_threshold", collapse_threshold), ("imbalance_threshold", imbalance_threshold)):
        if not 0 < t <= 1:
            raise ConfigError(f"{name} must lie in (0, 1], got {t}")
    out = m.copy()
    stats = layer_routing(out, calibration_tokens)
    report = PruneReport()
    for block in out.blocks:
        for proj, layer in list(block.attn.items()):
            if not isinstance(layer, SamlLayer) or layer.mode != "full" or layer.name not in stats:
                continue
            verdict = detect_collapse(stats[layer.name], collapse_threshold, imbalance_threshold)
            if verdict == COLLAPSED:
                report.layers_collapsed.append(layer.name)
            elif verdict == IMBALANCED:
                report.layers_imbalanced.append(layer.name)
            targeted = verdict == COLLAPSED or (verdict == IMBALANCED and mode != "collapse_prune")
            if targeted:
                block.attn[proj], r = prune_layer(layer, mode, stats[layer.name])
                report.params_removed += r.params_removed
                report.modes.update(r.modes)
    out.meta["prune"] = report.as_dict()
    return out, report


# ---------------------------------------------------------------------------
# donors, sweeps, embeddings


def fit_donors(m_q: TinyTransformer, corpus: SyntheticCorpus, cfg: TrainConfig, n: int, speakers=None) -> dict:
    """Single-LoRA adapters fitted on one pretraining speaker each, grouped by SAML layer."""
    speakers = list(corpus.pretrain_speakers if speakers is None else speakers)[:n]
    if len(speakers) < n:
        raise CorpusError(f"need {n} donor speakers, only {len(speakers)} available")
    one = ModelConfig.from_dict({**m_q.cfg.to_dict(), "n_experts": 1})
    donors: dict[str, list] = {}
    for sid in speakers:
        single = build_model(one, SeededRng(one.seed).spawn("donor", sid))
        _share_base(single, m_q)
        rng = SeededRng(corpus.config.master_seed).spawn("donor", sid)
        train_adapters(single, corpus.arrays("train", [sid])[:2], corpus.arrays("dev", [sid])[:2], cfg, rng,
                       stage="donor", speaker=sid)
        for layer in single.saml_layers():
            donors.setdefault(layer.name, []).append(layer.experts[0])
    return donors


def _share_base(dst: TinyTransformer, src: TinyTransformer) -> None:
    for a, b in zip(dst.base_linears(), src.base_linears()):
        a.set_base(b.base)
        a._dequantised = b._dequantised
        if a.bias is not None:
            a.bias.data = b.bias.data.copy()
    for a, b in zip(dst.norm_parameters(), src.norm_parameters()):
        a.data = b.data.copy()
    dst.meta = {k: v for k, v in src.meta.items() if k in ("stage", "seed", "master_seed", "compression")}


def with_experts(m_q: TinyTransformer, n_experts: int, seed: int | None = None) -> TinyTransformer:
    """Same frozen base, fresh adapters with ``n_experts`` per SAML layer."""
    overrides = {"n_experts": int(n_experts)} if seed is None else {"n_experts": int(n_experts), "seed": int(seed)}
    cfg = ModelConfig.from_dict({**m_q.cfg.to_dict(), **overrides})
    out = build_model(cfg, SeededRng(cfg.seed))
    _share_base(out, m_q)
    return out


def single_lora_model(m_q: TinyTransformer) -> TinyTransformer:
    """Attention projections as plain single LoRAs (collapsed mode, no router)."""
    out = with_experts(m_q, 1)
    for block in out.blocks:
        for proj, layer in block.attn.items():
            if isinstance(layer, SamlLayer):
                block.attn[proj] = SamlLayer(layer.base, layer.experts, None, "collapsed_single_lora",
                                             bias=layer.bias, name=layer.name, dominant=0)
                block.attn[proj]._dequantised = layer._dequantised
    return out


def _dev_row(m: TinyTransformer, corpus: SyntheticCorpus, cfg: TrainConfig) -> dict:
    m_p = stage2_pretrain(m, corpus, cfg, fp32_mode=not m.quantized)
    dev = evaluate(m_p, corpus, "dev", corpus.pretrain_speakers)
    pc = count_params(m_p)
    return {"dev_loss": dev.mean_loss, "dev_token_error_rate": dev.mean_token_error_rate,
            "trainable_params": pc["trainable"], "total_params": pc["total"]}


def sweep_experts(m_q: TinyTransformer, corpus: SyntheticCorpus, expert_counts, cfg: TrainConfig,
                  include_single_lora: bool = True, noise_seed: int | None = None) -> dict:
    """One stage-2 run per expert count from the same quantised base.

    With ``noise_seed`` the n=1 run is repeated under a different adapter seed
    (init and batch order); the gap between the two is the seed noise.
    """
    counts = [int(c) for c in expert_counts]
    if not counts or min(counts) < 1:
        raise ValidationError("expert counts must be positive")
    rows = [{"n_experts": n, **_dev_row(with_experts(m_q, n), corpus, cfg)} for n in counts]
    out: dict = {"rows": rows}
    if include_single_lora:
        out["single_lora"] = _dev_row(single_lora_model(m_q), corpus, cfg)
    if noise_seed is not None:
        a = _dev_row(with_experts(m_q, 1), corpus, cfg)["dev_loss"]
        b = _dev_row(with_experts(m_q, 1, noise_seed), corpus, cfg)["dev_loss"]
        out["seed_noise"] = abs(a - b)
    losses = [r["dev_loss"] for r in sorted(rows, key=lambda r: r["n_experts"])]
    out["monotone_non_worsening"] = bool(all(b <= a for a, b in zip(losses, losses[1:])))
    return out


def format_sweep(result: dict) -> str:
    lines = [f"{'experts':>8} {'dev_loss':>9} {'dev_ter':>8} {'trainable':>10} {'total':>8}"]
    for r in result["rows"]:
        lines.append(f"{r['n_experts']:>8} {r['dev_loss']:>9.4f} {r['dev_token_error_rate']:>8.4f} "
                     f"{r['trainable_params']:>10} {r['total_params']:>8}")
    if "single_lora" in result:
        r = result["single_lora"]
        lines.append(f"{'lora':>8} {r['dev_loss']:>9.4f} {r['dev_token_error_rate']:>8.4f} "
                     f"{r['trainable_params']:>10} {r['total_params']:>8}")
    return "\n".join(lines)


def embeddings(m: TinyTransformer, tokens: np.ndarray) -> np.ndarray:
    """Mean over positions of the final-block representation, one row per utterance."""
    B, L = tokens.shape
    with nx.no_grad():
        h = m.encode(tokens).data.reshape(B, L, -1)
    return h.mean(axis=1)


def export_embeddings(m: TinyTransformer, corpus: SyntheticCorpus, split: str, path, speakers=None,
                      models: dict[int, TinyTransformer] | None = None) -> Path:
    """Comma-separated rows ``speaker_id, e_1 .. e_d`` (per-speaker models override ``m``)."""
    speakers = sorted(set(corpus.target_speakers if speakers is None else speakers))
    lines = []
    for sid in speakers:
        model = (models or {}).get(sid, m)
        tokens, _, _ = corpus.arrays(split, [sid])
        for row in embeddings(model, tokens):
            lines.append(",".join([str(sid)] + [repr(float(v)) for v in row]))
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise ValidationError(f"cannot write embeddings to {path}: {exc}") from None
    return path


def separation_ratio(emb: np.ndarray, labels: np.ndarray) -> float:
    """Mean distance between speaker centroids over mean distance of points to their own centroid."""
    ids = np.unique(labels)
    cents = np.stack([emb[labels == s].mean(axis=0) for s in ids])
    intra = np.mean([np.linalg.norm(emb[labels == s] - c, axis=1).mean() for s, c in zip(ids, cents)])
    diffs = cents[:, None, :] - cents[None, :, :]
    iu = np.triu_indices(len(ids), 1)
    inter = np.linalg.norm(diffs, axis=-1)[iu].mean()
    return float(inter / intra)


# ---------------------------------------------------------------------------
# end-to-end run


@dataclass
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    base_steps: int = 800
    base_batch_size: int = 64
    base_lr: float = 3e-3
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(stage="pretrain"))
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(stage="adapt", steps=150, batch_size=24,
                                                                    lr=1e-2, eval_every=10))
    donor_init: bool = False
    donor: TrainConfig = field(default_factory=lambda: TrainConfig(stage="donor", steps=100, batch_size=24,
                                                                    eval_every=20))
    fp32_mode: bool = False


def run_pipeline(cfg: PipelineConfig, log_: MetricsLog | None = None) -> dict:
    """Base training, stage 1-3 for every target speaker, and the evaluations around them."""
    log_ = log_ if log_ is not None else MetricsLog()
    seed = cfg.corpus.master_seed
    corpus = generate_corpus_from_config(cfg.corpus)
    model_cfg = ModelConfig.from_dict({**cfg.model.to_dict(), "vocab_size": cfg.corpus.vocab,
                                       "max_len": max(cfg.model.max_len, cfg.corpus.seq_len)})
    base = train_base(corpus, model_cfg, cfg.base_steps, cfg.base_batch_size, cfg.base_lr)
    m_q = base if cfg.fp32_mode else stage1(base, probe_tokens=corpus.arrays("dev", corpus.pretrain_speakers)[0][:64])
    stage1_tensors = base_tensor_bytes(m_q)
    baseline = evaluate(m_q, corpus, "dev", corpus.pretrain_speakers, adapters=False)
    for r in eval_records(baseline, "baseline", seed):
        log_.emit(r)
    donors = fit_donors(m_q, corpus, cfg.donor, m_q.cfg.n_experts) if cfg.donor_init else None
    m_p = stage2_pretrain(m_q, corpus, cfg.pretrain, fp32_mode=cfg.fp32_mode, log_=log_, donors=donors)
    pre_dev = evaluate(m_p, corpus, "dev", corpus.pretrain_speakers)
    for r in eval_records(pre_dev, "stage2", seed):
        log_.emit(r)
    pre_test = evaluate(m_p, corpus, "test", corpus.target_speakers)
    for r in eval_records(pre_test, "stage2-target", seed):
        log_.emit(r)
    adapted = {sid: stage3_adapt(m_p, corpus, sid, cfg.adapt, log_) for sid in corpus.target_speakers}
    post_test = evaluate(m_p, corpus, "test", corpus.target_speakers, models=adapted)
    for r in eval_records(post_test, "stage3", seed):
        log_.emit(r)
    return {
        "corpus": corpus, "base": base, "stage1": m_q, "stage2": m_p, "adapted": adapted,
        "baseline_dev": baseline, "pretrained_dev": pre_dev, "pretrained_test": pre_test,
        "adapted_test": post_test, "stage1_tensors": stage1_tensors, "records": log_.records,
    }


def base_tensor_bytes(m: TinyTransformer) -> dict[str, bytes]:
    return {k: (v.to_bytes() if hasattr(v, "to_bytes") else v.data.tobytes())
            for k, v in m.named_tensors().items() if not k.endswith((".A", ".B", ".W_g"))}
