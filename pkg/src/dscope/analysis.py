"""Layer representation diagnostics.

Block ``i`` of a trace reads ``hidden[i]`` and writes ``hidden[i + 1]``; its
head maps are ``attn[i]``. All functions here take that block position, not
the original layer id (``trace.layer_ids[i]``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ForecastModel, LayerTrace, forward

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-4


class TraceIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class ImportanceConfig:
    decay_factor: float = 0.5
    preceding_layers: int = 3
    tau_pct: float = 80.0
    top_pct: float = 50.0
    cum_pct: float = 85.0

    def __post_init__(self):
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must be in (0, 1)")
        if self.preceding_layers < 1:
            raise ValueError("preceding_layers must be >= 1")
        for name in ("tau_pct", "top_pct", "cum_pct"):
            v = getattr(self, name)
            if not 0 < v <= 100:
                raise ValueError(f"{name} must be in (0, 100], got {v}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ImportanceConfig":
        """``family`` -> 80/50/85, ``external`` -> 80/50/90."""
        table = {"family": (80.0, 50.0, 85.0), "external": (80.0, 50.0, 90.0)}
        if name not in table:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}")
        tau, top, cum = table[name]
        return cls(**{"tau_pct": tau, "top_pct": top, "cum_pct": cum, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# per-sample primitives


def _flat(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)


def cosine_per_sample(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine of each sample's flattened pair; zero-norm pairs give 0 and a flag."""
    fa, fb = _flat(a), _flat(b)
    na = np.sqrt(np.einsum("ij,ij->i", fa, fa))
    nb = np.sqrt(np.einsum("ij,ij->i", fb, fb))
    dot = np.einsum("ij,ij->i", fa, fb)
    degenerate = (na == 0) | (nb == 0)
    denom = np.where(degenerate, 1.0, na * nb)
    cos = np.where(degenerate, 0.0, dot / denom)
    return cos, degenerate


def distance_per_sample(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = _flat(a) - _flat(b)
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def decay_weights(decay_factor: float, k: int) -> np.ndarray:
    """w_k proportional to decay_factor**k for k = 1..k, summing to 1."""
    w = decay_factor ** np.arange(1, k + 1, dtype=np.float64)
    return w / w.sum()


def head_similarity_per_sample(attn: np.ndarray) -> tuple[np.ndarray, bool]:
    """Mean pairwise cosine between flattened head maps, one value per sample.

    ``attn`` is ``(B, H, N, N)``. With a single head there are no pairs; the
    result is 0 and the flag is set.
    """
    b, h = attn.shape[:2]
    if h < 2:
        return np.zeros(b), True
    flat = np.asarray(attn, dtype=np.float64).reshape(b, h, -1)
    norms = np.sqrt(np.einsum("bhk,bhk->bh", flat, flat))
    gram = np.einsum("bik,bjk->bij", flat, flat)
    denom = norms[:, :, None] * norms[:, None, :]
    cos = np.where(denom > 0, gram / np.where(denom > 0, denom, 1.0), 0.0)
    iu = np.triu_indices(h, k=1)
    return cos[:, iu[0], iu[1]].mean(axis=1), False


def check_rows(attn: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    sums = np.asarray(attn, dtype=np.float64).sum(axis=-1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise TraceIntegrityError(f"attention row {where} sums to {sums[where]:.6g}, not 1")
    if np.any(np.asarray(attn) < 0):
        raise TraceIntegrityError("negative attention weight")


def entropy_per_sample(attn: np.ndarray) -> np.ndarray:
    """Row entropy (natural log, 0 ln 0 = 0) averaged over rows and heads."""
    check_rows(attn)
    p = np.asarray(attn, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    rows = -(p * np.log(safe)).sum(axis=-1)  # (B, H, N)
    return rows.reshape(rows.shape[0], -1).mean(axis=1)


# ---------------------------------------------------------------------------
# trace-level operations (batch means)


def inter_layer_metrics(trace: LayerTrace) -> dict[str, np.ndarray]:
    """Per-block batch-mean distance and cosine between block input and output."""
    if trace.n_states < 2:
        raise ValueError("trace needs at least 2 hidden states")
    n = trace.n_states - 1
    dist = np.empty(n)
    sim = np.empty(n)
    flagged = np.zeros(n, dtype=bool)
    for i in range(n):
        dist[i] = distance_per_sample(trace.hidden[i + 1], trace.hidden[i]).mean()
        c, deg = cosine_per_sample(trace.hidden[i + 1], trace.hidden[i])
        sim[i] = c.mean()
        flagged[i] = bool(deg.any())
    return {"dist": dist, "sim_prev": sim, "zero_norm": flagged}


def head_similarity(trace: LayerTrace, layer: int) -> float:
    vals, single = head_similarity_per_sample(trace.attn[layer])
    if single:
        log.warning("block %d has a single head; head similarity set to 0", layer)
    return float(vals.mean())


def redundancy(trace: LayerTrace, layer: int, cfg: ImportanceConfig) -> float:
    """Decay-weighted cosine of block ``layer``'s output to up to K earlier states."""
    l = layer + 1  # state index of the block output
    if not 1 <= l < trace.n_states:
        raise IndexError(f"block {layer} out of range")
    k_eff = min(cfg.preceding_layers, l)
    w = decay_weights(cfg.decay_factor, k_eff)
    r = 0.0
    for k in range(1, k_eff + 1):
        c, _ = cosine_per_sample(trace.hidden[l], trace.hidden[l - k])
        r += w[k - 1] * c.mean()
    return float(r)


def attention_entropy(trace: LayerTrace, layer: int) -> float:
    return float(entropy_per_sample(trace.attn[layer]).mean())


# ---------------------------------------------------------------------------
# accumulation across batches


@dataclass
class TraceSummary:
    """Sample-weighted sums of every per-block metric, reducible to means."""

    layer_ids: list[int]
    preceding_layers: int
    n_patches: int = 0
    count: int = 0
    batches: int = 0
    dist: np.ndarray = None
    sim_prev: np.ndarray = None
    head_sim: np.ndarray = None
    entropy: np.ndarray = None
    pred_sim: np.ndarray = None  # (n_blocks, K): cosine to the k-th earlier state
    zero_norm: np.ndarray = None
    single_head: bool = False

    def __post_init__(self):
        n, k = len(self.layer_ids), self.preceding_layers
        for name, shape in (("dist", n), ("sim_prev", n), ("head_sim", n), ("entropy", n), ("pred_sim", (n, k))):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape))
        if self.zero_norm is None:
            self.zero_norm = np.zeros(n, dtype=bool)

    def add(self, trace: LayerTrace) -> "TraceSummary":
        if list(trace.layer_ids) != list(self.layer_ids):
            raise ValueError("trace layer ids do not match the summary")
        n = len(self.layer_ids)
        h = trace.hidden
        for i in range(n):
            self.dist[i] += distance_per_sample(h[i + 1], h[i]).sum()
            c, deg = cosine_per_sample(h[i + 1], h[i])
            self.sim_prev[i] += c.sum()
            self.zero_norm[i] |= bool(deg.any())
            for k in range(1, min(self.preceding_layers, i + 1) + 1):
                ck, _ = cosine_per_sample(h[i + 1], h[i + 1 - k])
                self.pred_sim[i, k - 1] += ck.sum()
            hs, single = head_similarity_per_sample(trace.attn[i])
            self.single_head |= single
            self.head_sim[i] += hs.sum()
            self.entropy[i] += entropy_per_sample(trace.attn[i]).sum()
        self.count += h[0].shape[0]
        self.batches += 1
        self.n_patches = h[0].shape[1]
        return self

    def means(self) -> dict[str, np.ndarray]:
        if self.count == 0:
            raise ValueError("empty summary")
        c = float(self.count)
        return {
            "dist": self.dist / c,
            "sim_prev": self.sim_prev / c,
            "head_sim": self.head_sim / c,
            "entropy": self.entropy / c,
            "pred_sim": self.pred_sim / c,
        }

    def redundancy(self, cfg: ImportanceConfig) -> np.ndarray:
        if cfg.preceding_layers > self.preceding_layers:
            raise ValueError(f"summary holds {self.preceding_layers} predecessors, config asks {cfg.preceding_layers}")
        ps = self.means()["pred_sim"]
        out = np.empty(len(self.layer_ids))
        for i in range(len(out)):
            k_eff = min(cfg.preceding_layers, i + 1)
            out[i] = float(decay_weights(cfg.decay_factor, k_eff) @ ps[i, :k_eff])
        return out


def summarize(traces, preceding_layers: int = 3) -> TraceSummary:
    traces = list(traces)
    s = TraceSummary(list(traces[0].layer_ids), preceding_layers)
    for t in traces:
        s.add(t)
    return s


def collect_trace(
    model: ForecastModel,
    windows,
    batch_limit: int | None = None,
    batch_size: int = 64,
    preceding_layers: int = 3,
) -> TraceSummary:
    """Capture-mode forward over up to ``batch_limit`` batches of ``windows``."""
    if len(windows) == 0:
        raise ValueError("no validation windows")
    summary = TraceSummary(list(model.layer_ids), preceding_layers)
    for bi, b in enumerate(windows.batches(batch_size)):
        if batch_limit is not None and bi >= batch_limit:
            break
        _, trace = forward(model, b.inputs, capture=True)
        summary.add(trace)
    return summary


def max_entropy(n_patches: int) -> float:
    return math.log(n_patches)


# ---------------------------------------------------------------------------
# report


@dataclass
class LayerRecord:
    layer_id: int
    dist: float
    sim_prev: float
    head_sim: float
    redundancy: float
    entropy: float
    score: float
    gated: bool
    interior: bool
    flags: list[str] = field(default_factory=list)


@dataclass
class ImportanceReport:
    config: ImportanceConfig
    layers: list[LayerRecord]
    ranking: list[int]  # gated layer ids, most important first
    tau_gate: list[int]
    batch_count: int
    sample_count: int
    n_patches: int
    warnings: list[str] = field(default_factory=list)

    def layer(self, layer_id: int) -> LayerRecord:
        for rec in self.layers:
            if rec.layer_id == layer_id:
                return rec
        raise KeyError(layer_id)

    @property
    def interior_ids(self) -> list[int]:
        return [r.layer_id for r in self.layers if r.interior]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "metadata": {
                "entropy_log_base": "e",
                "batch_count": self.batch_count,
                "sample_count": self.sample_count,
                "n_patches": self.n_patches,
                "max_entropy": max_entropy(self.n_patches) if self.n_patches else None,
            },
            "per_layer": [
                {
                    "layer_id": r.layer_id,
                    "dist": r.dist,
                    "sim_prev": r.sim_prev,
                    "head_sim": r.head_sim,
                    "redundancy": r.redundancy,
                    "entropy": r.entropy,
                    "score": r.score,
                    "gated": r.gated,
                    "interior": r.interior,
                    "flags": list(r.flags),
                }
                for r in self.layers
            ],
            "ranking": list(self.ranking),
            "tau_gate": list(self.tau_gate),
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceReport":
        meta = d.get("metadata", {})
        layers = [LayerRecord(**{**r, "flags": list(r.get("flags", []))}) for r in d["per_layer"]]
        return cls(
            config=ImportanceConfig(**d["config"]),
            layers=layers,
            ranking=list(d["ranking"]),
            tau_gate=list(d.get("tau_gate", [])),
            batch_count=meta.get("batch_count", 0),
            sample_count=meta.get("sample_count", 0),
            n_patches=meta.get("n_patches", 0),
            warnings=list(d.get("warnings", [])),
        )
