"""Fact-as-program model: encoder, affine rule bank, KDE grounding, fusion head.

All computation is batched over rows.  Every block has a forward that returns
a cache and a backward that consumes it; gradients are written out by hand
(there is no autodiff tape).  The single-example functions at the bottom of
the module are thin wrappers over the batched ones.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple, Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .embed import EmbeddingTable
from .numkit import gelu, gelu_grad, logsumexp, make_rng, sigmoid, softmax, xavier_uniform

VARIANTS = (
    "full",
    "single_affine",
    "direct_classification",
    "no_structure_encoder",
    "uniform_selector",
    "no_exec_score",
    "mlp_rules",
    "min_distance",
)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    d_emb: int = 64
    n_rules: int = 16
    n_protos: int = 64
    tau: float = 1.0
    hidden: int = 64
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_rules < 1 or self.n_protos < 1:
            raise ValueError("need at least one rule and one prototype")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.variant == "single_affine" and self.n_rules != 1:
            raise ValueError("single_affine requires n_rules=1")

    def digest(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in asdict(self).items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = type(f.default)(d[f.name])
        return cls(**kw)


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    role: str = "source"

    def copy(self, role: str | None = None) -> "EncoderParams":
        return EncoderParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), role or self.role)


class Rule(NamedTuple):
    w: np.ndarray
    b: np.ndarray


@dataclass
class RuleBank:
    w: np.ndarray      # (L, d)
    b: np.ndarray      # (L, d)
    W_sel: np.ndarray  # (d, d)
    U: np.ndarray      # (L, d)
    mlp: Optional[dict] = None  # V1 (L,d,d), c1 (L,d), V2 (L,d,d), c2 (L,d)

    @property
    def size(self) -> int:
        return self.w.shape[0]

    def rule(self, i: int) -> Rule:
        return Rule(self.w[i], self.b[i])


@dataclass
class PrototypeSet:
    centroids: np.ndarray
    tau: float
    mean: Optional[float] = None
    std: Optional[float] = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None and self.std is not None


@dataclass
class FusionHead:
    W1: np.ndarray  # (h, 2d+1)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: np.ndarray  # (1,)


@dataclass
class ForwardTrace:
    q_g: np.ndarray
    rule_probs: np.ndarray
    rule_outputs: np.ndarray
    q_hat: np.ndarray
    s_exec: float
    s_tilde: float
    p: float
    cache: dict = field(repr=False)
    model_token: tuple = field(repr=False, default=())


# --- single blocks ------------------------------------------------------------

def encoder_input(tab: EmbeddingTable, trip: np.ndarray, structured: bool = True) -> np.ndarray:
    """Per-row ``[(e_h*e_r); (e_t*e_r); e_r]``, or ``[e_h; e_t; e_r]`` if unstructured."""
    trip = np.asarray(trip, dtype=np.int64).reshape(-1, 3)
    eh, er, et = tab.lookup(trip[:, 0], trip[:, 1], trip[:, 2])
    if structured:
        return np.concatenate([eh * er, et * er, er], axis=1)
    return np.concatenate([eh, et, er], axis=1)


def encode_fwd(enc: EncoderParams, x: np.ndarray):
    if x.shape[1] != enc.W1.shape[1]:
        raise ValueError(f"encoder expects input width {enc.W1.shape[1]}, got {x.shape[1]}")
    a1 = x @ enc.W1.T + enc.b1
    g = gelu(a1)
    q = g @ enc.W2.T
    return q, {"x": x, "a1": a1, "g": g}


def encode_bwd(enc: EncoderParams, cache: dict, dq: np.ndarray, prefix: str, grads: dict) -> None:
    grads[prefix + "W2"] = dq.T @ cache["g"]
    da1 = (dq @ enc.W2) * gelu_grad(cache["a1"])
    grads[prefix + "W1"] = da1.T @ cache["x"]
    grads[prefix + "b1"] = da1.sum(0)


def rule_outputs_fwd(bank: RuleBank, q: np.ndarray, mlp: bool):
    if not mlp:
        return q[:, None, :] * bank.w[None] + bank.b[None], {}
    m = bank.mlp
    a = np.einsum("lij,bj->bli", m["V1"], q) + m["c1"][None]
    ga = gelu(a)
    out = np.einsum("lij,blj->bli", m["V2"], ga) + m["c2"][None]
    return out, {"a": a, "ga": ga}


def selector_fwd(bank: RuleBank, q: np.ndarray, mode: str):
    n, L = q.shape[0], bank.size
    if mode == "bypass":
        return np.ones((n, 1)), {}
    if mode == "uniform":
        return np.full((n, L), 1.0 / L), {}
    hz = np.tanh(q @ bank.W_sel.T)
    probs = softmax(hz @ bank.U.T, axis=1)
    return probs, {"hz": hz}


def ground_fwd(protos: PrototypeSet, q_hat: np.ndarray, kind: str = "kde"):
    """Log executability score per row, with the weights needed for backward."""
    c = protos.centroids
    d2 = (q_hat * q_hat).sum(1)[:, None] - 2.0 * q_hat @ c.T + (c * c).sum(1)[None, :]
    d2 = np.maximum(d2, 0.0)
    s = -d2 / protos.tau
    if kind == "kde":
        log_s = logsumexp(s, axis=1) - math.log(c.shape[0])
        wts = softmax(s, axis=1)
    else:
        j = np.argmin(d2, axis=1)
        log_s = s[np.arange(len(j)), j]
        wts = np.zeros_like(s)
        wts[np.arange(len(j)), j] = 1.0
    return log_s, wts


def standardize(protos: PrototypeSet, log_s):
    if not protos.fitted:
        raise ValueError("prototype score statistics are not fitted")
    return (log_s - protos.mean) / protos.std


# --- model --------------------------------------------------------------------

class ExeFuseModel:
    def __init__(self, config: ModelConfig, encoder: EncoderParams, domain_encoder: EncoderParams,
                 rules: RuleBank, head: FusionHead, protos: Optional[PrototypeSet] = None):
        self.config = config
        self.encoder = encoder
        self.domain_encoder = domain_encoder
        self.rules = rules
        self.head = head
        self.protos = protos
        self.version = 0

    # variant switches
    @property
    def uses_rules(self) -> bool:
        return self.config.variant != "direct_classification"

    @property
    def uses_exec_score(self) -> bool:
        return self.config.variant not in ("direct_classification", "no_exec_score")

    @property
    def selector_mode(self) -> str:
        v = self.config.variant
        if v == "single_affine":
            return "bypass"
        if v == "uniform_selector":
            return "uniform"
        return "softmax"

    @property
    def structured(self) -> bool:
        return self.config.variant != "no_structure_encoder"

    @property
    def mlp_rules(self) -> bool:
        return self.config.variant == "mlp_rules"

    @property
    def ground_kind(self) -> str:
        return "min" if self.config.variant == "min_distance" else "kde"

    @property
    def token(self) -> tuple:
        return (id(self), self.version)

    def trainable(self) -> dict[str, np.ndarray]:
        """Views of every parameter that receives gradients (updated in place)."""
        p = {"enc.W1": self.encoder.W1, "enc.b1": self.encoder.b1, "enc.W2": self.encoder.W2}
        if self.uses_rules:
            if self.mlp_rules:
                for k, v in self.rules.mlp.items():
                    p["rule." + k] = v
            else:
                p["rule.w"] = self.rules.w
                p["rule.b"] = self.rules.b
            if self.selector_mode == "softmax":
                p["rule.W_sel"] = self.rules.W_sel
                p["rule.U"] = self.rules.U
        p.update({"head.W1": self.head.W1, "head.b1": self.head.b1,
                  "head.w2": self.head.w2, "head.b2": self.head.b2})
        return p

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.trainable().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        cur = self.trainable()
        for k, v in snap.items():
            cur[k][...] = v
        self.version += 1

    def copy(self) -> "ExeFuseModel":
        rules = RuleBank(self.rules.w.copy(), self.rules.b.copy(), self.rules.W_sel.copy(), self.rules.U.copy(),
                         {k: v.copy() for k, v in self.rules.mlp.items()} if self.rules.mlp else None)
        head = FusionHead(self.head.W1.copy(), self.head.b1.copy(), self.head.w2.copy(), self.head.b2.copy())
        protos = None
        if self.protos is not None:
            protos = replace(self.protos, centroids=self.protos.centroids.copy())
        return ExeFuseModel(self.config, self.encoder.copy(), self.domain_encoder.copy(), rules, head, protos)

    # --- staged forward/backward ---------------------------------------------

    def encode_batch(self, tab: EmbeddingTable, trip, domain: bool = False):
        enc = self.domain_encoder if domain else self.encoder
        return encode_fwd(enc, encoder_input(tab, trip, self.structured))

    def execute_batch(self, q: np.ndarray):
        probs, scache = selector_fwd(self.rules, q, self.selector_mode)
        if not self.mlp_rules:
            # affine rules mix in closed form, no per-rule outputs needed
            pw = probs @ self.rules.w
            q_hat = q * pw + probs @ self.rules.b
            return q_hat, {"q": q, "probs": probs, "pw": pw, "sel": scache}
        outs, rcache = rule_outputs_fwd(self.rules, q, True)
        q_hat = np.einsum("bl,bld->bd", probs, outs)
        return q_hat, {"q": q, "probs": probs, "outs": outs, "sel": scache, "rule": rcache}

    def execute_bwd(self, cache: dict, dq_hat: np.ndarray, grads: dict) -> np.ndarray:
        """Backprop through execution; returns the gradient w.r.t. the input state."""
        q, probs = cache["q"], cache["probs"]
        if self.mlp_rules:
            outs = cache["outs"]
            d_out = probs[:, :, None] * dq_hat[:, None, :]
            m, rc = self.rules.mlp, cache["rule"]
            grads["rule.c2"] = d_out.sum(0)
            grads["rule.V2"] = np.einsum("bli,blj->lij", d_out, rc["ga"])
            da = np.einsum("lij,bli->blj", m["V2"], d_out) * gelu_grad(rc["a"])
            grads["rule.V1"] = np.einsum("bli,bj->lij", da, q)
            grads["rule.c1"] = da.sum(0)
            dq = np.einsum("lij,bli->bj", m["V1"], da)
        else:
            gq = dq_hat * q
            grads["rule.w"] = probs.T @ gq
            grads["rule.b"] = probs.T @ dq_hat
            dq = dq_hat * cache["pw"]
        if self.selector_mode == "softmax":
            hz = cache["sel"]["hz"]
            if self.mlp_rules:
                d_probs = np.einsum("bd,bld->bl", dq_hat, outs)
            else:
                d_probs = gq @ self.rules.w.T + dq_hat @ self.rules.b.T
            d_logits = probs * (d_probs - (probs * d_probs).sum(1, keepdims=True))
            grads["rule.U"] = d_logits.T @ hz
            dz = (d_logits @ self.rules.U) * (1.0 - hz * hz)
            grads["rule.W_sel"] = dz.T @ q
            dq = dq + dz @ self.rules.W_sel
        return dq

    def forward_batch(self, tab: EmbeddingTable, trip):
        """Fusion logits and probabilities for a batch of candidate triples."""
        q, ecache = self.encode_batch(tab, trip)
        n, d = q.shape
        cache = {"enc": ecache, "q": q}
        if self.uses_rules:
            q_hat, xcache = self.execute_batch(q)
            cache["exec"] = xcache
        else:
            q_hat = np.zeros_like(q)
        if self.uses_exec_score:
            if self.protos is None:
                raise ValueError("prototypes must be fitted before forward")
            log_s, wts = ground_fwd(self.protos, q_hat, self.ground_kind)
            s_tilde = standardize(self.protos, log_s)
            cache.update(log_s=log_s, wts=wts)
        else:
            log_s = np.zeros(n)
            s_tilde = np.zeros(n)
        u = np.concatenate([q, q_hat, s_tilde[:, None]], axis=1)
        h1 = u @ self.head.W1.T + self.head.b1
        gh = gelu(h1)
        logit = gh @ self.head.w2 + self.head.b2[0]
        cache.update(q_hat=q_hat, s_tilde=s_tilde, u=u, h1=h1, gh=gh, logit=logit, token=self.token)
        return sigmoid(logit), cache

    def backward_batch(self, cache: dict, d_logit: np.ndarray, dq_hat_ext: Optional[np.ndarray] = None) -> dict:
        if cache.get("token") != self.token:
            raise ValueError("forward cache does not belong to this model state")
        grads: dict[str, np.ndarray] = {}
        head = self.head
        grads["head.w2"] = cache["gh"].T @ d_logit
        grads["head.b2"] = np.array([d_logit.sum()])
        dh1 = (d_logit[:, None] * head.w2[None, :]) * gelu_grad(cache["h1"])
        grads["head.W1"] = dh1.T @ cache["u"]
        grads["head.b1"] = dh1.sum(0)
        du = dh1 @ head.W1
        d = cache["q"].shape[1]
        dq = du[:, :d].copy()
        if self.uses_rules:
            dq_hat = du[:, d:2 * d].copy()
            if dq_hat_ext is not None:
                dq_hat += dq_hat_ext
            if self.uses_exec_score:
                d_log_s = du[:, 2 * d] / self.protos.std
                pulled = cache["wts"] @ self.protos.centroids
                dq_hat += (d_log_s * (-2.0 / self.protos.tau))[:, None] * (cache["q_hat"] - pulled)
            dq += self.execute_bwd(cache["exec"], dq_hat, grads)
        encode_bwd(self.encoder, cache["enc"], dq, "enc.", grads)
        return grads

    def states_batch(self, tab: EmbeddingTable, trip):
        """Encode and execute only; used by the rule-consistency loss."""
        q, ecache = self.encode_batch(tab, trip)
        q_hat, xcache = self.execute_batch(q)
        return q_hat, {"enc": ecache, "exec": xcache, "token": self.token}

    def states_bwd(self, cache: dict, dq_hat: np.ndarray) -> dict:
        if cache.get("token") != self.token:
            raise ValueError("forward cache does not belong to this model state")
        grads: dict[str, np.ndarray] = {}
        dq = self.execute_bwd(cache["exec"], dq_hat, grads)
        encode_bwd(self.encoder, cache["enc"], dq, "enc.", grads)
        return grads

    def predict(self, tab: EmbeddingTable, trip, chunk: int = 512) -> np.ndarray:
        # small chunks keep temporaries on the heap; large ones go through mmap and page-fault on every call
        trip = np.asarray(trip, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(trip))
        for s in range(0, len(trip), chunk):
            out[s:s + chunk] = self.forward_batch(tab, trip[s:s + chunk])[0]
        return out


def init_model(cfg: ModelConfig, seed: int) -> ExeFuseModel:
    """Xavier-uniform matrices, zero biases, rules started near the identity."""
    rng = make_rng(seed, stream=21)
    d, L, h = cfg.d, cfg.n_rules, cfg.hidden
    enc = EncoderParams(xavier_uniform(rng, d, 3 * cfg.d_emb), np.zeros(d), xavier_uniform(rng, d, d))
    w = 1.0 + rng.uniform(-0.1, 0.1, size=(L, d))
    b = rng.uniform(-0.1, 0.1, size=(L, d))
    W_sel = xavier_uniform(rng, d, d)
    U = xavier_uniform(rng, L, d)
    mlp = None
    if cfg.variant == "mlp_rules":
        mlp = {
            "V1": np.stack([xavier_uniform(rng, d, d) for _ in range(L)]),
            "c1": np.zeros((L, d)),
            "V2": np.stack([xavier_uniform(rng, d, d) for _ in range(L)]),
            "c2": rng.uniform(-0.1, 0.1, size=(L, d)),
        }
    head = FusionHead(xavier_uniform(rng, h, 2 * d + 1), np.zeros(h), xavier_uniform(rng, 1, h)[0], np.zeros(1))
    return ExeFuseModel(cfg, enc, enc.copy(role="domain"), RuleBank(w, b, W_sel, U, mlp), head)


# --- single-example API -------------------------------------------------------

def encode(params: EncoderParams, tab: EmbeddingTable, f, structured: bool = True) -> np.ndarray:
    return encode_fwd(params, encoder_input(tab, [tuple(f)], structured))[0][0]


def apply_rule(rule: Rule, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if rule.w.shape != q.shape:
        raise ValueError("rule and state dimensions differ")
    return rule.w * q + rule.b


def select_rules(bank: RuleBank, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)[None, :]
    return selector_fwd(bank, q, "softmax")[0][0]


def execute(bank: RuleBank, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    probs = select_rules(bank, q)
    outs = bank.w * q[None, :] + bank.b
    return probs @ outs


def executability_score(protos: PrototypeSet, q_hat) -> float:
    log_s, _ = ground_fwd(protos, np.asarray(q_hat, dtype=np.float64)[None, :], "kde")
    return float(np.exp(log_s[0]))


def log_executability_score(protos: PrototypeSet, q_hat) -> float:
    return float(ground_fwd(protos, np.asarray(q_hat, dtype=np.float64)[None, :], "kde")[0][0])


def normalize_exec_score(protos: PrototypeSet, s_exec: float) -> float:
    if not 0.0 < s_exec <= 1.0:
        raise ValueError(f"executability score {s_exec} outside (0, 1]")
    return float(standardize(protos, math.log(s_exec)))


def fusion_probability(head: FusionHead, q_g, q_hat, s_tilde: float) -> float:
    u = np.concatenate([np.asarray(q_g, float), np.asarray(q_hat, float), [float(s_tilde)]])
    logit = gelu(head.W1 @ u + head.b1) @ head.w2 + head.b2[0]
    return float(sigmoid(np.array([logit]))[0])


def forward(model: ExeFuseModel, tab: EmbeddingTable, candidate) -> ForwardTrace:
    trip = np.asarray([tuple(getattr(candidate, "triple", candidate))], dtype=np.int64)
    p, cache = model.forward_batch(tab, trip)
    if "exec" in cache:
        probs = cache["exec"]["probs"][0]
        outs = rule_outputs_fwd(model.rules, cache["q"][:1], model.mlp_rules)[0][0]
    else:
        probs, outs = np.ones(1), np.zeros((1, model.config.d))
    log_s = cache.get("log_s", np.zeros(1))[0]
    return ForwardTrace(
        q_g=cache["q"][0], rule_probs=probs, rule_outputs=outs, q_hat=cache["q_hat"][0],
        s_exec=float(np.exp(log_s)), s_tilde=float(cache["s_tilde"][0]), p=float(p[0]),
        cache=cache, model_token=model.token,
    )


def backward(model: ExeFuseModel, tab: EmbeddingTable, trace: ForwardTrace, dl_dp: float,
             dl_dq_hat_ext=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``dL/dp`` and an optional direct ``dL/dq_hat``."""
    if trace.model_token != model.token:
        raise ValueError("trace was produced by a different model state")
    p = trace.p
    d_logit = np.array([dl_dp * p * (1.0 - p)])
    ext = None if dl_dq_hat_ext is None else np.asarray(dl_dq_hat_ext, dtype=np.float64)[None, :]
    return model.backward_batch(trace.cache, d_logit, ext)


# --- persistence --------------------------------------------------------------

def save_model(model: ExeFuseModel, path, extra_meta=None) -> None:
    meta = {f"model.{k}": v for k, v in asdict(model.config).items()}
    meta["config_hash"] = model.config.digest()
    blocks = {"enc.W1": model.encoder.W1, "enc.b1": model.encoder.b1, "enc.W2": model.encoder.W2,
              "dkg.W1": model.domain_encoder.W1, "dkg.b1": model.domain_encoder.b1,
              "dkg.W2": model.domain_encoder.W2,
              "rule.w": model.rules.w, "rule.b": model.rules.b,
              "rule.W_sel": model.rules.W_sel, "rule.U": model.rules.U,
              "head.W1": model.head.W1, "head.b1": model.head.b1,
              "head.w2": model.head.w2, "head.b2": model.head.b2}
    if model.rules.mlp:
        blocks.update({"rule." + k: v for k, v in model.rules.mlp.items()})
    if model.protos is not None:
        blocks["proto.centroids"] = model.protos.centroids
        meta["proto.tau"] = repr(model.protos.tau)
        meta["proto.mean"] = repr(model.protos.mean)
        meta["proto.std"] = repr(model.protos.std)
    meta.update(extra_meta or {})
    save_checkpoint(path, "model", meta, blocks)


def load_model(path) -> ExeFuseModel:
    meta, b = load_checkpoint(path, kind="model")
    cfg = ModelConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("model.")})
    if meta.get("config_hash") != cfg.digest():
        raise ValueError(f"{path}: config hash mismatch")
    c = lambda k: b[k].copy()
    mlp = None
    if "rule.V1" in b:
        mlp = {k: c("rule." + k) for k in ("V1", "c1", "V2", "c2")}
    protos = None
    if "proto.centroids" in b:
        mean = None if meta["proto.mean"] == "None" else float(meta["proto.mean"])
        std = None if meta["proto.std"] == "None" else float(meta["proto.std"])
        protos = PrototypeSet(c("proto.centroids"), float(meta["proto.tau"]), mean, std)
    return ExeFuseModel(
        cfg,
        EncoderParams(c("enc.W1"), c("enc.b1"), c("enc.W2")),
        EncoderParams(c("dkg.W1"), c("dkg.b1"), c("dkg.W2"), "domain"),
        RuleBank(c("rule.w"), c("rule.b"), c("rule.W_sel"), c("rule.U"), mlp),
        FusionHead(c("head.W1"), c("head.b1"), c("head.w2"), c("head.b2")),
        protos,
    )
