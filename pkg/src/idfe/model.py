"""The IDFE network: frame encoder + MHFA pooling, spoofing head, and a
domain head behind a gradient reversal layer.

Parameters live in a :class:`ModelParams` (flat name -> array maps). The
forward functions take a dict of bound :class:`~idfe.autodiff.Tensor`
objects, produced by :meth:`ModelParams.bind`, so the same code runs with
or without a tape.

Shapes: a layer stack is ``[L, T, D]`` (layers, frames, frame dim); a
batch of stacks is ``[B, L, T, D]``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, EmptyUtteranceError

BONAFIDE, SPOOF = 0, 1

FEATURE_PREFIXES = ("encoder.", "mhfa.")
SPOOF_PREFIX = "spoof."
DOMAIN_PREFIX = "domain."


@dataclass(frozen=True)
class MhfaConfig:
    num_layers: int
    frame_dim: int
    num_heads: int = 4
    value_dim: int = 16
    embedding_dim: int = 64

    def __post_init__(self):
        for name in ("num_layers", "frame_dim", "num_heads", "value_dim", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"MhfaConfig.{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 128
    dropout: float = 0.2
    num_outputs: int = 2

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_outputs < 2:
            raise ConfigError(f"a classifier head needs at least 2 outputs, got {self.num_outputs}")


@dataclass(frozen=True)
class ModelConfig:
    mhfa: MhfaConfig
    spoof_head: HeadConfig = field(default_factory=HeadConfig)
    domain_head: HeadConfig = field(default_factory=HeadConfig)
    use_encoder: bool = True

    def __post_init__(self):
        if self.spoof_head.num_outputs != 2:
            raise ConfigError("the spoofing head has exactly 2 outputs (bona fide, spoof)")
        if self.domain_head.num_outputs < 2:
            raise ConfigError(
                f"domain head needs D >= 2 domains, got {self.domain_head.num_outputs}")


class ModelParams:
    """Named trainable tensors plus non-trainable batch-norm buffers."""

    def __init__(self, tensors, buffers=None):
        self.tensors = dict(tensors)
        self.buffers = dict(buffers or {})
        overlap = set(self.tensors) & set(self.buffers)
        if overlap:
            raise ConfigError(f"names used for both parameters and buffers: {sorted(overlap)}")

    def __getitem__(self, name):
        if name in self.tensors:
            return self.tensors[name]
        return self.buffers[name]

    def names(self):
        return sorted(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype):
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()},
                           {k: v.astype(dtype) for k, v in self.buffers.items()})

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def bind(self, tape=None):
        """Wrap every parameter as a tensor; leaves on ``tape`` if given."""
        if tape is None:
            return {k: ad.constant(v) for k, v in self.tensors.items()}
        return {k: tape.param(k, v) for k, v in sorted(self.tensors.items())}

    def group(self, name):
        """Parameter names of one group: ``feature``, ``spoof`` or ``domain``."""
        prefixes = {"feature": FEATURE_PREFIXES, "spoof": (SPOOF_PREFIX,),
                    "domain": (DOMAIN_PREFIX,)}[name]
        return [k for k in self.names() if k.startswith(prefixes)]


def _head_params(rng, prefix, in_dim, cfg, dtype):
    h = cfg.hidden_dim
    tensors = {
        f"{prefix}fc1.weight": rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, h)),
        f"{prefix}fc1.bias": np.zeros(h),
        f"{prefix}bn.weight": np.ones(h),
        f"{prefix}bn.bias": np.zeros(h),
        f"{prefix}fc2.weight": rng.normal(0.0, np.sqrt(1.0 / h), (h, cfg.num_outputs)),
        f"{prefix}fc2.bias": np.zeros(cfg.num_outputs),
    }
    buffers = {f"{prefix}bn.running_mean": np.zeros(h), f"{prefix}bn.running_var": np.ones(h)}
    return ({k: v.astype(dtype) for k, v in tensors.items()},
            {k: v.astype(dtype) for k, v in buffers.items()})


def init_params(config: ModelConfig, seed, dtype=np.float32):
    """Random initial parameters. Layer weights start uniform (all zeros)."""
    rng = np.random.default_rng(seed)
    m = config.mhfa
    d, hv = m.frame_dim, m.num_heads * m.value_dim
    tensors = {}
    if config.use_encoder:
        tensors["encoder.weight"] = rng.normal(0.0, np.sqrt(2.0 / d), (d, d))
        tensors["encoder.bias"] = np.zeros(d)
    tensors.update({
        "mhfa.layer_key": np.zeros(m.num_layers),
        "mhfa.layer_value": np.zeros(m.num_layers),
        "mhfa.key_proj": rng.normal(0.0, np.sqrt(1.0 / d), (d, m.num_heads)),
        "mhfa.value_proj": rng.normal(0.0, np.sqrt(1.0 / d), (d, m.value_dim)),
        "mhfa.out_proj.weight": rng.normal(0.0, np.sqrt(1.0 / hv), (hv, m.embedding_dim)),
        "mhfa.out_proj.bias": np.zeros(m.embedding_dim),
    })
    tensors = {k: np.asarray(v, dtype=dtype) for k, v in tensors.items()}
    buffers = {}
    for prefix, cfg in ((SPOOF_PREFIX, config.spoof_head), (DOMAIN_PREFIX, config.domain_head)):
        t, b = _head_params(rng, prefix, m.embedding_dim, cfg, dtype)
        tensors.update(t)
        buffers.update(b)
    return ModelParams(tensors, buffers)


def config_from_params(params: ModelParams, spoof_dropout=0.2, domain_dropout=0.2):
    """Recover the architecture from parameter shapes (e.g. after loading)."""
    try:
        num_layers = params["mhfa.layer_key"].shape[0]
        frame_dim, num_heads = params["mhfa.key_proj"].shape
        value_dim = params["mhfa.value_proj"].shape[1]
        embedding_dim = params["mhfa.out_proj.weight"].shape[1]
        spoof_hidden = params["spoof.fc1.weight"].shape[1]
        domain_hidden, num_domains = params["domain.fc2.weight"].shape
    except KeyError as exc:
        raise ConfigError(f"parameter set is missing {exc.args[0]!r}") from None
    return ModelConfig(
        mhfa=MhfaConfig(num_layers, frame_dim, num_heads, value_dim, embedding_dim),
        spoof_head=HeadConfig(spoof_hidden, spoof_dropout, 2),
        domain_head=HeadConfig(domain_hidden, domain_dropout, num_domains),
        use_encoder="encoder.weight" in params.tensors,
    )


def _as_batch(stack):
    x = stack if isinstance(stack, ad.Tensor) else ad.constant(stack)
    if x.data.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4:
        raise DimensionError(f"expected a [L, T, D] stack or [B, L, T, D] batch, got {x.shape}")
    return x, False


def frame_encode(stack, p):
    """Per-frame ``relu(x @ W + b)``, shape-preserving; identity without encoder params."""
    if "encoder.weight" not in p:
        return stack
    x = stack if isinstance(stack, ad.Tensor) else ad.constant(stack)
    w = p["encoder.weight"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"frame_encode: frame dim {x.shape[-1]} but encoder expects {w.shape[0]}")
    return ad.relu(ad.add(ad.matmul(x, w), p["encoder.bias"]))


def layer_weights(p):
    """Softmax-normalized layer weights for the key and value paths."""
    return ad.softmax(p["mhfa.layer_key"], axis=0), ad.softmax(p["mhfa.layer_value"], axis=0)


def attention_weights(stack, p):
    """Per-head attention over frames, ``[B, T, H]`` (columns sum to 1)."""
    x, _ = _as_batch(stack)
    keys, _ = _layer_mix(x, p)
    return ad.softmax(ad.matmul(keys, p["mhfa.key_proj"]), axis=1)


def _layer_mix(x, p):
    b, n_layers, t, d = x.shape
    if p["mhfa.layer_key"].shape != (n_layers,):
        raise DimensionError(
            f"mhfa_pool: stack has {n_layers} layers but params expect {p['mhfa.layer_key'].shape[0]}")
    if p["mhfa.key_proj"].shape[0] != d:
        raise DimensionError(
            f"mhfa_pool: frame dim {d} but params expect {p['mhfa.key_proj'].shape[0]}")
    wk, wv = layer_weights(p)
    keys = ad.sum_(ad.mul(x, ad.reshape(wk, (1, n_layers, 1, 1))), axis=1)
    values = ad.sum_(ad.mul(x, ad.reshape(wv, (1, n_layers, 1, 1))), axis=1)
    return keys, values


def mhfa_pool(stack, p):
    """Multi-head factorized attentive pooling of a layer stack.

    Keys and values are separate softmax-weighted sums over layers. Each
    head scores frames with one column of the key projection; the head's
    context is the attention-weighted mean of the value-projected frames.
    The concatenated contexts go through an affine output projection.

    Returns ``[E]`` for a single stack or ``[B, E]`` for a batch.
    """
    x, single = _as_batch(stack)
    b, _, t, _ = x.shape
    if t == 0:
        raise EmptyUtteranceError("mhfa_pool: utterance has no frames")
    keys, values = _layer_mix(x, p)
    attn = ad.softmax(ad.matmul(keys, p["mhfa.key_proj"]), axis=1)      # [B, T, H]
    projected = ad.matmul(values, p["mhfa.value_proj"])                  # [B, T, dv]
    contexts = ad.matmul(ad.transpose(attn, (0, 2, 1)), projected)       # [B, H, dv]
    h, dv = contexts.shape[1:]
    flat = ad.reshape(contexts, (b, h * dv))
    emb = ad.add(ad.matmul(flat, p["mhfa.out_proj.weight"]), p["mhfa.out_proj.bias"])
    return ad.reshape(emb, (emb.shape[1],)) if single else emb


def _head(emb, p, buffers, prefix, cfg, training, rng):
    x = emb if emb.data.ndim == 2 else ad.reshape(emb, (1, emb.shape[0]))
    h = ad.add(ad.matmul(x, p[f"{prefix}fc1.weight"]), p[f"{prefix}fc1.bias"])
    h = ad.batch_norm(h, p[f"{prefix}bn.weight"], p[f"{prefix}bn.bias"],
                      buffers[f"{prefix}bn.running_mean"], buffers[f"{prefix}bn.running_var"],
                      training)
    h = ad.dropout(ad.relu(h), cfg.dropout, rng, training)
    out = ad.add(ad.matmul(h, p[f"{prefix}fc2.weight"]), p[f"{prefix}fc2.bias"])
    return out if emb.data.ndim == 2 else ad.reshape(out, (out.shape[1],))


def spoof_head(emb, p, buffers, cfg: HeadConfig, training=False, rng=None):
    """Linear -> batch norm -> ReLU -> dropout -> Linear, 2 logits (bona fide, spoof)."""
    return _head(emb, p, buffers, SPOOF_PREFIX, cfg, training, rng)


def domain_head(emb, lam, p, buffers, cfg: HeadConfig, training=False, rng=None,
                reverse_gradient=True):
    """Dataset-ID logits behind a gradient reversal layer of strength ``lam``.

    ``reverse_gradient=False`` drops the reversal node (plain backward);
    it exists to measure the un-reversed domain gradient.
    """
    if cfg.num_outputs < 2:
        raise ConfigError(f"domain head needs D >= 2 domains, got {cfg.num_outputs}")
    x = ad.grl(emb, lam) if reverse_gradient else emb
    return _head(x, p, buffers, DOMAIN_PREFIX, cfg, training, rng)


def detection_score(logits):
    """Bona fide logit minus spoof logit; higher means more bona fide."""
    z = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    return z[..., BONAFIDE] - z[..., SPOOF]


@dataclass
class Outputs:
    embedding: ad.Tensor
    spoof_logits: ad.Tensor
    domain_logits: ad.Tensor


class IdfeModel:
    """Ties a :class:`ModelConfig` to its :class:`ModelParams`."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config, seed, dtype=np.float32):
        return cls(config, init_params(config, seed, dtype))

    @classmethod
    def from_params(cls, params, spoof_dropout=0.2, domain_dropout=0.2):
        return cls(config_from_params(params, spoof_dropout, domain_dropout), params)

    @property
    def num_domains(self):
        return self.config.domain_head.num_outputs

    def forward(self, stacks, lam=0.0, training=False, rng=None, tape=None,
                reverse_gradient=True, detach_domain=False):
        """Run the whole network on a ``[B, L, T, D]`` batch.

        ``detach_domain`` feeds the domain head a copy of the embedding that
        is cut from the graph, so the domain loss trains only the domain head.
        """
        p = self.params.bind(tape)
        x = stacks if isinstance(stacks, ad.Tensor) else ad.constant(stacks)
        emb = mhfa_pool(frame_encode(x, p), p)
        cfg = self.config
        s_logits = spoof_head(emb, p, self.params.buffers, cfg.spoof_head, training, rng)
        d_in = ad.constant(emb.data) if detach_domain else emb
        d_logits = domain_head(d_in, lam, p, self.params.buffers, cfg.domain_head, training, rng,
                               reverse_gradient=reverse_gradient and not detach_domain)
        return Outputs(emb, s_logits, d_logits)

    def embed(self, stack):
        """Embedding of one ``[L, T, D]`` stack (no tape, eval mode)."""
        p = self.params.bind()
        return mhfa_pool(frame_encode(_as_batch(stack)[0], p), p).data[0]

    def score(self, stack):
        """Detection score of one full utterance in eval mode."""
        p = self.params.bind()
        emb = mhfa_pool(frame_encode(_as_batch(stack)[0], p), p)
        logits = spoof_head(emb, p, self.params.buffers, self.config.spoof_head)
        return float(detection_score(logits)[0])
