"""Learnable components: the feed-forward control policy and the
encoder-only transformer dynamics model, plus initialization and a
language-neutral checkpoint format (binary float64 payload + JSON header).

Both networks run in two modes through the same code path: plain numpy
arrays for inference, or engine Tensors on a tape when gradients are needed.
Parameters are bound onto a tape once per rollout and reused across steps,
so backward accumulates over the unrolled horizon.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de

_MAGIC = b"TDPCCKPT"


@dataclass
class FeatureScaler:
    """Fixed affine input standardization: (z - center) / half.

    Not learned; serialized with the parameters so checkpoints are
    self-contained. None means identity.
    """

    center: np.ndarray
    half: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half = np.asarray(self.half, dtype=np.float64)
        if np.any(self.half <= 0):
            raise ValueError("scaler half-widths must be positive")


@dataclass
class PolicyParams:
    """L-layer feed-forward policy: hidden ReLU layers, linear output."""

    layers: list  # [(W (n_in, n_out), b (n_out,)), ...]
    scaler: FeatureScaler | None = None

    @property
    def input_dim(self):
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[1]


@dataclass
class TransformerBlock:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class DynamicsParams:
    """Encoder-only transformer over one token per input feature.

    Input features: n_x zone temperatures, n_d auxiliary measurements,
    n_u setpoints (that order). Output: n_x next temperatures followed by
    the n_d next auxiliary signals.
    """

    emb_w: np.ndarray  # (n_feat, d_model) per-feature embedding directions
    pos: np.ndarray    # (n_feat, d_model) positional table
    blocks: list = field(default_factory=list)
    head_w: np.ndarray = None
    head_b: np.ndarray = None
    n_heads: int = 2
    n_x: int = 8
    n_u: int = 4
    n_d: int = 3
    scaler: FeatureScaler | None = None

    @property
    def n_feat(self):
        return self.n_x + self.n_d + self.n_u

    @property
    def d_model(self):
        return self.emb_w.shape[1]

    @property
    def out_dim(self):
        return self.n_x + self.n_d


@dataclass
class PolicyInput:
    """What the policy sees at one decision point.

    state: the full measured/predicted output vector (temperatures plus
    auxiliaries); prices: the N-step future tariff window; tightening:
    the N-step future tube widths, present only for the guaranteed variant.
    """

    state: object
    prices: object
    tightening: object = None


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_policy(seed, input_dim, hidden, output_dim, scaler=None, out_bias=None):
    """Fresh policy weights: N(0, 1/sqrt(fan_in)) matrices, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [int(input_dim)] + [int(h) for h in hidden] + [int(output_dim)]
    if min(dims) <= 0:
        raise ValueError("all layer dimensions must be positive")
    layers = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        layers.append((w, np.zeros(n_out)))
    if out_bias is not None:
        layers[-1] = (layers[-1][0], np.asarray(out_bias, dtype=np.float64).copy())
    return PolicyParams(layers=layers, scaler=scaler)


def init_dynamics(seed, n_x, n_u, n_d=3, d_model=32, n_blocks=2, n_heads=2,
                  d_ff=64, scaler=None, out_bias=None):
    """Fresh transformer weights; head bias may be preset to output means."""
    if d_model % n_heads != 0:
        raise ValueError("d_model must be divisible by n_heads")
    if min(n_x, n_u, n_d, d_model, n_blocks, n_heads, d_ff) <= 0:
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    n_feat = n_x + n_d + n_u

    def mat(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    emb_w = rng.normal(0.0, 1.0, size=(n_feat, d_model))  # fan-in 1 per scalar feature
    pos = rng.normal(0.0, 0.02, size=(n_feat, d_model))
    blocks = []
    for _ in range(n_blocks):
        blocks.append(TransformerBlock(
            wq=mat(d_model, d_model), bq=np.zeros(d_model),
            wk=mat(d_model, d_model), bk=np.zeros(d_model),
            wv=mat(d_model, d_model), bv=np.zeros(d_model),
            wo=mat(d_model, d_model), bo=np.zeros(d_model),
            ln1_g=np.ones(d_model), ln1_b=np.zeros(d_model),
            w1=mat(d_model, d_ff), b1=np.zeros(d_ff),
            w2=mat(d_ff, d_model), b2=np.zeros(d_model),
            ln2_g=np.ones(d_model), ln2_b=np.zeros(d_model),
        ))
    head_w = mat(d_model, n_x + n_d)
    head_b = np.zeros(n_x + n_d) if out_bias is None else np.asarray(out_bias, dtype=np.float64).copy()
    return DynamicsParams(emb_w=emb_w, pos=pos, blocks=blocks, head_w=head_w,
                          head_b=head_b, n_heads=n_heads, n_x=n_x, n_u=n_u,
                          n_d=n_d, scaler=scaler)


# ---------------------------------------------------------------------------
# named-array views (shared by the optimizer, gradient flattening, checkpoints)
# ---------------------------------------------------------------------------

def policy_arrays(params):
    named = {}
    for i, (w, b) in enumerate(params.layers):
        named[f"layers.{i}.w"] = w
        named[f"layers.{i}.b"] = b
    return named


def dynamics_arrays(params):
    named = {"emb_w": params.emb_w, "pos": params.pos}
    for i, blk in enumerate(params.blocks):
        for f_ in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                   "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"):
            named[f"blocks.{i}.{f_}"] = getattr(blk, f_)
    named["head_w"] = params.head_w
    named["head_b"] = params.head_b
    return named


def bind(named, tape):
    """Enter every named array as a leaf on `tape`; {name: Tensor}."""
    return {k: tape.leaf(v) for k, v in named.items()}


def flatten_named(named):
    """Deterministic flat vector over the named arrays, insertion order."""
    return np.concatenate([np.asarray(v).ravel() for v in named.values()])


def unflatten_like(vec, named):
    out = {}
    i = 0
    for k, v in named.items():
        n = np.asarray(v).size
        out[k] = np.asarray(vec[i:i + n]).reshape(np.shape(v))
        i += n
    return out


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _scaled(z, scaler):
    if scaler is None:
        return z
    return de.mul(de.sub(z, scaler.center), 1.0 / scaler.half)


def _policy_apply(z, params, binding):
    """Policy on an already-assembled (B, n_in) input."""
    h = _scaled(z, params.scaler)
    n = len(params.layers)
    for i in range(n):
        w = binding[f"layers.{i}.w"] if binding else params.layers[i][0]
        b = binding[f"layers.{i}.b"] if binding else params.layers[i][1]
        h = de.add(de.matmul(h, w), b)
        if i < n - 1:
            h = de.relu(h)
    return h


def policy_forward(inp, params, tape=None, binding=None):
    """Action for a PolicyInput; numpy in, numpy out (Tensors pass through).

    The concatenated input length must equal the first layer's fan-in.
    """
    parts = [inp.state, inp.prices]
    if inp.tightening is not None:
        parts.append(inp.tightening)
    tensors = any(isinstance(p, de.Tensor) for p in parts)
    one_d = not tensors and np.ndim(parts[0]) == 1
    if one_d:
        parts = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in parts]
    if binding is None and tape is not None:
        binding = bind(policy_arrays(params), tape)
    if tape is not None and not tensors:
        parts = [tape.constant(p) for p in parts]
    z = de.concat([p if isinstance(p, de.Tensor) else de.Tensor(np.asarray(p, dtype=np.float64)) for p in parts])
    width = z.shape[-1]
    if width != params.input_dim:
        raise ValueError(f"policy input width {width} != expected {params.input_dim}")
    out = _policy_apply(z, params, binding)
    if tensors or tape is not None:
        return out
    return out.value[0] if one_d else out.value


def _attention(tok, n_heads, b):
    d_model = tok.shape[-1]
    dh = d_model // n_heads
    q = de.add(de.matmul(tok, b["wq"]), b["bq"])
    k = de.add(de.matmul(tok, b["wk"]), b["bk"])
    v = de.add(de.matmul(tok, b["wv"]), b["bv"])
    heads = []
    for h in range(n_heads):
        qh = q.slice(h * dh, (h + 1) * dh)
        kh = k.slice(h * dh, (h + 1) * dh)
        vh = v.slice(h * dh, (h + 1) * dh)
        att = de.softmax_rows(de.scale(de.matmul(qh, kh.transpose()), 1.0 / np.sqrt(dh)))
        heads.append(de.matmul(att, vh))
    merged = heads[0] if n_heads == 1 else de.concat(heads)
    return de.add(de.matmul(merged, b["wo"]), b["bo"])


def _dynamics_apply(x, u, d, params, binding):
    """Transformer on (B, n_x), (B, n_u), (B, n_d) inputs; (B, out_dim) out."""
    feats = _scaled(de.concat([x, d, u]), params.scaler)
    batch = feats.shape[0]

    def p(name):
        return binding[name] if binding else _DYN_GET(params, name)

    tokens = de.add(de.mul(de.reshape(feats, (batch, params.n_feat, 1)), p("emb_w")), p("pos"))
    for i in range(len(params.blocks)):
        blk = {f_: p(f"blocks.{i}.{f_}") for f_ in
               ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")}
        a = _attention(tokens, params.n_heads, blk)
        tokens = de.add(de.mul(de.layernorm_rows(de.add(tokens, a)), blk["ln1_g"]), blk["ln1_b"])
        ff = de.add(de.matmul(de.relu(de.add(de.matmul(tokens, blk["w1"]), blk["b1"])), blk["w2"]), blk["b2"])
        tokens = de.add(de.mul(de.layernorm_rows(de.add(tokens, ff)), blk["ln2_g"]), blk["ln2_b"])
    pooled = de.reduce_mean(tokens, axis=-2)
    return de.add(de.matmul(pooled, p("head_w")), p("head_b"))


def _DYN_GET(params, name):
    if name.startswith("blocks."):
        _, i, f_ = name.split(".")
        return getattr(params.blocks[int(i)], f_)
    return getattr(params, name)


def dynamics_forward(state, action, aux, params, tape=None, binding=None):
    """Next-step output prediction; numpy in, numpy out (Tensors pass through)."""
    parts = [state, action, aux]
    tensors = any(isinstance(p, de.Tensor) for p in parts)
    one_d = not tensors and np.ndim(state) == 1
    if one_d:
        parts = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in parts]
    if binding is None and tape is not None:
        binding = bind(dynamics_arrays(params), tape)
    if tape is not None and not tensors:
        parts = [tape.constant(p) for p in parts]
    x, u, d = [p if isinstance(p, de.Tensor) else de.Tensor(np.asarray(p, dtype=np.float64)) for p in parts]
    if x.shape[-1] != params.n_x or u.shape[-1] != params.n_u or d.shape[-1] != params.n_d:
        raise ValueError(
            f"dynamics input widths ({x.shape[-1]},{u.shape[-1]},{d.shape[-1]}) != "
            f"expected ({params.n_x},{params.n_u},{params.n_d})")
    out = _dynamics_apply(x, u, d, params, binding)
    if tensors or tape is not None:
        return out
    return out.value[0] if one_d else out.value


# ---------------------------------------------------------------------------
# checkpoint container: magic | u64 header length | JSON header | f64 payload
# ---------------------------------------------------------------------------

def save_arrays(path, named, meta=None):
    entries = []
    offset = 0
    blobs = []
    for name, arr in named.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        raw = arr.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    named = {}
    for ent in header["arrays"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        named[ent["name"]] = np.frombuffer(
            payload[start:start + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
    return named, header["meta"]


def _scaler_entries(prefix, scaler, named):
    if scaler is not None:
        named[f"{prefix}scaler.center"] = scaler.center
        named[f"{prefix}scaler.half"] = scaler.half


def save_checkpoint(path, policy, dynamics, meta=None):
    named = {}
    for k, v in policy_arrays(policy).items():
        named[f"policy.{k}"] = v
    _scaler_entries("policy.", policy.scaler, named)
    for k, v in dynamics_arrays(dynamics).items():
        named[f"dynamics.{k}"] = v
    _scaler_entries("dynamics.", dynamics.scaler, named)
    meta = dict(meta or {})
    meta["dynamics_dims"] = {"n_heads": dynamics.n_heads, "n_x": dynamics.n_x,
                             "n_u": dynamics.n_u, "n_d": dynamics.n_d,
                             "n_blocks": len(dynamics.blocks)}
    save_arrays(path, named, meta)


def load_checkpoint(path):
    named, meta = load_arrays(path)

    def scaler_of(prefix):
        c = named.get(f"{prefix}scaler.center")
        return None if c is None else FeatureScaler(c, named[f"{prefix}scaler.half"])

    layers = []
    i = 0
    while f"policy.layers.{i}.w" in named:
        layers.append((named[f"policy.layers.{i}.w"], named[f"policy.layers.{i}.b"]))
        i += 1
    policy = PolicyParams(layers=layers, scaler=scaler_of("policy."))

    dims = meta["dynamics_dims"]
    blocks = []
    for b in range(dims["n_blocks"]):
        blocks.append(TransformerBlock(**{
            f_: named[f"dynamics.blocks.{b}.{f_}"] for f_ in
            ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
             "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")}))
    dynamics = DynamicsParams(
        emb_w=named["dynamics.emb_w"], pos=named["dynamics.pos"], blocks=blocks,
        head_w=named["dynamics.head_w"], head_b=named["dynamics.head_b"],
        n_heads=dims["n_heads"], n_x=dims["n_x"], n_u=dims["n_u"], n_d=dims["n_d"],
        scaler=scaler_of("dynamics."))
    return policy, dynamics, meta
