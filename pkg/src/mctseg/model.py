"""The full segmentation graph: encoders, distillation, fusion, decoders.

One multimodal teacher encoder and four unimodal student encoders share a
five-layer conv/instance-norm/LeakyReLU architecture. Student bottlenecks
pass through per-modality enhancement blocks, are delta-masked, fused
across modalities (joint attention + convolutional reduction), and decoded
by a segmentation decoder with deep-supervision heads. Teacher and
per-modality decoders exist only for training-time losses; inference runs
the fusion path alone.
"""

import hashlib
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import blocks as B
from . import tensor as T
from .errors import (
    AllModalitiesMissing,
    BadMagic,
    ConfigError,
    MaskInputMismatch,
    ShapeError,
    ShapeMismatch,
    TruncatedFile,
    VersionUnsupported,
)
from .tensor import Tensor


class ModalityId(IntEnum):
    """The four MRI contrasts, with stable ordinals (serialization order)."""

    FLAIR = 0
    T1CE = 1
    T1 = 2
    T2 = 3

    @property
    def key(self):
        return self.name.lower()


MODALITIES = tuple(ModalityId)
NUM_CLASSES = 4


@dataclass(frozen=True)
class ModalityMask:
    """Per-modality presence indicators; at least one must be set."""

    delta: tuple

    def __post_init__(self):
        if len(self.delta) != 4 or not any(self.delta):
            raise AllModalitiesMissing(f"invalid mask {self.delta}")
        object.__setattr__(self, "delta", tuple(bool(d) for d in self.delta))

    def __getitem__(self, m):
        return self.delta[int(m)]

    @property
    def available(self):
        return tuple(m for m in MODALITIES if self.delta[int(m)])

    @property
    def n_available(self):
        return sum(self.delta)

    def name(self):
        return "+".join(m.key for m in self.available)

    @staticmethod
    def full():
        return ModalityMask((True, True, True, True))

    @staticmethod
    def single(m):
        d = [False] * 4
        d[int(m)] = True
        return ModalityMask(tuple(d))


def canonical_masks():
    """The 15 non-empty masks: singles, pairs, triples, full (ordinal order)."""
    out = []
    for size in (1, 2, 3, 4):
        combos = []
        for bits in range(1, 16):
            members = tuple(m for m in MODALITIES if bits & (1 << int(m)))
            if len(members) == size:
                combos.append(members)
        combos.sort()
        for members in combos:
            d = [m in members for m in MODALITIES]
            out.append(ModalityMask(tuple(d)))
    return out


@dataclass
class ArchConfig:
    """Architecture hyperparameters; the parameter key set is a pure
    function of this config."""

    widths: tuple = (8, 16, 32, 64, 128)
    num_heads: int = 4
    ufe_depth: int = 1
    ffn_mult: int = 4
    num_classes: int = NUM_CLASSES
    no_mfd: bool = False
    no_ufe: bool = False
    no_cmf: bool = False
    no_convblock: bool = False
    pairwise_cmf: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 5:
            raise ConfigError(f"widths must have 5 entries, got {self.widths}")
        if self.widths[4] % self.num_heads:
            raise ConfigError(
                f"bottleneck width {self.widths[4]} not divisible by {self.num_heads} heads")

    def digest(self):
        parts = [
            f"widths={','.join(map(str, self.widths))}",
            f"num_heads={self.num_heads}",
            f"ufe_depth={self.ufe_depth}",
            f"ffn_mult={self.ffn_mult}",
            f"num_classes={self.num_classes}",
            f"no_mfd={int(self.no_mfd)}",
            f"no_ufe={int(self.no_ufe)}",
            f"no_cmf={int(self.no_cmf)}",
            f"no_convblock={int(self.no_convblock)}",
        ]
        return hashlib.sha256("\n".join(parts).encode()).digest()


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Flat key -> array store with read tracking.

    Arrays are owned by the store; each forward wraps them into fresh leaf
    tensors through a ParamView so gradients never leak across steps.
    """

    def __init__(self, dtype=np.float32):
        self.arrays = {}
        self.accessed = set()
        self.dtype = np.dtype(dtype)

    def create(self, key, array):
        assert key not in self.arrays, key
        self.arrays[key] = np.ascontiguousarray(array, dtype=self.dtype)

    def keys(self):
        return sorted(self.arrays)

    def reset_access_log(self):
        self.accessed = set()

    def view(self, requires_grad):
        return ParamView(self, requires_grad)

    def n_params(self):
        return sum(a.size for a in self.arrays.values())


class ParamView:
    """Per-forward leaf-tensor cache over a ParamStore."""

    def __init__(self, store, requires_grad):
        self._store = store
        self._rg = requires_grad
        self._leaves = {}

    def __getitem__(self, key):
        leaf = self._leaves.get(key)
        if leaf is None:
            self._store.accessed.add(key)
            leaf = Tensor(self._store.arrays[key], requires_grad=self._rg,
                          dtype=self._store.dtype)
            self._leaves[key] = leaf
        return leaf

    def grads(self):
        """Collected grads after backward; absent keys never received one."""
        return {k: t.grad for k, t in self._leaves.items() if t.grad is not None}


def _conv_init(rng, cin, cout, k):
    lim = 1.0 / np.sqrt(cin * k ** 3)
    return rng.uniform(-lim, lim, size=(cout, cin, k, k, k))


def _linear_init(rng, cin, cout):
    lim = 1.0 / np.sqrt(cin)
    return rng.uniform(-lim, lim, size=(cin, cout))


def _create_encoder(store, rng, prefix, cin, widths):
    # conv layers feed instance norm, so they carry no bias (it would be
    # normalized away and its gradient would be identically zero)
    chans = [cin] + list(widths)
    for l in range(1, 6):
        store.create(f"{prefix}.l{l}.conv.w", _conv_init(rng, chans[l - 1], chans[l], 3))
        store.create(f"{prefix}.l{l}.norm.g", np.ones(chans[l]))
        store.create(f"{prefix}.l{l}.norm.b", np.zeros(chans[l]))


def _create_attention(store, rng, prefix, c):
    store.create(f"{prefix}.wq", _linear_init(rng, c, c))
    store.create(f"{prefix}.wk", _linear_init(rng, c, c))
    store.create(f"{prefix}.wv", _linear_init(rng, c, c))
    store.create(f"{prefix}.wo", np.zeros((c, c)))  # zero: identity at init


def _create_convblock(store, rng, prefix, cin, cout):
    store.create(f"{prefix}.conv.w", _conv_init(rng, cin, cout, 3))
    store.create(f"{prefix}.conv.b", np.zeros(cout))
    store.create(f"{prefix}.lin.w", np.zeros((cout, cout)))  # zero: identity at init
    store.create(f"{prefix}.lin.b", np.zeros(cout))


def _create_ffn(store, rng, prefix, c, mult):
    store.create(f"{prefix}.w1", _linear_init(rng, c, mult * c))
    store.create(f"{prefix}.b1", np.zeros(mult * c))
    store.create(f"{prefix}.w2", np.zeros((mult * c, c)))  # zero: identity at init
    store.create(f"{prefix}.b2", np.zeros(c))


def _create_decoder(store, rng, prefix, widths, num_classes, with_aux):
    for l in (4, 3, 2, 1):
        store.create(f"{prefix}.u{l}.conv.w", _conv_init(rng, widths[l], widths[l - 1], 3))
        store.create(f"{prefix}.u{l}.norm.g", np.ones(widths[l - 1]))
        store.create(f"{prefix}.u{l}.norm.b", np.zeros(widths[l - 1]))
    store.create(f"{prefix}.head.w", _conv_init(rng, widths[0], num_classes, 3))
    store.create(f"{prefix}.head.b", np.zeros(num_classes))
    if with_aux:
        for l in (1, 2, 3, 4):
            store.create(f"{prefix}.aux{l}.w", _conv_init(rng, widths[l], num_classes, 1))
            store.create(f"{prefix}.aux{l}.b", np.zeros(num_classes))


def build_params(cfg, seed, dtype=np.float32):
    """Deterministically initialized ParamStore for the configured graph."""
    store = ParamStore(dtype=dtype)
    rng = np.random.default_rng(seed)
    c = cfg.widths[4]

    _create_encoder(store, rng, "enc.multi", 4, cfg.widths)
    for m in MODALITIES:
        _create_encoder(store, rng, f"enc.{m.key}", 1, cfg.widths)

    if not cfg.no_ufe:
        for m in MODALITIES:
            for d in range(cfg.ufe_depth):
                pre = f"ufe.{m.key}.d{d}"
                _create_attention(store, rng, f"{pre}.attn", c)
                _create_ffn(store, rng, f"{pre}.ffn", c, cfg.ffn_mult)
                if not cfg.no_convblock:
                    _create_convblock(store, rng, f"{pre}.cb1", c, c)
                    _create_convblock(store, rng, f"{pre}.cb2", c, c)

    if not cfg.no_cmf:
        _create_attention(store, rng, "cmf.attn", c)
        for m in MODALITIES:
            store.create(f"cmf.embed.{m.key}", rng.uniform(-1, 1, size=c) / np.sqrt(c))
        if not cfg.no_convblock:
            _create_convblock(store, rng, "cmf.cb", 4 * c, c)

    _create_decoder(store, rng, "dec.multi", cfg.widths, cfg.num_classes, with_aux=False)
    for m in MODALITIES:
        _create_decoder(store, rng, f"dec.{m.key}", cfg.widths, cfg.num_classes, with_aux=False)
    _create_decoder(store, rng, "dec.seg", cfg.widths, cfg.num_classes, with_aux=True)
    return store


def _attn_params(view, prefix, num_heads):
    return B.AttentionParams(
        wq=view[f"{prefix}.wq"], wk=view[f"{prefix}.wk"],
        wv=view[f"{prefix}.wv"], wo=view[f"{prefix}.wo"], num_heads=num_heads)


def _cb_params(view, prefix):
    return B.ConvBlockParams(
        conv_w=view[f"{prefix}.conv.w"], conv_b=view[f"{prefix}.conv.b"],
        lin_w=view[f"{prefix}.lin.w"], lin_b=view[f"{prefix}.lin.b"])


def _ffn_params(view, prefix):
    return B.FfnParams(w1=view[f"{prefix}.w1"], b1=view[f"{prefix}.b1"],
                       w2=view[f"{prefix}.w2"], b2=view[f"{prefix}.b2"])


def _ufe_blocks(view, cfg, m):
    out = []
    for d in range(cfg.ufe_depth):
        pre = f"ufe.{m.key}.d{d}"
        cb1 = cb2 = None
        if not cfg.no_convblock:
            cb1 = _cb_params(view, f"{pre}.cb1")
            cb2 = _cb_params(view, f"{pre}.cb2")
        out.append(B.UfeBlockParams(
            attn=_attn_params(view, f"{pre}.attn", cfg.num_heads),
            cb1=cb1, ffn=_ffn_params(view, f"{pre}.ffn"), cb2=cb2))
    return out


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

_VALID_SMALL_DIMS = {1, 2, 4, 8}


def _check_dims(spatial):
    for d in spatial:
        if d % 16 != 0 and d not in _VALID_SMALL_DIMS:
            raise ShapeError(
                f"spatial dims must be multiples of 16 (or tiny powers of two), got {spatial}")


def encode(view, cfg, prefix, x):
    """Five conv/instance-norm/LeakyReLU layers, stride 2 from layer 2 on.

    Returns all five feature maps (distillation reads the middle layers,
    decoders read the bottleneck plus skips).
    """
    _check_dims(x.shape[1:])
    feats = []
    for l in range(1, 6):
        stride = 1 if l == 1 else 2
        x = T.conv3d(x, view[f"{prefix}.l{l}.conv.w"], stride=stride, pad=1)
        x = T.instance_norm(x, view[f"{prefix}.l{l}.norm.g"], view[f"{prefix}.l{l}.norm.b"])
        x = T.leaky_relu(x, 0.01)
        feats.append(x)
    return feats


def decode(view, cfg, prefix, bottleneck, skips, with_aux=False):
    """Mirror of the encoder: resample up, conv, norm, activate, add skip.

    skips are the encoder features at layers 1..4 (they fix the upsample
    target shapes). With with_aux, emits 1x1x1-conv logits at 1/16, 1/8,
    1/4 and 1/2 resolution alongside the full-resolution head.
    """
    if bottleneck.shape[0] != cfg.widths[4]:
        raise ShapeMismatch(
            f"bottleneck has {bottleneck.shape[0]} channels, expected {cfg.widths[4]}")
    x = bottleneck
    aux = {}
    if with_aux:
        aux[4] = T.conv3d(x, view[f"{prefix}.aux4.w"], view[f"{prefix}.aux4.b"])
    for l in (4, 3, 2, 1):
        skip = skips[l - 1]
        x = T.resize3d(x, skip.shape[1:])
        x = T.conv3d(x, view[f"{prefix}.u{l}.conv.w"], stride=1, pad=1)
        x = T.instance_norm(x, view[f"{prefix}.u{l}.norm.g"], view[f"{prefix}.u{l}.norm.b"])
        x = T.leaky_relu(x, 0.01)
        if x.shape != skip.shape:
            raise ShapeMismatch(f"skip shape {skip.shape} != decoder shape {x.shape}")
        x = T.add(x, skip)
        if with_aux and l >= 2:
            aux[l - 1] = T.conv3d(x, view[f"{prefix}.aux{l - 1}.w"],
                                  view[f"{prefix}.aux{l - 1}.b"])
    logits = T.conv3d(x, view[f"{prefix}.head.w"], view[f"{prefix}.head.b"], stride=1, pad=1)
    if with_aux:
        return logits, aux
    return logits


# ---------------------------------------------------------------------------
# distillation and fusion
# ---------------------------------------------------------------------------


def mfd_loss(teacher_feats, student_feats, mask):
    """L1 distance between teacher and student mid-layer features (3..5),
    summed over available modalities. Teacher features are detached."""
    total = None
    for m in mask.available:
        for l in (2, 3, 4):
            tf = teacher_feats[l]
            sf = student_feats[m][l]
            if tf.shape != sf.shape:
                raise ShapeMismatch(
                    f"layer {l + 1} teacher {tf.shape} != student {sf.shape}")
            term = T.tsum(T.absval(T.sub(sf, tf.detach())))
            total = term if total is None else T.add(total, term)
    return total


def cmf_forward(view, cfg, features, mask):
    """Delta-masked cross-modal fusion.

    (a) zero dropped modalities, (b) joint self-attention over all modality
    tokens (learned per-modality embeddings, dropped tokens key-masked),
    (c) mean-pool attended tokens over available modality slots,
    (d) convolutional reduction of the channel-concatenated maps,
    (e) sum of both branches. Output is independent of dropped inputs.
    """
    if set(features) != set(MODALITIES):
        raise MaskInputMismatch("fusion needs a feature map for every modality")
    if mask.n_available == 0:
        raise AllModalitiesMissing("fusion with empty mask")

    masked = {m: T.cmul(features[m], 1.0 if mask[m] else 0.0) for m in MODALITIES}
    any_feat = masked[MODALITIES[0]]
    c = any_feat.shape[0]
    spatial = any_feat.shape[1:]
    n = spatial[0] * spatial[1] * spatial[2]

    embedded = []
    for m in MODALITIES:
        ts = B.tokenize(masked[m])
        embedded.append(T.add(ts.tokens, view[f"cmf.embed.{m.key}"]))

    attn_p = _attn_params(view, "cmf.attn", cfg.num_heads)
    if cfg.pairwise_cmf:
        f_trans = _pairwise_trans(embedded, attn_p, mask, (c,) + tuple(spatial))
    else:
        joint = T.concat(embedded, axis=0)
        key_mask = np.repeat([mask[m] for m in MODALITIES], n)
        seq = B.TokenSeq(joint, (c, 4 * n, 1, 1))
        attended = B.mhsa(seq, seq, attn_p, key_mask=key_mask)
        slots = T.reshape(attended.tokens, (4, n, c))
        slot_mask = np.array([[[1.0 if mask[m] else 0.0]] for m in MODALITIES])
        pooled = T.scale(T.tsum(T.cmul(slots, slot_mask), axis=0), 1.0 / mask.n_available)
        f_trans = B.detokenize(B.TokenSeq(pooled, (c,) + tuple(spatial)))

    if cfg.no_convblock:
        return f_trans
    stacked = T.concat([masked[m] for m in MODALITIES], axis=0)
    f_conv = B.conv_block(stacked, _cb_params(view, "cmf.cb"))
    return T.add(f_trans, f_conv)


def _pairwise_trans(embedded, attn_p, mask, origin_shape):
    """Explicit per-pair attention reading: mean over key modalities of
    attention(Q_a, K_b, V_b), then mean over available query modalities."""
    avail = mask.available
    per_query = []
    for a in avail:
        acc = None
        for b in avail:
            out = B.mhsa(B.TokenSeq(embedded[int(a)], origin_shape),
                         B.TokenSeq(embedded[int(b)], origin_shape), attn_p)
            acc = out.tokens if acc is None else T.add(acc, out.tokens)
        per_query.append(T.scale(acc, 1.0 / len(avail)))
    total = per_query[0]
    for x in per_query[1:]:
        total = T.add(total, x)
    pooled = T.scale(total, 1.0 / len(avail))
    return B.detokenize(B.TokenSeq(pooled, origin_shape))


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutputs:
    seg_logits: Tensor
    mask: ModalityMask
    aux_logits: dict = None          # deep-supervision logits keyed 1..4
    uni_logits: dict = None          # per available modality
    multi_logits: Tensor = None
    teacher_feats: list = None
    student_feats: dict = field(default_factory=dict)


def _zeros_like_feat(ref):
    return Tensor(np.zeros(ref.shape, dtype=ref.dtype))


def _masked_mean_feats(per_modality, mask, layer):
    avail = mask.available
    acc = per_modality[avail[0]][layer]
    for m in avail[1:]:
        acc = T.add(acc, per_modality[m][layer])
    if len(avail) == 1:
        return acc
    return T.scale(acc, 1.0 / len(avail))


def model_forward(view, cfg, x, mask, mode):
    """Run the graph. mode 'train' computes every branch (teacher,
    per-modality decoders, deep supervision); mode 'infer' computes only
    the fusion path to the segmentation logits."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    provided = set(x)
    if mode == "train":
        if provided != set(MODALITIES):
            raise MaskInputMismatch(
                f"train mode needs all four modality volumes, got {sorted(m.key for m in provided)}")
    else:
        if provided != set(mask.available):
            raise MaskInputMismatch(
                f"infer inputs {sorted(m.key for m in provided)} != mask {mask.name()}")

    student_feats = {}
    for m in mask.available:
        student_feats[m] = encode(view, cfg, f"enc.{m.key}", x[m])

    ref = student_feats[mask.available[0]]
    bottleneck_ref = ref[4]

    enhanced = {}
    for m in MODALITIES:
        if mask[m]:
            f_star = student_feats[m][4]
            if cfg.no_ufe:
                enhanced[m] = f_star
            else:
                enhanced[m] = B.ufe_forward(f_star, _ufe_blocks(view, cfg, m))
        else:
            enhanced[m] = _zeros_like_feat(bottleneck_ref)

    if cfg.no_cmf:
        avail = mask.available
        fusion = enhanced[avail[0]]
        for m in avail[1:]:
            fusion = T.add(fusion, enhanced[m])
        if len(avail) > 1:
            fusion = T.scale(fusion, 1.0 / len(avail))
    else:
        fusion = cmf_forward(view, cfg, enhanced, mask)

    seg_skips = [_masked_mean_feats(student_feats, mask, l) for l in range(4)]
    seg_logits, aux = decode(view, cfg, "dec.seg", fusion, seg_skips, with_aux=True)

    if mode == "infer":
        return ForwardOutputs(seg_logits=seg_logits, mask=mask)

    x_multi = T.concat([x[m] for m in MODALITIES], axis=0)
    teacher_feats = encode(view, cfg, "enc.multi", x_multi)
    multi_logits = decode(view, cfg, "dec.multi", teacher_feats[4], teacher_feats[:4])

    uni_logits = {}
    for m in mask.available:
        uni_logits[m] = decode(view, cfg, f"dec.{m.key}", student_feats[m][4],
                               student_feats[m][:4])

    return ForwardOutputs(
        seg_logits=seg_logits, mask=mask, aux_logits=aux, uni_logits=uni_logits,
        multi_logits=multi_logits, teacher_feats=teacher_feats,
        student_feats=student_feats)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MCTS"
CKPT_VERSION = 1


def save_checkpoint(path, store, digest):
    """Binary dump: magic, version, config digest, sorted f32 parameters."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(digest)))
        f.write(digest)
        f.write(struct.pack("<I", len(store.arrays)))
        for key in store.keys():
            arr = np.ascontiguousarray(store.arrays[key], dtype="<f4")
            kb = key.encode()
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"checkpoint ends inside {what}")
    return buf


def load_checkpoint(path):
    """Returns (arrays dict of f32, digest bytes)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CKPT_MAGIC:
            raise BadMagic(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CKPT_VERSION:
            raise VersionUnsupported(f"checkpoint version {version}")
        (dlen,) = struct.unpack("<I", _read_exact(f, 4, "digest length"))
        digest = _read_exact(f, dlen, "digest")
        (nparams,) = struct.unpack("<I", _read_exact(f, 4, "param count"))
        arrays = {}
        for _ in range(nparams):
            (klen,) = struct.unpack("<H", _read_exact(f, 2, "key length"))
            key = _read_exact(f, klen, "key").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            data = _read_exact(f, 4 * int(np.prod(shape, dtype=np.int64)), f"data of {key}")
            arrays[key] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return arrays, digest


def restore_params(store, arrays):
    """Load checkpoint arrays into an existing store; key sets must match."""
    if set(arrays) != set(store.arrays):
        missing = sorted(set(store.arrays) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(store.arrays))[:3]
        raise ConfigError(f"checkpoint key set differs (missing {missing}, extra {extra})")
    for k, v in arrays.items():
        if v.shape != store.arrays[k].shape:
            raise ConfigError(f"shape of {k} differs: {v.shape} vs {store.arrays[k].shape}")
        store.arrays[k] = np.ascontiguousarray(v, dtype=store.dtype)
