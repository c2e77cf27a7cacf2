"""Two-stream acoustic model with language-conditioned parameter generation.

Pronunciation and prosody streams each own an embedding pair and a
14-layer conv encoder (2 plain + 12 highway) whose weights are produced
by an affine parameter generator from the language embedding. The
encoder outputs are stacked into the attention keys; a single
location-sensitive attention module drives both autoregressive decoders,
the attention context being split by stream width. The pronunciation
decoder predicts mel-cepstra and a stop flag, the prosody decoder
(which also sees the speaker embedding) predicts energy, logF0 and the
V/UV flag. A per-position speaker classifier behind a gradient-reversal
layer removes speaker information from the stacked encoder output.

A single-stream ablation collapses the model to one encoder of the
combined width and one decoder emitting all feature dims plus stop,
keeping the same attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureTrack, MCEP_DIM, denormalize

FEEDBACK_DIM = MCEP_DIM + 2  # previous mcep + energy + logF0

CHECKPOINT_FORMAT_VERSION = 1

DEFAULT_PLAIN_PLAN = ((1, 1), (1, 1))
DEFAULT_HIGHWAY_PLAN = ((3, 1), (3, 3), (3, 9), (3, 27),
                        (3, 1), (3, 3), (3, 9), (3, 27),
                        (3, 1), (3, 1), (1, 1), (1, 1))


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    language_count: int
    speaker_count: int
    tone_count: int = 5
    stress_count: int = 3
    ipa_embed_dim: int = 32
    prosody_embed_dim: int = 8
    language_embed_dim: int = 8
    speaker_embed_dim: int = 8
    pron_encoder_width: int = 32
    pros_encoder_width: int = 16
    plain_conv_plan: tuple = DEFAULT_PLAIN_PLAN
    highway_conv_plan: tuple = DEFAULT_HIGHWAY_PLAN
    prenet_width: int = 64
    attention_dim: int = 32
    attention_query_width: int = 32
    location_filters: int = 8
    location_kernel: int = 15
    pron_decoder_width: int = 64
    pros_decoder_width: int = 32
    classifier_hidden: int = 64
    single_stream_ablation: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("plain_conv_plan", "highway_conv_plan"):
                object.__setattr__(self, f.name,
                                   tuple((int(k), int(d)) for k, d in v))
            elif f.name != "single_stream_ablation" and (not isinstance(v, (int, np.integer)) or v <= 0):
                raise ModelError(f"config field {f.name} must be a positive int")
        if len(self.plain_conv_plan) != 2 or len(self.highway_conv_plan) != 12:
            raise ModelError("encoder needs exactly 2 plain and 12 highway layers")
        for k, d in self.plain_conv_plan + self.highway_conv_plan:
            if k < 1 or d < 1:
                raise ModelError("conv kernel and dilation must be >= 1")
        if self.speaker_count < 2:
            raise ModelError("speaker classifier needs at least 2 speakers")

    @property
    def label_count(self):
        return self.tone_count + self.stress_count

    @property
    def embed_input_dim(self):
        return self.ipa_embed_dim + self.prosody_embed_dim

    @property
    def keys_dim(self):
        """Row count of the attention keys (stacked encoder output)."""
        return self.pron_encoder_width + self.pros_encoder_width

    @classmethod
    def paper_scale(cls, vocab_size, language_count, speaker_count, **over):
        """Full-size configuration; used for parameter-census checks only."""
        base = dict(vocab_size=vocab_size, language_count=language_count,
                    speaker_count=speaker_count,
                    ipa_embed_dim=512, prosody_embed_dim=16,
                    pron_encoder_width=256, pros_encoder_width=128,
                    prenet_width=256, attention_dim=128,
                    attention_query_width=128,
                    pron_decoder_width=1024, pros_decoder_width=256)
        base.update(over)
        return cls(**base)

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = [list(x) for x in v]
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("plain_conv_plan", "highway_conv_plan"):
            if key in d:
                d[key] = tuple(tuple(x) for x in d[key])
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter plan

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    group: str            # "base" or "prosody" (half learning rate)
    init: str             # uniform | zeros | gen_w | gen_b
    fan_in: int = 0
    conv_weight_size: int = 0  # for gen_b: leading entries that hold weights


def _streams(cfg):
    if cfg.single_stream_ablation:
        return (("shared", cfg.keys_dim, "base"),)
    return (("pron", cfg.pron_encoder_width, "base"),
            ("pros", cfg.pros_encoder_width, "prosody"))


def _encoder_layer_shapes(cfg, width):
    """(w_shape, b_shape) per encoder layer, in layer order."""
    shapes = []
    in_ch = cfg.embed_input_dim
    for k, _ in cfg.plain_conv_plan:
        shapes.append(((width, in_ch, k), (width,)))
        in_ch = width
    for k, _ in cfg.highway_conv_plan:
        shapes.append(((2 * width, width, k), (2 * width,)))
    return shapes


def generator_sites(cfg):
    """Registered generation sites: site name -> (w_shape, b_shape)."""
    sites = {}
    for skey, width, _ in _streams(cfg):
        for i, (w_shape, b_shape) in enumerate(_encoder_layer_shapes(cfg, width)):
            sites[f"{skey}.{i:02d}"] = (w_shape, b_shape)
    return sites


def _param_plan(cfg):
    plan = []

    def add(name, shape, group, init, fan_in=0, conv_weight_size=0):
        plan.append(ParamSpec(name, tuple(shape), group, init, fan_in,
                              conv_weight_size))

    add("lang_table", (cfg.language_count, cfg.language_embed_dim), "base",
        "uniform", cfg.language_embed_dim)
    add("spk_table", (cfg.speaker_count, cfg.speaker_embed_dim),
        "base" if cfg.single_stream_ablation else "prosody",
        "uniform", cfg.speaker_embed_dim)

    for skey, width, group in _streams(cfg):
        add(f"enc.{skey}.ipa_table", (cfg.vocab_size, cfg.ipa_embed_dim),
            group, "uniform", cfg.ipa_embed_dim)
        add(f"enc.{skey}.label_table", (cfg.label_count, cfg.prosody_embed_dim),
            group, "uniform", cfg.prosody_embed_dim)
        for i, (w_shape, b_shape) in enumerate(_encoder_layer_shapes(cfg, width)):
            n = int(np.prod(w_shape)) + b_shape[0]
            add(f"enc.{skey}.gen.w.{i:02d}", (n, cfg.language_embed_dim),
                group, "gen_w")
            add(f"enc.{skey}.gen.b.{i:02d}", (n,), group, "gen_b",
                fan_in=w_shape[1] * w_shape[2],
                conv_weight_size=int(np.prod(w_shape)))

    p, q, a, k = (cfg.prenet_width, cfg.attention_query_width,
                  cfg.attention_dim, cfg.keys_dim)
    add("prenet.w0", (FEEDBACK_DIM, p), "base", "uniform", FEEDBACK_DIM)
    add("prenet.b0", (p,), "base", "zeros")
    add("prenet.w1", (p, p), "base", "uniform", p)
    add("prenet.b1", (p,), "base", "zeros")
    add("attn.lstm.w", (4 * q, p + k + q), "base", "uniform", p + k + q)
    add("attn.lstm.b", (4 * q,), "base", "zeros")
    add("attn.query.w", (a, q), "base", "uniform", q)
    add("attn.keys.w", (a, k), "base", "uniform", k)
    add("attn.loc.conv", (cfg.location_filters, 1, cfg.location_kernel),
        "base", "uniform", cfg.location_kernel)
    add("attn.loc.w", (a, cfg.location_filters), "base", "uniform",
        cfg.location_filters)
    add("attn.bias", (a,), "base", "zeros")
    add("attn.v", (a,), "base", "uniform", a)

    if cfg.single_stream_ablation:
        h = cfg.pron_decoder_width
        add("dec.shared.lstm.w", (4 * h, cfg.speaker_embed_dim + k + h),
            "base", "uniform", cfg.speaker_embed_dim + k + h)
        add("dec.shared.lstm.b", (4 * h,), "base", "zeros")
        for head, out in (("mcep", MCEP_DIM), ("stop", 1), ("energy", 1),
                          ("logf0", 1), ("vuv", 1)):
            add(f"dec.shared.{head}.w", (h, out), "base", "uniform", h)
            add(f"dec.shared.{head}.b", (out,), "base", "zeros")
    else:
        ha, hp = cfg.pron_decoder_width, cfg.pros_decoder_width
        da, dp = cfg.pron_encoder_width, cfg.pros_encoder_width
        add("dec.pron.lstm.w", (4 * ha, da + ha), "base", "uniform", da + ha)
        add("dec.pron.lstm.b", (4 * ha,), "base", "zeros")
        for head, out in (("mcep", MCEP_DIM), ("stop", 1)):
            add(f"dec.pron.{head}.w", (ha, out), "base", "uniform", ha)
            add(f"dec.pron.{head}.b", (out,), "base", "zeros")
        add("dec.pros.lstm.w", (4 * hp, cfg.speaker_embed_dim + dp + hp),
            "prosody", "uniform", cfg.speaker_embed_dim + dp + hp)
        add("dec.pros.lstm.b", (4 * hp,), "prosody", "zeros")
        for head in ("energy", "logf0", "vuv"):
            add(f"dec.pros.{head}.w", (hp, 1), "prosody", "uniform", hp)
            add(f"dec.pros.{head}.b", (1,), "prosody", "zeros")

    add("cls.w0", (cfg.classifier_hidden, k), "base", "uniform", k)
    add("cls.b0", (cfg.classifier_hidden,), "base", "zeros")
    add("cls.w1", (cfg.speaker_count, cfg.classifier_hidden), "base",
        "uniform", cfg.classifier_hidden)
    add("cls.b1", (cfg.speaker_count,), "base", "zeros")
    return plan


def parameter_census(cfg):
    """All trainable tensor shapes, without allocating anything."""
    return {p.name: p.shape for p in _param_plan(cfg)}


class ModelParams:
    """Named trainable tensors plus their learning-rate group."""

    def __init__(self, tensors, groups):
        self.tensors = tensors
        self.groups = groups

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainables(self):
        return list(self.tensors.values())

    def group(self, name):
        return self.groups[name]

    def count(self):
        return sum(t.size for t in self.tensors.values())


def init_params(cfg, rng):
    """Allocate and initialize all trainables.

    Matrices are uniform(-k, k) with k = 1/sqrt(fan_in), biases zero.
    Generator weight matrices start at zero and generator biases carry a
    normal layer init, so training starts language-agnostic.
    """
    tensors, groups = {}, {}
    for spec in _param_plan(cfg):
        if spec.init == "uniform":
            k = 1.0 / np.sqrt(spec.fan_in)
            data = rng.uniform(-k, k, size=spec.shape)
        elif spec.init in ("zeros", "gen_w"):
            data = np.zeros(spec.shape)
        elif spec.init == "gen_b":
            data = np.zeros(spec.shape)
            k = 1.0 / np.sqrt(spec.fan_in)
            data[:spec.conv_weight_size] = rng.uniform(
                -k, k, size=spec.conv_weight_size)
        else:
            raise ModelError(f"unknown init kind {spec.init}")
        tensors[spec.name] = Tensor(data, requires_grad=True)
        groups[spec.name] = spec.group
    return ModelParams(tensors, groups)


# ---------------------------------------------------------------------------
# forward pieces

def language_embedding(params, language_id):
    return ad.reshape(ad.embedding(params["lang_table"], [language_id]), (-1,))


def speaker_embedding(params, speaker_id):
    return ad.reshape(ad.embedding(params["spk_table"], [speaker_id]), (-1,))


def generate_params(params, cfg, site, lang_emb):
    """Generated parameters for a registered encoder site, flattened.

    theta = W_site . e + b_site, laid out as the row-major conv weight
    followed by the bias. Gradients flow into W_site, b_site and the
    language embedding.
    """
    if site not in generator_sites(cfg):
        raise ModelError(f"unregistered generation site {site!r}")
    stream, layer = site.split(".")
    return ad.add(ad.matmul(params[f"enc.{stream}.gen.w.{layer}"], lang_emb),
                  params[f"enc.{stream}.gen.b.{layer}"])


class GenerationCache:
    """Shares generated encoder parameters across one optimizer step.

    Same-language utterances in a batch reuse the same generated tensors,
    so their gradient contributions accumulate on shared graph nodes.
    Invalid once the parameters are updated; build a fresh one per step.
    """

    def __init__(self):
        self.lang_emb = {}
        self.sites = {}


def _generate_site(params, cfg, site, lang_emb, lang_id=None, cache=None):
    """Shaped (conv weight, bias) pair generated for one encoder layer."""
    if cache is not None and (lang_id, site) in cache.sites:
        return cache.sites[(lang_id, site)]
    w_shape, b_shape = generator_sites(cfg)[site]
    theta = generate_params(params, cfg, site, lang_emb)
    w_flat, b = ad.split(theta, [int(np.prod(w_shape)), b_shape[0]])
    pair = (ad.reshape(w_flat, w_shape), b)
    if cache is not None:
        cache.sites[(lang_id, site)] = pair
    return pair


def _label_onehot_matrix(label_ids, cfg):
    mat = np.zeros((len(label_ids), cfg.label_count))
    for i, lid in enumerate(label_ids):
        lid = int(lid)
        if not 0 <= lid <= cfg.label_count:
            raise ModelError(f"label id {lid} out of range")
        if lid < cfg.label_count:
            mat[i, lid] = 1.0
    return mat


_STREAM_KEYS = {"pronunciation": "pron", "prosody": "pros", "shared": "shared"}


def encoder_forward(seq, stream, params, cfg, lang_emb=None, cache=None):
    """Run one encoder stream over a phoneme sequence; returns (D, L)."""
    skey = _STREAM_KEYS.get(stream, stream)
    valid = {s for s, _, _ in _streams(cfg)}
    if skey not in valid:
        raise ModelError(f"stream {stream!r} not available "
                         f"(ablation={cfg.single_stream_ablation})")
    if lang_emb is None:
        lang_emb = language_embedding(params, seq.language_id)
    ipa = ad.embedding(params[f"enc.{skey}.ipa_table"], seq.token_ids)
    onehot = Tensor(_label_onehot_matrix(seq.label_ids, cfg))
    label = ad.matmul(onehot, params[f"enc.{skey}.label_table"])
    x = ad.transpose(ad.concat([ipa, label], axis=1))  # (E1+E2, L)

    width = dict((s, w) for s, w, _ in _streams(cfg))[skey]
    plans = list(cfg.plain_conv_plan) + list(cfg.highway_conv_plan)
    n_plain = len(cfg.plain_conv_plan)
    for i, (_, dilation) in enumerate(plans):
        w, b = _generate_site(params, cfg, f"{skey}.{i:02d}", lang_emb,
                              seq.language_id, cache)
        if i < n_plain:
            x = ad.relu(ad.conv1d(x, w, b, dilation=dilation))
        else:
            hg = ad.conv1d(x, w, b, dilation=dilation)
            h, g = ad.split(hg, [width, width], axis=0)
            g = ad.sigmoid(g)
            x = ad.add(ad.mul(g, h), ad.mul(ad.sub(1.0, g), x))
    return x


@dataclass
class EncoderOutput:
    x: Tensor             # (keys_dim, L): stacked attention keys/values
    xa: Tensor | None = None
    xp: Tensor | None = None


def concat_encoders(xa, xp):
    """Stack pronunciation output above prosody output."""
    if xa.shape[1] != xp.shape[1]:
        raise ModelError(f"encoder length mismatch: {xa.shape[1]} vs "
                         f"{xp.shape[1]}")
    return EncoderOutput(x=ad.concat([xa, xp], axis=0), xa=xa, xp=xp)


def encode(seq, params, cfg, lang_emb=None, cache=None):
    if lang_emb is None:
        if cache is not None and seq.language_id in cache.lang_emb:
            lang_emb = cache.lang_emb[seq.language_id]
        else:
            lang_emb = language_embedding(params, seq.language_id)
            if cache is not None:
                cache.lang_emb[seq.language_id] = lang_emb
    if cfg.single_stream_ablation:
        return EncoderOutput(x=encoder_forward(seq, "shared", params, cfg,
                                               lang_emb, cache))
    xa = encoder_forward(seq, "pronunciation", params, cfg, lang_emb, cache)
    xp = encoder_forward(seq, "prosody", params, cfg, lang_emb, cache)
    return concat_encoders(xa, xp)


def split_context(context, cfg):
    """First pron_encoder_width entries to the pronunciation decoder."""
    if context.shape[0] != cfg.keys_dim:
        raise ModelError(f"context length {context.shape[0]} != "
                         f"{cfg.keys_dim}")
    return ad.split(context, [cfg.pron_encoder_width, cfg.pros_encoder_width])


@dataclass
class AttentionState:
    h: Tensor
    c: Tensor
    context: Tensor     # previous context vector (keys_dim,)
    alignment: Tensor   # previous alignment (L,)


def init_attention_state(length, cfg):
    align = np.zeros(length)
    align[0] = 1.0
    return AttentionState(h=Tensor(np.zeros(cfg.attention_query_width)),
                          c=Tensor(np.zeros(cfg.attention_query_width)),
                          context=Tensor(np.zeros(cfg.keys_dim)),
                          alignment=Tensor(align))


def project_keys(x, params):
    """Precompute the key term of the attention energies, once per input."""
    a = params["attn.keys.w"].shape[0]
    return ad.add(ad.matmul(params["attn.keys.w"], x),
                  ad.reshape(params["attn.bias"], (a, 1)))


def attention_step(prenet_out, state, keys, keys_proj, params, cfg):
    """One attention query: previous context/alignment ride in `state`.

    Energies are v . tanh(W q + V x_i + U (F * prev_alignment)_i + b);
    the alignment is their softmax and the context the alignment-weighted
    sum of key columns.
    """
    q_in = ad.concat([prenet_out, state.context])
    hc = ad.lstm_cell(q_in, state.h, state.c, params["attn.lstm.w"],
                      params["attn.lstm.b"])
    h, c = ad.split(hc, [cfg.attention_query_width, cfg.attention_query_width])
    wq = ad.matmul(params["attn.query.w"], h)
    loc = ad.conv1d(ad.reshape(state.alignment, (1, -1)),
                    params["attn.loc.conv"])
    uloc = ad.matmul(params["attn.loc.w"], loc)
    pre = ad.add(ad.add(keys_proj, uloc), ad.reshape(wq, (-1, 1)))
    energies = ad.matmul(params["attn.v"], ad.tanh(pre))
    alignment = ad.softmax(energies, axis=0)
    context = ad.matmul(keys, alignment)
    return context, alignment, AttentionState(h=h, c=c, context=context,
                                              alignment=alignment)


def prenet_apply(x, params):
    y = ad.tanh(ad.add(ad.matmul(x, params["prenet.w0"]), params["prenet.b0"]))
    return ad.tanh(ad.add(ad.matmul(y, params["prenet.w1"]),
                          params["prenet.b1"]))


def _head(h, params, name):
    return ad.add(ad.matmul(h, params[f"{name}.w"]), params[f"{name}.b"])


@dataclass
class DecoderState:
    attn: AttentionState
    pron_h: Tensor | None = None
    pron_c: Tensor | None = None
    pros_h: Tensor | None = None
    pros_c: Tensor | None = None
    shared_h: Tensor | None = None
    shared_c: Tensor | None = None


def init_decoder_state(length, cfg):
    state = DecoderState(attn=init_attention_state(length, cfg))
    if cfg.single_stream_ablation:
        z = np.zeros(cfg.pron_decoder_width)
        state.shared_h, state.shared_c = Tensor(z), Tensor(z.copy())
    else:
        za = np.zeros(cfg.pron_decoder_width)
        zp = np.zeros(cfg.pros_decoder_width)
        state.pron_h, state.pron_c = Tensor(za), Tensor(za.copy())
        state.pros_h, state.pros_c = Tensor(zp), Tensor(zp.copy())
    return state


@dataclass
class DecoderStepOutput:
    mcep: Tensor        # (40,)
    stop_prob: Tensor   # (1,)
    energy: Tensor      # (1,)
    logf0: Tensor       # (1,)
    vuv_prob: Tensor    # (1,)


def decoder_step(feedback, keys, keys_proj, spk_emb, state, params, cfg):
    """One full autoregressive frame: prenet, shared attention, decoders.

    `feedback` is the previous frame's normalized mcep+energy+logF0 (42
    values; V/UV and stop are not fed back), all zeros for the go-frame.
    """
    prenet_out = prenet_apply(feedback, params)
    context, _, attn_state = attention_step(prenet_out, state.attn, keys,
                                            keys_proj, params, cfg)
    new = DecoderState(attn=attn_state)
    if cfg.single_stream_ablation:
        hc = ad.lstm_cell(ad.concat([spk_emb, context]), state.shared_h,
                          state.shared_c, params["dec.shared.lstm.w"],
                          params["dec.shared.lstm.b"])
        h, c = ad.split(hc, [cfg.pron_decoder_width, cfg.pron_decoder_width])
        new.shared_h, new.shared_c = h, c
        out = DecoderStepOutput(
            mcep=_head(h, params, "dec.shared.mcep"),
            stop_prob=ad.sigmoid(_head(h, params, "dec.shared.stop")),
            energy=_head(h, params, "dec.shared.energy"),
            logf0=_head(h, params, "dec.shared.logf0"),
            vuv_prob=ad.sigmoid(_head(h, params, "dec.shared.vuv")))
    else:
        ctx_a, ctx_p = split_context(context, cfg)
        hc_a = ad.lstm_cell(ctx_a, state.pron_h, state.pron_c,
                            params["dec.pron.lstm.w"], params["dec.pron.lstm.b"])
        ha, ca = ad.split(hc_a, [cfg.pron_decoder_width,
                                 cfg.pron_decoder_width])
        hc_p = ad.lstm_cell(ad.concat([spk_emb, ctx_p]), state.pros_h,
                            state.pros_c, params["dec.pros.lstm.w"],
                            params["dec.pros.lstm.b"])
        hp, cp = ad.split(hc_p, [cfg.pros_decoder_width,
                                 cfg.pros_decoder_width])
        new.pron_h, new.pron_c, new.pros_h, new.pros_c = ha, ca, hp, cp
        out = DecoderStepOutput(
            mcep=_head(ha, params, "dec.pron.mcep"),
            stop_prob=ad.sigmoid(_head(ha, params, "dec.pron.stop")),
            energy=_head(hp, params, "dec.pros.energy"),
            logf0=_head(hp, params, "dec.pros.logf0"),
            vuv_prob=ad.sigmoid(_head(hp, params, "dec.pros.vuv")))
    return out, new


def speaker_classifier_forward(x, lam, params):
    """Per-position speaker logits (S, L) behind gradient reversal.

    lam=None bypasses the reversal layer entirely (used by gradient
    checks, which need the loss to be an honest scalar function).
    """
    a0 = params["cls.b0"].shape[0]
    s = params["cls.b1"].shape[0]
    rev = x if lam is None else ad.gradient_reverse(x, lam)
    hidden = ad.tanh(ad.add(ad.matmul(params["cls.w0"], rev),
                            ad.reshape(params["cls.b0"], (a0, 1))))
    return ad.add(ad.matmul(params["cls.w1"], hidden),
                  ad.reshape(params["cls.b1"], (s, 1)))


@dataclass
class ForwardResult:
    mcep: Tensor            # (T, 40)
    energy: Tensor          # (T,)
    logf0: Tensor           # (T,)
    vuv_prob: Tensor        # (T,)
    stop_prob: Tensor       # (T,)
    alignments: Tensor      # (T, L)
    speaker_logits: Tensor  # (S, L)
    frame_count: int        # valid frames (rest is padding)


def teacher_forced_forward(seq, target, params, cfg, lam=0.0, pad_to=None,
                           cache=None):
    """Training-mode pass with ground-truth previous-frame feedback.

    `target` must already be normalized. When `pad_to` exceeds the target
    length, extra all-zero feedback frames are run and reported past
    `frame_count`; losses mask them out. Passing a GenerationCache shares
    generated encoder parameters across same-language items of a batch.
    """
    t_valid = target.frame_count
    t_run = max(t_valid, pad_to or 0)
    feedback = np.zeros((t_run, FEEDBACK_DIM))
    mat = target.to_matrix()
    feedback[1:t_valid, :MCEP_DIM] = mat[:t_valid - 1, :MCEP_DIM]
    feedback[1:t_valid, MCEP_DIM:] = mat[:t_valid - 1, MCEP_DIM:MCEP_DIM + 2]

    spk_emb = speaker_embedding(params, seq.speaker_id)
    enc = encode(seq, params, cfg, cache=cache)
    keys_proj = project_keys(enc.x, params)
    prenet_rows = ad.unstack(prenet_apply(Tensor(feedback), params))

    state = init_decoder_state(len(seq), cfg)
    h_a, h_p, aligns = [], [], []
    for t in range(t_run):
        context, alignment, attn_state = attention_step(
            prenet_rows[t], state.attn, enc.x, keys_proj, params, cfg)
        new = DecoderState(attn=attn_state)
        if cfg.single_stream_ablation:
            hc = ad.lstm_cell(ad.concat([spk_emb, context]), state.shared_h,
                              state.shared_c, params["dec.shared.lstm.w"],
                              params["dec.shared.lstm.b"])
            h, c = ad.split(hc, [cfg.pron_decoder_width,
                                 cfg.pron_decoder_width])
            new.shared_h, new.shared_c = h, c
            h_a.append(h)
        else:
            ctx_a, ctx_p = split_context(context, cfg)
            hc_a = ad.lstm_cell(ctx_a, state.pron_h, state.pron_c,
                                params["dec.pron.lstm.w"],
                                params["dec.pron.lstm.b"])
            ha, ca = ad.split(hc_a, [cfg.pron_decoder_width,
                                     cfg.pron_decoder_width])
            hc_p = ad.lstm_cell(ad.concat([spk_emb, ctx_p]), state.pros_h,
                                state.pros_c, params["dec.pros.lstm.w"],
                                params["dec.pros.lstm.b"])
            hp, cp = ad.split(hc_p, [cfg.pros_decoder_width,
                                     cfg.pros_decoder_width])
            new.pron_h, new.pron_c, new.pros_h, new.pros_c = ha, ca, hp, cp
            h_a.append(ha)
            h_p.append(hp)
        aligns.append(alignment)
        state = new

    hs_a = ad.stack(h_a)  # (T, H)
    if cfg.single_stream_ablation:
        prefix = "dec.shared"
        hs_p = hs_a
    else:
        prefix = "dec.pron"
        hs_p = ad.stack(h_p)
        pros_prefix = "dec.pros"
    mcep = _head(hs_a, params, f"{prefix}.mcep")
    stop = ad.sigmoid(ad.reshape(_head(hs_a, params, f"{prefix}.stop"), (-1,)))
    if cfg.single_stream_ablation:
        energy = ad.reshape(_head(hs_p, params, f"{prefix}.energy"), (-1,))
        logf0 = ad.reshape(_head(hs_p, params, f"{prefix}.logf0"), (-1,))
        vuv = ad.sigmoid(ad.reshape(_head(hs_p, params, f"{prefix}.vuv"), (-1,)))
    else:
        energy = ad.reshape(_head(hs_p, params, f"{pros_prefix}.energy"), (-1,))
        logf0 = ad.reshape(_head(hs_p, params, f"{pros_prefix}.logf0"), (-1,))
        vuv = ad.sigmoid(ad.reshape(_head(hs_p, params, f"{pros_prefix}.vuv"),
                                    (-1,)))
    logits = speaker_classifier_forward(enc.x, lam, params)
    return ForwardResult(mcep=mcep, energy=energy, logf0=logf0, vuv_prob=vuv,
                         stop_prob=stop, alignments=ad.stack(aligns),
                         speaker_logits=logits, frame_count=t_valid)


def result_to_track(result, stats):
    """Denormalized FeatureTrack from a forward pass (predicted V/UV)."""
    t = result.frame_count
    vuv = (result.vuv_prob.data[:t] > 0.5).astype(np.float64)
    logf0 = result.logf0.data[:t] * vuv
    track = FeatureTrack(mcep=result.mcep.data[:t].copy(),
                         energy=result.energy.data[:t].copy(),
                         logf0=logf0, vuv=vuv)
    return denormalize(track, stats)


def synthesize(seq, params, cfg, stats, max_frames):
    """Free-running synthesis; stops when the stop head fires above 0.5.

    Feedback uses the model's own normalized predictions (logF0 zeroed on
    predicted-unvoiced frames). Returns a denormalized track, flagged
    truncated when max_frames was hit before a stop.
    """
    if max_frames < 1:
        raise ModelError("max_frames must be >= 1")
    if len(seq) < 1:
        raise ModelError("empty input sequence")
    with ad.no_grad():
        lang_emb = language_embedding(params, seq.language_id)
        spk_emb = speaker_embedding(params, seq.speaker_id)
        enc = encode(seq, params, cfg, lang_emb)
        keys_proj = project_keys(enc.x, params)
        state = init_decoder_state(len(seq), cfg)
        feedback = Tensor(np.zeros(FEEDBACK_DIM))
        mcep, energy, logf0, vuv = [], [], [], []
        truncated = True
        for _ in range(max_frames):
            out, state = decoder_step(feedback, enc.x, keys_proj, spk_emb,
                                      state, params, cfg)
            voiced = float(out.vuv_prob.data[0] > 0.5)
            mcep.append(out.mcep.data.copy())
            energy.append(float(out.energy.data[0]))
            logf0.append(float(out.logf0.data[0]) * voiced)
            vuv.append(voiced)
            if float(out.stop_prob.data[0]) > 0.5:
                truncated = False
                break
            feedback = Tensor(np.concatenate(
                [out.mcep.data, out.energy.data,
                 out.logf0.data * voiced]))
    track = FeatureTrack(mcep=np.stack(mcep), energy=np.array(energy),
                         logf0=np.array(logf0), vuv=np.array(vuv),
                         truncated=truncated)
    out_track = denormalize(track, stats)
    out_track.truncated = truncated
    return out_track


def dump_encodings(utterances, frontend_cfg, stream, params, cfg, out_path):
    """Write one labeled row per non-boundary phoneme occurrence.

    Tab-separated with a header: utterance id, position, language,
    phoneme symbol, prosody label, then the stream output vector.
    """
    skey = _STREAM_KEYS.get(stream, stream)
    valid = {s for s, _, _ in _streams(cfg)}
    if skey not in valid:
        raise ModelError(f"stream {stream!r} not available")
    width = dict((s, w) for s, w, _ in _streams(cfg))[skey]
    rows = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        header = ["utterance", "position", "language", "phoneme", "label"]
        header += [f"v{i}" for i in range(width)]
        fh.write("\t".join(header) + "\n")
        for u in utterances:
            with ad.no_grad():
                enc = encoder_forward(u.seq, stream, params, cfg)
            lang = frontend_cfg.languages[u.seq.language_id].name
            for pos in u.seq.phoneme_positions:
                sym = frontend_cfg.symbol(int(u.seq.token_ids[pos]))
                mark = frontend_cfg.mark(int(u.seq.label_ids[pos]))
                vec = enc.data[:, pos]
                fh.write("\t".join(
                    [u.utt_id, str(int(pos)), lang, sym, mark]
                    + [repr(float(v)) for v in vec]) + "\n")
                rows += 1
    return rows


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params, cfg, meta):
    """Binary checkpoint: version, config echo, f32 parameter blobs."""
    blobs = {"__format_version__": np.array([CHECKPOINT_FORMAT_VERSION]),
             "__config__": np.array(json.dumps(cfg.to_dict(), sort_keys=True)),
             "__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for name, t in params.items():
        blobs[f"param:{name}"] = t.data.astype(np.float32)
    with open(path, "wb") as fh:
        np.savez(fh, **blobs)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        version = int(z["__format_version__"][0])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ModelError(f"unsupported checkpoint version {version}")
        cfg = ModelConfig.from_dict(json.loads(str(z["__config__"])))
        meta = json.loads(str(z["__meta__"]))
        census = parameter_census(cfg)
        tensors, groups = {}, {}
        plan = {p.name: p for p in _param_plan(cfg)}
        for name, shape in census.items():
            key = f"param:{name}"
            if key not in z:
                raise ModelError(f"checkpoint missing parameter {name}")
            data = z[key].astype(np.float64)
            if data.shape != shape:
                raise ModelError(f"checkpoint parameter {name} has shape "
                                 f"{data.shape}, expected {shape}")
            tensors[name] = Tensor(data, requires_grad=True)
            groups[name] = plan[name].group
    return ModelParams(tensors, groups), cfg, meta
