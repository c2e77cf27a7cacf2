"""Loss assembly, language-balanced batching, Adam and the training loop.

The reconstruction loss sums masked MSE terms (mel-cepstra, energy,
voiced-only logF0) and BCE terms (V/UV flag, stop flag); the speaker
classifier contributes cross-entropy. The optimizer minimizes
reconstruction plus classifier loss, with the gradient-reversal layer
inside the classifier branch scaling the encoder's share by -lambda, so
the encoder is trained against the reported total
loss_total = loss_rec - lambda * loss_spk while the classifier itself
keeps improving. Prosody encoder/decoder parameters (and the speaker
embedding feeding the prosody decoder) update at half the base learning
rate, which itself halves every lr_halving_interval steps.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .features import MCEP_DIM, normalize
from .model import (GenerationCache, init_params, save_checkpoint,
                    teacher_forced_forward)

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.05
    batch_size: int = 50
    base_lr: float = 1e-3
    lr_halving_interval: int = 15000
    prosody_lr_factor: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 20000
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0   # 0: final checkpoint only
    grad_clip: float = 0.0      # 0: no clipping

    def __post_init__(self):
        if self.lam < 0:
            raise TrainingError("lambda must be >= 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise TrainingError("batch_size and max_steps must be positive")
        if self.lr_halving_interval < 1:
            raise TrainingError("lr_halving_interval must be >= 1")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainingError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(step, cfg):
    """Base rate halved every lr_halving_interval steps."""
    return cfg.base_lr * 0.5 ** (step // cfg.lr_halving_interval)


@dataclass
class LossBreakdown:
    mse_mcep: float
    mse_energy: float
    mse_logf0: float
    bce_vuv: float
    bce_stop: float
    loss_rec: float
    loss_spk: float
    loss_total: float

    FIELDS = ("mse_mcep", "mse_energy", "mse_logf0", "bce_vuv", "bce_stop",
              "loss_rec", "loss_spk", "loss_total")


def _combine(sums, count):
    if not sums:
        return None
    acc = sums[0]
    for s in sums[1:]:
        acc = ad.add(acc, s)
    return ad.mul(acc, 1.0 / count)


def loss_nodes(outputs, targets, speaker_ids, masks=None):
    """Per-term loss graph nodes for a batch of forward results.

    `targets` are normalized tracks; `masks` are optional per-item binary
    frame masks over the padded length (defaults to the valid frames of
    each item). Every term is a mean over unmasked elements pooled across
    the batch. Returns a dict with the five reconstruction terms, their
    sum `loss_rec`, and `loss_spk` (mse_logf0 is None when the batch has
    no voiced frames).
    """
    if not outputs:
        raise TrainingError("empty batch")
    mcep_sums, en_sums, f0_sums, vuv_sums, stop_sums, spk_sums = \
        [], [], [], [], [], []
    n_frames = 0
    n_voiced = 0
    n_positions = 0
    for i, (out, tgt) in enumerate(zip(outputs, targets)):
        t_run = out.stop_prob.shape[0]
        t_valid = out.frame_count
        if masks is not None:
            valid = np.asarray(masks[i], dtype=np.float64)
        else:
            valid = (np.arange(t_run) < t_valid).astype(np.float64)
        mat = np.zeros((t_run, MCEP_DIM + 2))
        mat[:t_valid, :MCEP_DIM] = tgt.mcep
        mat[:t_valid, MCEP_DIM] = tgt.energy
        mat[:t_valid, MCEP_DIM + 1] = tgt.logf0
        vuv_t = np.zeros(t_run)
        vuv_t[:t_valid] = tgt.vuv
        stop_t = np.zeros(t_run)
        stop_t[t_valid - 1] = 1.0

        mcep_sums.append(ad.mse(out.mcep, mat[:, :MCEP_DIM],
                                mask=valid[:, None], reduction="sum"))
        en_sums.append(ad.mse(out.energy, mat[:, MCEP_DIM], mask=valid,
                              reduction="sum"))
        voiced = valid * vuv_t
        if voiced.sum() > 0:
            f0_sums.append(ad.mse(out.logf0, mat[:, MCEP_DIM + 1],
                                  mask=voiced, reduction="sum"))
        n_voiced += int(voiced.sum())
        vuv_sums.append(ad.bce(out.vuv_prob, vuv_t, mask=valid,
                               reduction="sum"))
        stop_sums.append(ad.bce(out.stop_prob, stop_t, mask=valid,
                                reduction="sum"))
        spk_sums.append(ad.cross_entropy_logits(
            out.speaker_logits, int(speaker_ids[i]), reduction="sum"))
        n_frames += int(valid.sum())
        n_positions += out.speaker_logits.shape[1]

    mse_mcep = _combine(mcep_sums, n_frames * MCEP_DIM)
    mse_energy = _combine(en_sums, n_frames)
    if n_voiced > 0:
        mse_logf0 = _combine(f0_sums, n_voiced)
    else:
        log.warning("no voiced frames in batch; logF0 term set to 0")
        mse_logf0 = None
    bce_vuv = _combine(vuv_sums, n_frames)
    bce_stop = _combine(stop_sums, n_frames)
    loss_spk = _combine(spk_sums, n_positions)

    rec = ad.add(ad.add(mse_mcep, mse_energy), ad.add(bce_vuv, bce_stop))
    if mse_logf0 is not None:
        rec = ad.add(rec, mse_logf0)
    return {"mse_mcep": mse_mcep, "mse_energy": mse_energy,
            "mse_logf0": mse_logf0, "bce_vuv": bce_vuv, "bce_stop": bce_stop,
            "loss_rec": rec, "loss_spk": loss_spk}


def compute_loss(outputs, targets, speaker_ids, lam, masks=None):
    """Batch loss: logged breakdown plus the objective node to backprop.

    The reported loss_total follows loss_rec - lambda * loss_spk; the
    objective is loss_rec + loss_spk, relying on the gradient-reversal
    layer inside the classifier branch to hand the encoders the
    -lambda-scaled speaker gradient while the classifier trains normally.
    """
    terms = loss_nodes(outputs, targets, speaker_ids, masks=masks)
    rec, spk = terms["loss_rec"], terms["loss_spk"]
    objective = ad.add(rec, spk)
    rec_v = float(rec.data)
    spk_v = float(spk.data)
    breakdown = LossBreakdown(
        mse_mcep=float(terms["mse_mcep"].data),
        mse_energy=float(terms["mse_energy"].data),
        mse_logf0=(float(terms["mse_logf0"].data)
                   if terms["mse_logf0"] is not None else 0.0),
        bce_vuv=float(terms["bce_vuv"].data),
        bce_stop=float(terms["bce_stop"].data),
        loss_rec=rec_v,
        loss_spk=spk_v,
        loss_total=rec_v - lam * spk_v,
    )
    return breakdown, objective


# ---------------------------------------------------------------------------
# batching

def make_batches(utterances, batch_size, seed, num_batches=None):
    """Yield language-balanced batches, reshuffling per language.

    Each batch holds exactly batch_size / language_count utterances per
    language. Languages cycle through their own shuffled permutation and
    reshuffle independently when exhausted, which oversamples smaller
    languages relative to larger ones.
    """
    langs = sorted({u.seq.language_id for u in utterances})
    if not langs:
        raise TrainingError("no training utterances")
    if batch_size % len(langs) != 0:
        raise TrainingError(
            f"batch size {batch_size} not divisible by language count "
            f"{len(langs)}")
    per_lang = batch_size // len(langs)
    by_lang = {l: [u for u in utterances if u.seq.language_id == l]
               for l in langs}
    for l, pool in by_lang.items():
        if not pool:
            raise TrainingError(f"language id {l} has no training utterances")
    rng = np.random.default_rng(seed)
    cursors = {l: None for l in langs}

    def draw(lang):
        order, pos = cursors[lang] or (None, 0)
        if order is None or pos >= len(order):
            order = rng.permutation(len(by_lang[lang]))
            pos = 0
        cursors[lang] = (order, pos + 1)
        return by_lang[lang][order[pos]]

    produced = 0
    while num_batches is None or produced < num_batches:
        batch = []
        for lang in langs:
            for _ in range(per_lang):
                batch.append(draw(lang))
        produced += 1
        yield batch


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.m = {n: np.zeros(t.shape) for n, t in params.items()}
        self.v = {n: np.zeros(t.shape) for n, t in params.items()}
        self.t = 0

    def step(self, step_index):
        cfg = self.cfg
        base = learning_rate(step_index, cfg)
        self.t += 1
        if cfg.grad_clip > 0:
            sq = 0.0
            for _, tensor in self.params.items():
                if tensor.grad is not None:
                    sq += float((tensor.grad * tensor.grad).sum())
            norm = math.sqrt(sq)
            scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
        else:
            scale = 1.0
        c1 = 1.0 - cfg.adam_beta1 ** self.t
        c2 = 1.0 - cfg.adam_beta2 ** self.t
        for name, tensor in self.params.items():
            g = tensor.grad
            if g is None:
                g = np.zeros(tensor.shape)
            elif scale != 1.0:
                g = g * scale
            m, v = self.m[name], self.v[name]
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * (g * g)
            lr = base
            if self.params.group(name) == "prosody":
                lr *= cfg.prosody_lr_factor
            tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class LogRow:
    step: int
    lr: float
    loss: LossBreakdown


@dataclass
class TrainResult:
    params: object
    log_rows: list
    checkpoint_path: str | None


LOG_HEADER = ("step", "lr") + LossBreakdown.FIELDS


def write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.step, repr(r.lr)]
                       + [repr(getattr(r.loss, f)) for f in LossBreakdown.FIELDS])


def train(corpus, model_cfg, train_cfg, out_dir=None, stop_when=None):
    """Run the optimization loop; deterministic given train_cfg.seed.

    `stop_when(step, breakdown)` may end training early (used by
    convergence checks). Writes checkpoints and a CSV metric log under
    out_dir when given.
    """
    if corpus.stats is None:
        raise TrainingError("corpus has no normalization stats")
    train_split = corpus.split("train")
    if not train_split:
        raise TrainingError("empty training split")
    ss = np.random.SeedSequence(train_cfg.seed)
    init_seed, batch_seed = ss.spawn(2)
    params = init_params(model_cfg, np.random.default_rng(init_seed))
    adam = Adam(params, train_cfg)
    norm_tracks = {u.utt_id: normalize(u.track, corpus.stats)
                   for u in train_split}
    batches = make_batches(train_split, train_cfg.batch_size, batch_seed)

    meta = {"frontend": corpus.frontend.to_dict(),
            "speakers": list(corpus.speakers),
            "stats": corpus.stats.to_dict(),
            "train_config": train_cfg.to_dict()}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows = []
    final_path = None
    for step in range(train_cfg.max_steps):
        batch = next(batches)
        outputs = []
        targets = []
        speaker_ids = []
        cache = GenerationCache()
        for u in batch:
            tgt = norm_tracks[u.utt_id]
            outputs.append(teacher_forced_forward(
                u.seq, tgt, params, model_cfg, lam=train_cfg.lam,
                cache=cache))
            targets.append(tgt)
            speaker_ids.append(u.seq.speaker_id)
        breakdown, objective = compute_loss(outputs, targets, speaker_ids,
                                            train_cfg.lam)
        if not math.isfinite(breakdown.loss_total):
            raise TrainingError(f"divergence at step {step}: loss is not finite")
        ad.zero_grads(params.trainables())
        ad.backward(objective)
        adam.step(step)
        if step % train_cfg.log_every == 0 or step == train_cfg.max_steps - 1:
            rows.append(LogRow(step=step, lr=learning_rate(step, train_cfg),
                               loss=breakdown))
        if (out is not None and train_cfg.checkpoint_every > 0
                and (step + 1) % train_cfg.checkpoint_every == 0):
            save_checkpoint(out / f"step{step + 1:06d}.ckpt", params,
                            model_cfg, meta)
        if stop_when is not None and stop_when(step, breakdown):
            break

    if out is not None:
        final_path = out / "final.ckpt"
        save_checkpoint(final_path, params, model_cfg, meta)
        write_log(out / "train_log.csv", rows)
    return TrainResult(params=params, log_rows=rows,
                       checkpoint_path=str(final_path) if final_path else None)
