"""Acoustic feature tracks, normalization, corpus I/O and a synthetic corpus.

A feature frame is 43 numbers: 40 mel-cepstral coefficients, one energy,
one logF0 (0 on unvoiced frames) and a binary V/UV flag, in that column
order. Normalization is global over the training split, zero mean and
unit variance per dimension with the population (biased) std, except the
V/UV flag which is never touched; logF0 statistics use voiced frames
only and unvoiced logF0 slots are zero in both raw and normalized form.

The synthetic corpus factorizes pronunciation and prosody by
construction: mel-cepstra come from a per-phoneme template shared across
languages (plus small frame noise), while energy and logF0 contours are
deterministic functions of the prosody label plus a per-speaker logF0
offset.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import (FrontendConfig, FrontendError, LanguageInfo,
                       PhonemeSequence, encode_utterance)

MCEP_DIM = 40
FRAME_WIDTH = 43  # mcep + energy + logf0 + vuv
ENERGY_COL = 40
LOGF0_COL = 41
VUV_COL = 42

FEATURE_MAGIC = b"DSAM"
CORPUS_FORMAT_VERSION = 1

SPLITS = ("train", "dev", "test")


class FeatureError(ValueError):
    pass


@dataclass
class FeatureTrack:
    mcep: np.ndarray      # (T, 40)
    energy: np.ndarray    # (T,)
    logf0: np.ndarray     # (T,), 0 where unvoiced
    vuv: np.ndarray       # (T,), values in {0, 1}
    truncated: bool = False

    def __post_init__(self):
        self.mcep = np.asarray(self.mcep, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        self.logf0 = np.asarray(self.logf0, dtype=np.float64)
        self.vuv = np.asarray(self.vuv, dtype=np.float64)
        t = len(self.energy)
        if t < 1:
            raise FeatureError("track must have at least one frame")
        if self.mcep.shape != (t, MCEP_DIM):
            raise FeatureError(f"mcep shape {self.mcep.shape} != ({t}, {MCEP_DIM})")
        if self.logf0.shape != (t,) or self.vuv.shape != (t,):
            raise FeatureError("per-frame array length mismatch")
        if not np.isin(self.vuv, (0.0, 1.0)).all():
            raise FeatureError("vuv values must be 0 or 1")
        if not np.isfinite(self.mcep).all() or not np.isfinite(self.energy).all():
            raise FeatureError("non-finite feature values")
        if not np.isfinite(self.logf0[self.vuv > 0]).all():
            raise FeatureError("non-finite logF0 on voiced frames")

    @property
    def frame_count(self):
        return len(self.energy)

    def to_matrix(self):
        """(T, 43) matrix in the serialized column order."""
        out = np.empty((self.frame_count, FRAME_WIDTH), dtype=np.float64)
        out[:, :MCEP_DIM] = self.mcep
        out[:, ENERGY_COL] = self.energy
        out[:, LOGF0_COL] = self.logf0
        out[:, VUV_COL] = self.vuv
        return out

    @classmethod
    def from_matrix(cls, mat):
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != FRAME_WIDTH:
            raise FeatureError(f"expected (T, {FRAME_WIDTH}) matrix, got {mat.shape}")
        return cls(mcep=mat[:, :MCEP_DIM].copy(), energy=mat[:, ENERGY_COL].copy(),
                   logf0=mat[:, LOGF0_COL].copy(), vuv=mat[:, VUV_COL].copy())


@dataclass
class NormStats:
    """Per-dimension mean/std for the 42 non-V/UV dimensions."""
    mean: np.ndarray  # (42,)
    std: np.ndarray   # (42,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (FRAME_WIDTH - 1,) or self.std.shape != (FRAME_WIDTH - 1,):
            raise FeatureError("stats must cover exactly the 42 non-V/UV dims")
        if (self.std <= 0).any():
            raise FeatureError("nonpositive std in normalization stats")

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


@dataclass
class Utterance:
    utt_id: str
    words: list
    marks: list
    seq: PhonemeSequence
    track: FeatureTrack
    split: str


@dataclass
class Corpus:
    frontend: FrontendConfig
    speakers: list[str]
    utterances: list[Utterance]
    stats: NormStats | None = None

    @property
    def languages(self):
        return [l.name for l in self.frontend.languages]

    def split(self, name):
        if name not in SPLITS:
            raise FeatureError(f"unknown split {name!r}")
        return [u for u in self.utterances if u.split == name]


def compute_norm_stats(tracks):
    """Pooled global mean/std over all frames of the given tracks.

    logF0 statistics are computed over voiced frames only; the V/UV flag
    is excluded entirely. Uses the population variance convention.
    """
    if not tracks:
        raise FeatureError("no tracks to compute stats from")
    mats = np.concatenate([t.to_matrix() for t in tracks], axis=0)
    voiced = mats[:, VUV_COL] > 0
    if not voiced.any():
        raise FeatureError("no voiced frames for logF0 stats")
    mean = np.empty(FRAME_WIDTH - 1)
    std = np.empty(FRAME_WIDTH - 1)
    mean[:LOGF0_COL] = mats[:, :LOGF0_COL].mean(axis=0)
    std[:LOGF0_COL] = mats[:, :LOGF0_COL].std(axis=0)
    mean[LOGF0_COL] = mats[voiced, LOGF0_COL].mean()
    std[LOGF0_COL] = mats[voiced, LOGF0_COL].std()
    bad = np.nonzero(std <= 1e-12)[0]
    if bad.size:
        raise FeatureError(f"zero-variance feature dimension(s): {bad.tolist()}")
    return NormStats(mean, std)


def normalize(track, stats):
    """(x - mean) / std per non-V/UV dim; unvoiced logF0 slots become 0."""
    voiced = track.vuv > 0
    logf0 = np.zeros_like(track.logf0)
    logf0[voiced] = ((track.logf0[voiced] - stats.mean[LOGF0_COL])
                     / stats.std[LOGF0_COL])
    return FeatureTrack(
        mcep=(track.mcep - stats.mean[:MCEP_DIM]) / stats.std[:MCEP_DIM],
        energy=(track.energy - stats.mean[ENERGY_COL]) / stats.std[ENERGY_COL],
        logf0=logf0,
        vuv=track.vuv.copy(),
    )


def denormalize(track, stats):
    voiced = track.vuv > 0
    logf0 = np.zeros_like(track.logf0)
    logf0[voiced] = (track.logf0[voiced] * stats.std[LOGF0_COL]
                     + stats.mean[LOGF0_COL])
    return FeatureTrack(
        mcep=track.mcep * stats.std[:MCEP_DIM] + stats.mean[:MCEP_DIM],
        energy=track.energy * stats.std[ENERGY_COL] + stats.mean[ENERGY_COL],
        logf0=logf0,
        vuv=track.vuv.copy(),
    )


# ---------------------------------------------------------------------------
# synthetic corpus generator

@dataclass(frozen=True)
class SpeakerSpec:
    name: str
    language: str
    logf0_offset: float = 0.0


@dataclass
class GeneratorConfig:
    """Recipe for a deterministic multilingual synthetic corpus."""
    languages: list[LanguageInfo]
    speakers: list[SpeakerSpec]
    vowels: tuple[str, ...]
    unvoiced: tuple[str, ...] = ()
    tones: tuple[str, ...] = ("tone1", "tone2", "tone3", "tone4", "tone5")
    stresses: tuple[str, ...] = ("primary", "secondary", "unstressed")
    utterances_per_language: int = 20
    words_range: tuple[int, int] = (1, 3)
    word_length_range: tuple[int, int] = (2, 4)
    duration_range: tuple[int, int] = (2, 5)  # frames per phoneme
    template_scale: float = 1.0
    noise_std: float = 0.02
    energy_base: float = 1.0
    logf0_base: float = 5.0   # ~148 Hz
    tone_amplitude: float = 0.25
    split_ratio: tuple[float, float, float] = (8.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.languages:
            raise FeatureError("generator needs at least one language")
        lang_names = {l.name for l in self.languages}
        for spk in self.speakers:
            if spk.language not in lang_names:
                raise FeatureError(
                    f"speaker {spk.name!r} references unknown language "
                    f"{spk.language!r}")
        for lang in self.languages:
            if not any(s.language == lang.name for s in self.speakers):
                raise FeatureError(f"language {lang.name!r} has no speakers")
        if len(self.languages) > 1:
            shared = set(self.languages[0].phonemes)
            for lang in self.languages[1:]:
                shared &= set(lang.phonemes)
            if not shared:
                raise FeatureError("language phoneme inventories do not overlap")
        if self.duration_range[0] < 1:
            raise FeatureError("phoneme duration must be at least one frame")
        if sum(self.split_ratio) <= 0 or self.split_ratio[0] <= 0:
            raise FeatureError("train split ratio must be positive")

    def frontend_config(self):
        inventory = sorted({p for l in self.languages for p in l.phonemes})
        return FrontendConfig(inventory=tuple(inventory),
                              languages=tuple(self.languages),
                              tones=self.tones, stresses=self.stresses)

    def to_dict(self):
        return {
            "languages": [{"name": l.name, "tonal": l.tonal,
                           "phonemes": list(l.phonemes)} for l in self.languages],
            "speakers": [{"name": s.name, "language": s.language,
                          "logf0_offset": s.logf0_offset} for s in self.speakers],
            "vowels": list(self.vowels),
            "unvoiced": list(self.unvoiced),
            "tones": list(self.tones),
            "stresses": list(self.stresses),
            "utterances_per_language": self.utterances_per_language,
            "words_range": list(self.words_range),
            "word_length_range": list(self.word_length_range),
            "duration_range": list(self.duration_range),
            "template_scale": self.template_scale,
            "noise_std": self.noise_std,
            "energy_base": self.energy_base,
            "logf0_base": self.logf0_base,
            "tone_amplitude": self.tone_amplitude,
            "split_ratio": list(self.split_ratio),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["languages"] = [LanguageInfo(l["name"], bool(l["tonal"]),
                                       tuple(l["phonemes"]))
                          for l in d["languages"]]
        d["speakers"] = [SpeakerSpec(s["name"], s["language"],
                                     float(s.get("logf0_offset", 0.0)))
                         for s in d["speakers"]]
        for key in ("vowels", "unvoiced", "tones", "stresses"):
            if key in d:
                d[key] = tuple(d[key])
        for key in ("words_range", "word_length_range", "duration_range",
                    "split_ratio"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _tone_shape(tone_index, u):
    """logF0 contour shape for a tone category at phase u in [0, 1)."""
    k = tone_index % 5
    if k == 0:
        return 1.0                      # high level
    if k == 1:
        return -1.0 + 2.0 * u           # rising
    if k == 2:
        return 1.0 - 8.0 * (u - 0.5) ** 2   # dipping
    if k == 3:
        return 1.0 - 2.0 * u            # falling
    return -0.6                         # low level


_STRESS_LEVEL = (0.8, 0.4, -0.3)       # primary, secondary, unstressed
_STRESS_ENERGY = (0.5, 0.25, -0.15)
_TONE_ENERGY = (0.3, 0.15, 0.0, -0.1, -0.25)


def _label_contours(label_id, duration, cfg, tone_count):
    """Per-frame (energy, logf0_shape) for one phoneme; label-determined."""
    u = (np.arange(duration) + 0.5) / duration
    if label_id < tone_count:
        logf0 = cfg.tone_amplitude * np.array(
            [_tone_shape(label_id, ui) for ui in u])
        energy = cfg.energy_base * (1.0 + _TONE_ENERGY[label_id % 5]
                                    + 0.3 * np.sin(np.pi * u))
    else:
        s = label_id - tone_count
        logf0 = cfg.tone_amplitude * (_STRESS_LEVEL[s % 3] - 0.2 * u)
        energy = cfg.energy_base * (1.0 + _STRESS_ENERGY[s % 3]
                                    + 0.3 * np.sin(np.pi * u))
    return energy, logf0


def generate_synthetic_corpus(gen_cfg: GeneratorConfig, seed: int) -> Corpus:
    """Deterministic corpus with a known pronunciation/prosody factorization."""
    fe = gen_cfg.frontend_config()
    rng = np.random.default_rng(seed)
    # one mcep template per inventory symbol, shared across languages
    templates = {sym: gen_cfg.template_scale * rng.standard_normal(MCEP_DIM)
                 for sym in fe.inventory}
    speakers = [s.name for s in gen_cfg.speakers]
    spk_by_lang = {}
    for i, s in enumerate(gen_cfg.speakers):
        spk_by_lang.setdefault(s.language, []).append(i)

    utterances = []
    for lang_id, lang in enumerate(fe.languages):
        lang_speakers = spk_by_lang[lang.name]
        for n in range(gen_cfg.utterances_per_language):
            spk_idx = lang_speakers[n % len(lang_speakers)]
            spk = gen_cfg.speakers[spk_idx]
            n_words = int(rng.integers(gen_cfg.words_range[0],
                                       gen_cfg.words_range[1] + 1))
            words, marks = [], []
            for _ in range(n_words):
                wlen = int(rng.integers(gen_cfg.word_length_range[0],
                                        gen_cfg.word_length_range[1] + 1))
                syms = [lang.phonemes[int(rng.integers(len(lang.phonemes)))]
                        for _ in range(wlen)]
                if lang.tonal:
                    wmarks = [fe.tones[int(rng.integers(len(fe.tones)))]
                              for _ in syms]
                else:
                    wmarks = []
                    for sym in syms:
                        if sym in gen_cfg.vowels:
                            wmarks.append(fe.stresses[
                                int(rng.integers(len(fe.stresses)))])
                        else:
                            wmarks.append(fe.stresses[-1])  # unstressed
                words.append(syms)
                marks.append(wmarks)
            seq = encode_utterance(words, marks, lang_id, spk_idx, fe)
            frames = []
            for word, wmarks in zip(words, marks):
                for sym, mark in zip(word, wmarks):
                    dur = int(rng.integers(gen_cfg.duration_range[0],
                                           gen_cfg.duration_range[1] + 1))
                    label_id = fe.label_id(mark)
                    energy, logf0_shape = _label_contours(
                        label_id, dur, gen_cfg, fe.tone_count)
                    voiced = sym not in gen_cfg.unvoiced
                    mcep = (templates[sym]
                            + gen_cfg.noise_std * rng.standard_normal(
                                (dur, MCEP_DIM)))
                    frame = np.empty((dur, FRAME_WIDTH))
                    frame[:, :MCEP_DIM] = mcep
                    frame[:, ENERGY_COL] = energy
                    if voiced:
                        frame[:, LOGF0_COL] = (gen_cfg.logf0_base
                                               + spk.logf0_offset + logf0_shape)
                        frame[:, VUV_COL] = 1.0
                    else:
                        frame[:, LOGF0_COL] = 0.0
                        frame[:, VUV_COL] = 0.0
                    frames.append(frame)
            track = FeatureTrack.from_matrix(np.concatenate(frames, axis=0))
            utterances.append(Utterance(
                utt_id=f"{lang.name}_{n:04d}", words=words, marks=marks,
                seq=seq, track=track, split="train"))

    _assign_splits(utterances, fe, gen_cfg.split_ratio, rng)
    corpus = Corpus(frontend=fe, speakers=speakers, utterances=utterances)
    corpus.stats = compute_norm_stats([u.track for u in corpus.split("train")])
    return corpus


def _assign_splits(utterances, fe, ratio, rng):
    """Per-language split assignment; train keeps at least one utterance."""
    total = sum(ratio)
    for lang_id in range(len(fe.languages)):
        idxs = [i for i, u in enumerate(utterances)
                if u.seq.language_id == lang_id]
        order = rng.permutation(len(idxs))
        n = len(idxs)
        n_dev = int(math.floor(n * ratio[1] / total))
        n_test = int(math.floor(n * ratio[2] / total))
        if n - n_dev - n_test < 1:
            n_dev = n_test = 0
        for pos, oi in enumerate(order):
            if pos < n_dev:
                split = "dev"
            elif pos < n_dev + n_test:
                split = "test"
            else:
                split = "train"
            utterances[idxs[oi]].split = split


# ---------------------------------------------------------------------------
# corpus I/O

def write_track(path, track):
    """Binary track file: magic, u32 frame count, u32 width, f32 frames."""
    mat = track.to_matrix().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def read_track(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FeatureError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FeatureError(f"{path}: truncated header")
        count, width = struct.unpack("<II", header)
        if width != FRAME_WIDTH:
            raise FeatureError(f"{path}: frame width {width} != {FRAME_WIDTH}")
        data = np.frombuffer(fh.read(), dtype="<f4")
        if data.size != count * width:
            raise FeatureError(f"{path}: expected {count * width} values, "
                               f"got {data.size}")
    return FeatureTrack.from_matrix(data.reshape(count, width).astype(np.float64))


def save_corpus(corpus, out_dir):
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CORPUS_FORMAT_VERSION,
        "frontend": corpus.frontend.to_dict(),
        "speakers": list(corpus.speakers),
        "stats": corpus.stats.to_dict() if corpus.stats is not None else None,
    }
    with open(out / "corpus.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for u in corpus.utterances:
            rel = f"features/{u.utt_id}.dsam"
            write_track(out / rel, u.track)
            rec = {"id": u.utt_id,
                   "language": corpus.frontend.languages[u.seq.language_id].name,
                   "speaker": corpus.speakers[u.seq.speaker_id],
                   "words": u.words, "marks": u.marks,
                   "features": rel, "split": u.split}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path):
    """Load a corpus from its directory or its manifest.jsonl path."""
    p = Path(path)
    if p.is_dir():
        manifest = p / "manifest.jsonl"
    else:
        manifest = p
    root = manifest.parent
    meta_path = root / "corpus.json"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    if not meta_path.exists():
        raise FileNotFoundError(f"missing corpus metadata: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != CORPUS_FORMAT_VERSION:
        raise FeatureError(f"unsupported corpus format version "
                           f"{meta.get('format_version')}")
    fe = FrontendConfig.from_dict(meta["frontend"])
    speakers = list(meta["speakers"])
    speaker_ids = {name: i for i, name in enumerate(speakers)}
    stats = (NormStats.from_dict(meta["stats"])
             if meta.get("stats") is not None else None)
    utterances = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                lang_id = fe.language_id(rec["language"])
                seq = encode_utterance(rec["words"], rec["marks"], lang_id,
                                       speaker_ids[rec["speaker"]], fe)
                track = read_track(root / rec["features"])
                split = rec["split"]
                if split not in SPLITS:
                    raise FeatureError(f"unknown split {split!r}")
            except (KeyError, json.JSONDecodeError, FrontendError,
                    FeatureError) as e:
                raise FeatureError(f"{manifest}:{ln}: {e}") from None
            utterances.append(Utterance(rec["id"], rec["words"], rec["marks"],
                                        seq, track, split))
    if not utterances:
        raise FeatureError(f"{manifest}: no utterances")
    return Corpus(frontend=fe, speakers=speakers, utterances=utterances,
                  stats=stats)
