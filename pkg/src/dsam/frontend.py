"""Phoneme-level frontend: token ids, word boundaries and prosody labels.

Input utterances are lists of words, each word a list of phoneme symbols,
with a parallel list of prosody marks. Encoding inserts a boundary token
between consecutive words and maps every phoneme to a token id plus a
prosody label id. Label ids [0, M) are tone categories, [M, M+N) are
stress categories in the order primary, secondary, unstressed, and id
M+N is the reserved no-prosody label carried by boundary tokens (it maps
to the all-zero one-hot).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
BOUNDARY_ID = 1
TOKEN_OFFSET = 2  # first inventory symbol

BOUNDARY_SYMBOL = "<wb>"
PAD_SYMBOL = "<pad>"


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class LanguageInfo:
    name: str
    tonal: bool
    phonemes: tuple[str, ...]


@dataclass(frozen=True)
class FrontendConfig:
    inventory: tuple[str, ...]
    languages: tuple[LanguageInfo, ...]
    tones: tuple[str, ...] = ("tone1", "tone2", "tone3", "tone4", "tone5")
    stresses: tuple[str, ...] = ("primary", "secondary", "unstressed")

    def __post_init__(self):
        if len(self.tones) < 1 or len(self.stresses) < 1:
            raise FrontendError("need at least one tone and one stress category")
        if len(set(self.inventory)) != len(self.inventory):
            raise FrontendError("duplicate symbols in inventory")
        for reserved in (BOUNDARY_SYMBOL, PAD_SYMBOL):
            if reserved in self.inventory:
                raise FrontendError(f"reserved token {reserved!r} in inventory")
        inv = set(self.inventory)
        for lang in self.languages:
            extra = set(lang.phonemes) - inv
            if extra:
                raise FrontendError(
                    f"language {lang.name!r} uses symbols outside the "
                    f"inventory: {sorted(extra)}")

    @property
    def tone_count(self):
        return len(self.tones)

    @property
    def stress_count(self):
        return len(self.stresses)

    @property
    def label_count(self):
        """Number of real prosody labels (tones + stresses)."""
        return len(self.tones) + len(self.stresses)

    @property
    def no_prosody_id(self):
        return self.label_count

    @property
    def vocab_size(self):
        """Token id space: pad, boundary, then the inventory."""
        return TOKEN_OFFSET + len(self.inventory)

    def token_id(self, symbol: str) -> int:
        try:
            return TOKEN_OFFSET + self.inventory.index(symbol)
        except ValueError:
            raise FrontendError(f"unknown symbol {symbol!r}") from None

    def symbol(self, token_id: int) -> str:
        if token_id == BOUNDARY_ID:
            return BOUNDARY_SYMBOL
        if token_id == PAD_ID:
            return PAD_SYMBOL
        return self.inventory[token_id - TOKEN_OFFSET]

    def label_id(self, mark: str) -> int:
        if mark in self.tones:
            return self.tones.index(mark)
        if mark in self.stresses:
            return len(self.tones) + self.stresses.index(mark)
        raise FrontendError(f"unknown prosody mark {mark!r}")

    def mark(self, label_id: int) -> str:
        m = len(self.tones)
        if 0 <= label_id < m:
            return self.tones[label_id]
        if m <= label_id < self.label_count:
            return self.stresses[label_id - m]
        raise FrontendError(f"label id {label_id} has no mark name")

    def language_id(self, name: str) -> int:
        for i, lang in enumerate(self.languages):
            if lang.name == name:
                return i
        raise FrontendError(f"unknown language {name!r}")

    def to_dict(self):
        return {
            "inventory": list(self.inventory),
            "languages": [{"name": l.name, "tonal": l.tonal,
                           "phonemes": list(l.phonemes)}
                          for l in self.languages],
            "tones": list(self.tones),
            "stresses": list(self.stresses),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            inventory=tuple(d["inventory"]),
            languages=tuple(LanguageInfo(l["name"], bool(l["tonal"]),
                                         tuple(l["phonemes"]))
                            for l in d["languages"]),
            tones=tuple(d["tones"]),
            stresses=tuple(d["stresses"]),
        )


@dataclass
class PhonemeSequence:
    """Encoded utterance input: token ids with boundary tokens inserted."""
    token_ids: np.ndarray
    label_ids: np.ndarray
    language_id: int
    speaker_id: int

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.label_ids = np.asarray(self.label_ids, dtype=np.int64)
        if self.token_ids.shape != self.label_ids.shape:
            raise FrontendError("token/label length mismatch")
        if len(self.token_ids) < 1:
            raise FrontendError("empty sequence")

    def __len__(self):
        return len(self.token_ids)

    @property
    def phoneme_positions(self):
        """Indices of non-boundary, non-pad tokens."""
        return np.nonzero(self.token_ids >= TOKEN_OFFSET)[0]


def encode_utterance(words, marks, language_id, speaker_id, cfg):
    """Encode words of phoneme symbols plus parallel prosody marks.

    A boundary token is inserted between consecutive words (never before
    the first or after the last) and carries the no-prosody label. Tonal
    languages must use tone marks, non-tonal languages stress marks.
    """
    if len(words) != len(marks):
        raise FrontendError("words and marks have different word counts")
    if not words or any(len(w) == 0 for w in words):
        raise FrontendError("empty word in utterance")
    lang = cfg.languages[language_id]
    allowed = set(lang.phonemes)
    token_ids = []
    label_ids = []
    for wi, (word, word_marks) in enumerate(zip(words, marks)):
        if len(word) != len(word_marks):
            raise FrontendError(
                f"word {wi}: {len(word)} phonemes but {len(word_marks)} marks")
        if wi > 0:
            token_ids.append(BOUNDARY_ID)
            label_ids.append(cfg.no_prosody_id)
        for sym, mark in zip(word, word_marks):
            if sym not in allowed:
                raise FrontendError(
                    f"symbol {sym!r} not in language {lang.name!r} subset")
            lid = cfg.label_id(mark)
            is_tone = lid < cfg.tone_count
            if is_tone != lang.tonal:
                kind = "tone" if is_tone else "stress"
                raise FrontendError(
                    f"{kind} mark {mark!r} not valid for language "
                    f"{lang.name!r}")
            token_ids.append(cfg.token_id(sym))
            label_ids.append(lid)
    return PhonemeSequence(np.array(token_ids), np.array(label_ids),
                           language_id, speaker_id)


def decode_utterance(seq, cfg):
    """Invert encode_utterance back to (words, marks)."""
    words, marks = [[]], [[]]
    for tid, lid in zip(seq.token_ids, seq.label_ids):
        if tid == BOUNDARY_ID:
            words.append([])
            marks.append([])
            continue
        words[-1].append(cfg.symbol(int(tid)))
        marks[-1].append(cfg.mark(int(lid)))
    return words, marks


def prosody_onehot(label_id, cfg):
    """One-hot over M+N label positions; the no-prosody label is all zeros."""
    size = cfg.label_count
    if not 0 <= label_id <= size:
        raise FrontendError(f"label id {label_id} out of range [0, {size}]")
    vec = np.zeros(size, dtype=np.float64)
    if label_id < size:
        vec[label_id] = 1.0
    return vec


def prosody_onehot_matrix(label_ids, cfg):
    """(L, M+N) matrix of prosody one-hots for a whole sequence."""
    rows = [prosody_onehot(int(lid), cfg) for lid in label_ids]
    return np.stack(rows, axis=0)


def read_transcriptions(path, cfg, speakers):
    """Read a JSON-lines transcription file into encoded sequences.

    Each line holds: id, language (name), speaker (name), words (array of
    arrays of symbols), marks (parallel label names). Returns a list of
    (utterance id, PhonemeSequence).
    """
    speaker_ids = {name: i for i, name in enumerate(speakers)}
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FrontendError(f"{path}:{ln}: bad JSON: {e}") from None
            try:
                lang_id = cfg.language_id(rec["language"])
                spk = rec["speaker"]
                if spk not in speaker_ids:
                    raise FrontendError(f"unknown speaker {spk!r}")
                seq = encode_utterance(rec["words"], rec["marks"], lang_id,
                                       speaker_ids[spk], cfg)
            except KeyError as e:
                raise FrontendError(f"{path}:{ln}: missing field {e}") from None
            except FrontendError as e:
                raise FrontendError(f"{path}:{ln}: {e}") from None
            out.append((rec.get("id", f"line{ln}"), seq))
    if not out:
        raise FrontendError(f"{path}: no utterances")
    return out
