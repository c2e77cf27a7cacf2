"""Objective evaluation: MCD, F0 RMSE/correlation, energy RMSE, V/UV error.

All metrics operate on denormalized tracks. Teacher-forced evaluation
compares frame-aligned predictions; free-running evaluation synthesizes
first and aligns prediction to reference with dynamic time warping on
the mel-cepstra (Euclidean local cost, symmetric steps). F0 metrics are
computed in Hz (natural exp of logF0) over frames voiced in both tracks;
the Pearson correlation is undefined with fewer than two such frames or
a constant contour. Per-language and overall values are unweighted means
of per-utterance metrics.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import FeatureTrack, normalize
from .model import result_to_track, synthesize, teacher_forced_forward

MCD_CONST = 10.0 / math.log(10.0)


class MetricError(ValueError):
    pass


def mcd(ref, pred):
    """Mel-cepstrum distortion in dB, averaged over frames."""
    if ref.frame_count != pred.frame_count:
        raise MetricError(f"frame count mismatch: {ref.frame_count} vs "
                          f"{pred.frame_count}")
    d = ref.mcep - pred.mcep
    per_frame = MCD_CONST * np.sqrt(2.0 * (d * d).sum(axis=1))
    return float(per_frame.mean())


def f0_metrics(ref, pred):
    """(RMSE in Hz, Pearson correlation) over frames voiced in both tracks.

    Correlation is None below two co-voiced frames or for constant
    contours; with zero co-voiced frames both values are None.
    """
    if ref.frame_count != pred.frame_count:
        raise MetricError("frame count mismatch")
    both = (ref.vuv > 0) & (pred.vuv > 0)
    n = int(both.sum())
    if n == 0:
        return None, None
    hz_r = np.exp(ref.logf0[both])
    hz_p = np.exp(pred.logf0[both])
    rmse = float(np.sqrt(((hz_r - hz_p) ** 2).mean()))
    if n < 2:
        return rmse, None
    sr = hz_r.std()
    sp = hz_p.std()
    if sr < 1e-12 or sp < 1e-12:
        return rmse, None
    corr = float(((hz_r - hz_r.mean()) * (hz_p - hz_p.mean())).mean()
                 / (sr * sp))
    return rmse, corr


def en_rmse(ref, pred):
    """Energy RMSE over all frames."""
    if ref.frame_count != pred.frame_count:
        raise MetricError("frame count mismatch")
    return float(np.sqrt(((ref.energy - pred.energy) ** 2).mean()))


def vuv_err(ref, pred):
    """Percentage of frames whose V/UV flags disagree."""
    if ref.frame_count != pred.frame_count:
        raise MetricError("frame count mismatch")
    return float(100.0 * (ref.vuv != pred.vuv).mean())


# ---------------------------------------------------------------------------
# dynamic time warping

def dtw_path(ref_mat, pred_mat):
    """Monotonic alignment path between two feature matrices.

    Euclidean local cost, symmetric steps (diag, down, right); ties break
    toward the diagonal so DTW of a track against itself is the identity
    path. Returns a list of (ref index, pred index) pairs from (0, 0) to
    (T1-1, T2-1).
    """
    a = np.asarray(ref_mat, dtype=np.float64)
    b = np.asarray(pred_mat, dtype=np.float64)
    t1, t2 = a.shape[0], b.shape[0]
    local = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    acc = np.full((t1, t2), np.inf)
    acc[0, 0] = local[0, 0]
    for i in range(1, t1):
        acc[i, 0] = acc[i - 1, 0] + local[i, 0]
    for j in range(1, t2):
        acc[0, j] = acc[0, j - 1] + local[0, j]
    for i in range(1, t1):
        prev = acc[i - 1]
        cur = acc[i]
        for j in range(1, t2):
            cur[j] = local[i, j] + min(prev[j - 1], prev[j], cur[j - 1])
    path = [(t1 - 1, t2 - 1)]
    i, j = t1 - 1, t2 - 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            best = min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
            if acc[i - 1, j - 1] == best:
                i, j = i - 1, j - 1
            elif acc[i - 1, j] == best:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    path.reverse()
    return path


def _track_rows(track, idx):
    return FeatureTrack(mcep=track.mcep[idx], energy=track.energy[idx],
                        logf0=track.logf0[idx], vuv=track.vuv[idx])


def align_tracks(ref, pred):
    """DTW-align two tracks on mel-cepstra; returns row-matched copies."""
    path = dtw_path(ref.mcep, pred.mcep)
    ri = np.array([p[0] for p in path])
    pi = np.array([p[1] for p in path])
    return _track_rows(ref, ri), _track_rows(pred, pi)


# ---------------------------------------------------------------------------
# evaluation driver

@dataclass
class UtteranceEval:
    utt_id: str
    language: str
    mcd_db: float
    f0_rmse_hz: float | None
    f0_corr: float | None
    en_rmse: float
    vuv_err_percent: float


@dataclass
class EvalRow:
    language: str
    utterance_count: int
    mcd_db: float
    f0_rmse_hz: float | None
    f0_corr: float | None
    en_rmse: float
    vuv_err_percent: float
    f0_undefined: int

    COLUMNS = ("language", "utterance_count", "mcd_db", "f0_rmse_hz",
               "f0_corr", "en_rmse", "vuv_err_percent", "f0_undefined")


@dataclass
class EvalReport:
    mode: str
    split: str
    rows: list            # per language, then "overall"
    utterances: list      # per-utterance detail


def _metrics_for(ref, pred):
    rmse, corr = f0_metrics(ref, pred)
    return (mcd(ref, pred), rmse, corr, en_rmse(ref, pred),
            vuv_err(ref, pred))


def evaluate(corpus, params, model_cfg, split="test", mode="teacher_forced",
             max_frames_factor=3.0):
    """Evaluate a checkpoint on a corpus split.

    teacher_forced: predictions use ground-truth previous frames, so frame
    counts match by construction. free_running: synthesize then DTW-align
    to the reference before computing metrics.
    """
    if mode not in ("teacher_forced", "free_running"):
        raise MetricError(f"unknown evaluation mode {mode!r}")
    if corpus.stats is None:
        raise MetricError("corpus has no normalization stats")
    utts = corpus.split(split)
    if not utts:
        raise MetricError(f"split {split!r} is empty")
    details = []
    for u in utts:
        ref = u.track
        if mode == "teacher_forced":
            with ad.no_grad():
                result = teacher_forced_forward(
                    u.seq, normalize(ref, corpus.stats), params, model_cfg)
            pred = result_to_track(result, corpus.stats)
        else:
            limit = max(1, int(max_frames_factor * ref.frame_count))
            pred = synthesize(u.seq, params, model_cfg, corpus.stats, limit)
            ref, pred = align_tracks(ref, pred)
        m, rmse, corr, en, vu = _metrics_for(ref, pred)
        details.append(UtteranceEval(
            utt_id=u.utt_id,
            language=corpus.frontend.languages[u.seq.language_id].name,
            mcd_db=m, f0_rmse_hz=rmse, f0_corr=corr, en_rmse=en,
            vuv_err_percent=vu))
    rows = []
    languages = [l.name for l in corpus.frontend.languages]
    for lang in languages + ["overall"]:
        sel = [d for d in details if lang == "overall" or d.language == lang]
        if not sel:
            continue
        rows.append(_aggregate(lang, sel))
    return EvalReport(mode=mode, split=split, rows=rows, utterances=details)


def _aggregate(language, details):
    def mean_of(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    corr_vals = [d.f0_corr for d in details]
    return EvalRow(
        language=language,
        utterance_count=len(details),
        mcd_db=mean_of([d.mcd_db for d in details]),
        f0_rmse_hz=mean_of([d.f0_rmse_hz for d in details]),
        f0_corr=mean_of(corr_vals),
        en_rmse=mean_of([d.en_rmse for d in details]),
        vuv_err_percent=mean_of([d.vuv_err_percent for d in details]),
        f0_undefined=sum(1 for v in corr_vals if v is None))


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(("mode", "split") + EvalRow.COLUMNS)
    for r in report.rows:
        w.writerow([report.mode, report.split]
                   + [getattr(r, c) if getattr(r, c) is not None else "undefined"
                      for c in EvalRow.COLUMNS])
    return buf.getvalue()


def format_report(report):
    """Human-readable table, one row per language plus overall."""
    def fmt(v, width=12):
        if v is None:
            return "undefined".rjust(width)
        if isinstance(v, float):
            return f"{v:.3f}".rjust(width)
        return str(v).rjust(width)

    lines = [f"mode: {report.mode}   split: {report.split}",
             "".join(["language".ljust(12), "count".rjust(6),
                      "MCD(dB)".rjust(12), "F0-RMSE(Hz)".rjust(12),
                      "F0-CORR".rjust(12), "EN-RMSE".rjust(12),
                      "V/UV-ERR(%)".rjust(12)])]
    for r in report.rows:
        lines.append("".join([
            r.language.ljust(12), str(r.utterance_count).rjust(6),
            fmt(r.mcd_db), fmt(r.f0_rmse_hz), fmt(r.f0_corr),
            fmt(r.en_rmse), fmt(r.vuv_err_percent)]))
    return "\n".join(lines) + "\n"
