"""Pure numpy versions of the hot kernels (same contracts as ``_fast``)."""

import numpy as np


def rotate_distance(ent, phase, heads, rels, cands):
    half = ent.shape[1] // 2
    h = ent[heads]
    c, s = np.cos(phase[rels]), np.sin(phase[rels])
    hr = h[:, :half] * c - h[:, half:] * s
    hi = h[:, :half] * s + h[:, half:] * c
    t = ent[cands]
    dre = hr[:, None, :] - t[:, :, :half]
    dim = hi[:, None, :] - t[:, :, half:]
    return np.sqrt((dre * dre + dim * dim).sum(axis=2))


def rotate_distance_backward(ent, phase, heads, rels, cands, dist, gdist):
    half = ent.shape[1] // 2
    h = ent[heads]
    c, s = np.cos(phase[rels]), np.sin(phase[rels])
    hr = h[:, :half] * c - h[:, half:] * s
    hi = h[:, :half] * s + h[:, half:] * c
    t = ent[cands]
    dre = hr[:, None, :] - t[:, :, :half]
    dim = hi[:, None, :] - t[:, :, half:]
    w = np.divide(gdist, dist, out=np.zeros_like(dist), where=dist > 0)[:, :, None]
    g_t = np.concatenate([-w * dre, -w * dim], axis=2)
    g_hr = (w * dre).sum(axis=1)
    g_hi = (w * dim).sum(axis=1)
    g_h = np.concatenate([g_hr * c + g_hi * s, -g_hr * s + g_hi * c], axis=1)
    g_phase_rows = -g_hr * hi + g_hi * hr

    g_ent = np.zeros_like(ent)
    np.add.at(g_ent, cands.reshape(-1), g_t.reshape(-1, ent.shape[1]))
    np.add.at(g_ent, heads, g_h)
    g_phase = np.zeros_like(phase)
    np.add.at(g_phase, rels, g_phase_rows)
    return g_ent, g_phase


def rank_counts(scores, targets, filter_mask):
    q = np.arange(scores.shape[0])
    target_score = scores[q, targets][:, None]
    keep = ~filter_mask.astype(bool)
    keep[q, targets] = False
    greater = ((scores > target_score) & keep).sum(axis=1)
    equal = ((scores == target_score) & keep).sum(axis=1)
    return 1.0 + greater + np.floor(equal / 2.0)
