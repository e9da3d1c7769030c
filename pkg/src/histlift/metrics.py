"""Evaluation protocols and representation-similarity analysis.

Pose metrics expect root-aligned (T, J, 3) or (N, J, 3) millimeter arrays
and never re-align internally. P-MPJPE fits a per-frame similarity
transform (scale + rotation + translation, reflections corrected) before
measuring. Linear CKA compares activation matrices after column centering.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .rng import derive_rng

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(5.0, 151.0, 5.0)  # 5, 10, ..., 150
CKA_ROW_BUDGET = 2048


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeError(f"expected matching (frames, joints, 3), got {pred.shape} vs {gt.shape}")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error in mm over frames and joints."""
    return float(joint_errors(pred, gt).mean())


def similarity_align(pred_frame, gt_frame):
    """Optimal similarity transform of one frame onto the ground truth.

    Solves min over scale s, rotation R, translation t of
    ||s * pred @ R + t - gt||^2 via SVD of the cross-covariance, with the
    determinant sign fixed so R is a proper rotation.
    """
    mu_p = pred_frame.mean(axis=0)
    mu_g = gt_frame.mean(axis=0)
    p0 = pred_frame - mu_p
    g0 = gt_frame - mu_g
    norm_p = np.sqrt((p0 ** 2).sum())
    norm_g = np.sqrt((g0 ** 2).sum())
    if norm_p < 1e-12 or norm_g < 1e-12:
        warnings.warn("degenerate frame in similarity alignment; using raw coordinates")
        return pred_frame
    p0 = p0 / norm_p
    g0 = g0 / norm_g
    h = p0.T @ g0
    u, s, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.ones(3)
    d[-1] = sign
    rotation = (u * d) @ vt
    scale = (s * d).sum() * norm_g / norm_p
    return (pred_frame - mu_p) @ rotation * scale + mu_g


def p_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame similarity (Procrustes) alignment."""
    pred, gt = _check_pair(pred, gt)
    total = 0.0
    for frame_p, frame_g in zip(pred, gt):
        aligned = similarity_align(frame_p, frame_g)
        total += np.linalg.norm(aligned - frame_g, axis=-1).mean()
    return float(total / pred.shape[0])


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    """Percentage of joints with error strictly below the threshold."""
    return float((joint_errors(pred, gt) < threshold_mm).mean() * 100.0)


def auc(pred, gt) -> float:
    """Mean PCK over thresholds 5..150 mm in steps of 5."""
    errors = joint_errors(pred, gt)
    return float(np.mean([(errors < t).mean() * 100.0 for t in AUC_THRESHOLDS_MM]))


# -- CKA -------------------------------------------------------------------------


def linear_cka(x, y) -> float:
    """Linear centered kernel alignment of two (rows, features) matrices."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"CKA needs matching row counts, got {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ShapeError("CKA needs at least 2 rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc, "fro") ** 2
    nx = np.linalg.norm(xc.T @ xc, "fro")
    ny = np.linalg.norm(yc.T @ yc, "fro")
    if nx < 1e-300 or ny < 1e-300:
        warnings.warn("zero-variance input to CKA; returning 0")
        return 0.0
    return float(cross / (nx * ny))


def subsample_rows(matrix, budget: int = CKA_ROW_BUDGET, seed: int = 0) -> np.ndarray:
    """Deterministically subsample rows to the fixed CKA budget."""
    matrix = np.asarray(matrix)
    if matrix.shape[0] <= budget:
        return matrix
    rng = derive_rng(seed, "cka-rows", matrix.shape[0])
    idx = rng.choice(matrix.shape[0], size=budget, replace=False)
    idx.sort()
    return matrix[idx]


def cka_matrix(activations, budget: int = CKA_ROW_BUDGET, seed: int = 0):
    """Pairwise linear CKA over layer activations.

    Returns (matrix, mean_off_diagonal); rows are subsampled once with a
    pinned seed so every pair sees the same row set.
    """
    sampled = [subsample_rows(np.asarray(a, dtype=np.float64), budget, seed) for a in activations]
    n = len(sampled)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            value = linear_cka(sampled[i], sampled[j])
            matrix[i, j] = matrix[j, i] = value
    if n > 1:
        off = matrix[~np.eye(n, dtype=bool)]
        mean_off = float(off.mean())
    else:
        mean_off = 1.0
    return matrix, mean_off


# -- reporting ---------------------------------------------------------------------


@dataclass
class EvalReport:
    mpjpe_mm: float
    p_mpjpe_mm: float
    pck_percent: float
    auc_percent: float
    per_action: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "mpjpe_mm": self.mpjpe_mm,
            "p_mpjpe_mm": self.p_mpjpe_mm,
            "pck_percent": self.pck_percent,
            "auc_percent": self.auc_percent,
        }
        if self.per_action:
            out["per_action"] = self.per_action
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    CSV_HEADER = "mpjpe_mm,p_mpjpe_mm,pck_percent,auc_percent"

    def to_csv_row(self) -> str:
        return f"{self.mpjpe_mm!r},{self.p_mpjpe_mm!r},{self.pck_percent!r},{self.auc_percent!r}"


def evaluate_pairs(pred, gt, actions=None) -> EvalReport:
    """Score stacked (N, J, 3) prediction/target pairs, optionally per action."""
    report = EvalReport(
        mpjpe_mm=mpjpe(pred, gt),
        p_mpjpe_mm=p_mpjpe(pred, gt),
        pck_percent=pck(pred, gt),
        auc_percent=auc(pred, gt),
    )
    if actions is not None:
        actions = np.asarray(actions)
        for name in sorted(set(actions.tolist())):
            mask = actions == name
            report.per_action[name] = {
                "mpjpe_mm": mpjpe(pred[mask], gt[mask]),
                "p_mpjpe_mm": p_mpjpe(pred[mask], gt[mask]),
                "pck_percent": pck(pred[mask], gt[mask]),
                "auc_percent": auc(pred[mask], gt[mask]),
            }
    return report
