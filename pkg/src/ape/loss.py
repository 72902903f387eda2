"""Symmetric batch contrastive loss over normalized embedding pairs.

The logit matrix S[i, j] = exp(log_scale) * <img_i, txt_j> couples every
pair in the batch; the loss averages the image->text and text->image
cross-entropies with true pairs on the diagonal:

    loss = 1/2 * [ mean_i CE(S[i, :], i) + mean_j CE(S[:, j], j) ]

Softmax uses per-row max subtraction; reductions accumulate in float64
regardless of the storage dtype. The backward pass is analytic:
dS = (softmax_rows(S) - I)/2B + (softmax_cols(S) - I)/2B.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError
from .heads import AlignmentHead
from .tensor import Tape, Tensor


def contrastive_loss(img: Tensor, txt: Tensor, log_scale: Tensor, tape: Tape | None = None) -> Tensor:
    """Scalar loss with gradients w.r.t. img rows, txt rows and log_scale."""
    if img.data.ndim != 2 or txt.data.ndim != 2 or img.data.shape != txt.data.shape:
        raise DimensionError(
            f"contrastive loss needs matching (B, d) inputs, got {img.data.shape} and {txt.data.shape}"
        )
    if img.data.shape[0] < 1:
        raise DimensionError("contrastive loss needs B >= 1")
    b = img.data.shape[0]
    scale = float(np.exp(np.float64(log_scale.data.item())))
    raw = img.data @ txt.data.T
    logits = (scale * raw).astype(np.float64)
    if not np.all(np.isfinite(logits)):
        i, j = np.argwhere(~np.isfinite(logits))[0]
        raise NumericError(f"non-finite logit for pair (image {i}, text {j})")

    row_max = logits.max(axis=1, keepdims=True)
    row_lse = np.log(np.exp(logits - row_max).sum(axis=1)) + row_max[:, 0]
    col_max = logits.max(axis=0, keepdims=True)
    col_lse = np.log(np.exp(logits - col_max).sum(axis=0)) + col_max[0, :]
    diag = np.diagonal(logits)
    value = 0.5 * (np.mean(row_lse - diag) + np.mean(col_lse - diag))
    out = Tensor(np.asarray(value))
    out.requires_grad = img.requires_grad or txt.requires_grad or log_scale.requires_grad
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            g0 = g.item()
            p_row = np.exp(logits - row_lse[:, None])
            p_col = np.exp(logits - col_lse[None, :])
            d_logits = (g0 * 0.5 / b) * (p_row + p_col)
            np.fill_diagonal(d_logits, np.diagonal(d_logits) - g0 / b)
            dtype = img.data.dtype
            if img.requires_grad:
                img.accumulate_grad((scale * (d_logits @ txt.data.astype(np.float64))).astype(dtype))
            if txt.requires_grad:
                txt.accumulate_grad((scale * (d_logits.T @ img.data.astype(np.float64))).astype(dtype))
            if log_scale.requires_grad:
                d_ls = np.sum(d_logits * logits)  # dS/dlog_scale = S
                log_scale.accumulate_grad(np.full_like(log_scale.data, d_ls))
        tape.record(backward)
    return out


def loss_and_grads(head: AlignmentHead, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Full-pipeline loss and parameter gradients for one batch.

    Composes text/image embedding and the contrastive loss on a single tape;
    returns gradients for every trainable parameter (zeros where a parameter
    does not influence the loss).
    """
    for p in head.parameters():
        p.zero_grad()
    tape = Tape()
    img, txt = head.embed_batch(batch, tape)
    loss = contrastive_loss(img, txt, head.log_scale, tape)
    tape.backward(loss)
    grads = {
        p.name: (np.zeros_like(p.data) if p.grad is None else p.grad)
        for p in head.parameters()
    }
    return loss.data.item(), grads
