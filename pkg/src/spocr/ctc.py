"""Transcription layer: CTC loss, gradient, greedy decoding, oracle.

The loss marginalizes over every alignment of a label to T timesteps
through a blank-augmented path space. One log-space forward-backward
implementation (torch, float64 internally) serves both the per-grid
operations here and batched training; ``brute_force_likelihood`` is an
independent enumeration oracle for small instances.

Class index 0 is always the blank; alphabet symbols occupy 1..|A|.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from .errors import FeasibilityError, InputError, OracleScopeError

BLANK = 0

LETTERS_24 = tuple("ABCDEFGHJKLMNPQRSTUVWXYZ")  # I and O excluded
DIGITS = tuple("0123456789")
CCPD_PROVINCES = tuple(
    "皖沪津渝冀晋蒙辽吉黑苏浙京闽赣鲁豫鄂湘粤桂琼川贵云藏陕甘青宁新"
)


@dataclass(frozen=True)
class Alphabet:
    """Ordered symbol table: provinces, then letters, then digits.

    Index 0 is reserved for the CTC blank; symbol i lives at class index
    i+1. Plate grammar: position 1 must be a province, positions 2..7 a
    letter or digit.
    """

    provinces: tuple[str, ...] = CCPD_PROVINCES
    letters: tuple[str, ...] = LETTERS_24
    digits: tuple[str, ...] = DIGITS

    def __post_init__(self):
        symbols = self.symbols
        if len(set(symbols)) != len(symbols):
            raise InputError("alphabet contains duplicate symbols")

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(self.provinces) + tuple(self.letters) + tuple(self.digits)

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        """Symbols plus the blank."""
        return self.size + 1

    def index_of(self, char: str) -> int:
        try:
            return self.symbols.index(char) + 1
        except ValueError:
            raise InputError(f"character {char!r} not in alphabet") from None

    def char_of(self, index: int) -> str:
        if not 1 <= index <= self.size:
            raise InputError(f"class index {index} out of range 1..{self.size}")
        return self.symbols[index - 1]

    def encode(self, text: str) -> "LabelSequence":
        return LabelSequence(tuple(self.index_of(c) for c in text))

    def decode_text(self, label) -> str:
        indices = label.indices if isinstance(label, LabelSequence) else label
        return "".join(self.char_of(i) for i in indices)

    def is_valid_plate(self, label) -> bool:
        indices = label.indices if isinstance(label, LabelSequence) else label
        if len(indices) != 7:
            return False
        chars = [self.symbols[i - 1] if 1 <= i <= self.size else None for i in indices]
        if None in chars:
            return False
        body = set(self.letters) | set(self.digits)
        return chars[0] in self.provinces and all(c in body for c in chars[1:])


@dataclass(frozen=True)
class LabelSequence:
    """Ordered class indices, blanks excluded. May be empty (decoder output)."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(i < 1 for i in idx):
            raise InputError(f"label indices must be >= 1 (blank excluded): {idx}")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


def _as_indices(label) -> tuple[int, ...]:
    if isinstance(label, LabelSequence):
        return label.indices
    return LabelSequence(tuple(label)).indices


def extended_label(indices) -> list[int]:
    """Interleave blanks: [a, b] -> [blank, a, blank, b, blank]."""
    ext = [BLANK]
    for i in indices:
        ext.append(int(i))
        ext.append(BLANK)
    return ext


def min_feasible_timesteps(indices) -> int:
    """Shortest path length: one step per symbol plus a separating blank
    between adjacent repeats."""
    idx = _as_indices(indices)
    repeats = sum(1 for a, b in zip(idx, idx[1:]) if a == b)
    return len(idx) + repeats


def collapse_path(path) -> tuple[int, ...]:
    """The CTC transcription map: collapse adjacent repeats, drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != BLANK:
            out.append(int(p))
        prev = p
    return tuple(out)


def _validate_grid(grid: np.ndarray, row_tol: float = 1e-3) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise InputError(f"grid must be 2-D (T, classes), got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise InputError("grid contains non-finite entries")
    if grid.min() < -1e-12:
        raise InputError(f"grid has negative entries (min {grid.min():g})")
    rowsum = grid.sum(axis=1)
    if np.any(np.abs(rowsum - 1.0) > row_tol):
        worst = int(np.argmax(np.abs(rowsum - 1.0)))
        raise InputError(
            f"grid row {worst} is not stochastic (sum {rowsum[worst]:.6f})"
        )
    return np.clip(grid, 0.0, None)


def _check_label(indices, num_classes: int, timesteps: int) -> None:
    for i in indices:
        if not 1 <= i < num_classes:
            raise InputError(f"label index {i} outside 1..{num_classes - 1}")
    need = min_feasible_timesteps(indices)
    if timesteps < need:
        raise FeasibilityError(
            f"label of length {len(indices)} needs at least {need} timesteps, "
            f"grid has {timesteps}"
        )


# ---------------------------------------------------------------------------
# Forward-backward core (shared by the per-grid ops and batched training)
# ---------------------------------------------------------------------------

NEG_INF = float("-inf")


def _forward_backward_batch(log_probs: torch.Tensor, ext: torch.Tensor,
                            ext_len: torch.Tensor):
    """Log-space alpha/beta over extended labels, batched.

    log_probs: (B, T, C) float64, ext: (B, S) padded with blanks,
    ext_len: (B,) actual extended lengths (2L+1).

    Returns (log_like (B,), log_alpha_bar (B,T,S), log_beta (B,T,S)) where
    alpha_bar excludes the emission at t (so alpha_bar*beta/likelihood is
    the emission-free path posterior used by the gradient).
    """
    b, t_len, _ = log_probs.shape
    s_len = ext.shape[1]
    dev = log_probs.device

    # emissions per extended state
    em = log_probs.gather(2, ext.unsqueeze(1).expand(b, t_len, s_len))

    idx_s = torch.arange(s_len, device=dev).unsqueeze(0)  # (1, S)
    live = idx_s < ext_len.unsqueeze(1)                   # states within 2L+1

    # skip transition s-2 -> s allowed when ext[s] is a symbol differing
    # from ext[s-2]
    can_skip = torch.zeros((b, s_len), dtype=torch.bool, device=dev)
    if s_len > 2:
        can_skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    can_skip &= live

    neg = torch.full((b, s_len), NEG_INF, dtype=torch.float64, device=dev)

    zero_b = torch.zeros(b, dtype=torch.float64, device=dev)
    neg_b = torch.full((b,), NEG_INF, dtype=torch.float64, device=dev)

    alpha_bar = torch.empty((b, t_len, s_len), dtype=torch.float64, device=dev)
    start = neg.clone()
    start[:, 0] = 0.0
    if s_len > 1:
        start[:, 1] = torch.where(ext_len > 1, zero_b, neg_b)
    alpha_bar[:, 0] = start
    prev_alpha = start + em[:, 0]
    for t in range(1, t_len):
        shift1 = torch.cat([neg[:, :1], prev_alpha[:, :-1]], dim=1)
        shift2 = torch.cat([neg[:, :2], prev_alpha[:, :-2]], dim=1)
        shift2 = torch.where(can_skip, shift2, neg)
        bar = torch.logsumexp(torch.stack([prev_alpha, shift1, shift2]), dim=0)
        alpha_bar[:, t] = bar
        prev_alpha = bar + em[:, t]

    last = (ext_len - 1).clamp(min=0)
    second = (ext_len - 2).clamp(min=0)
    end_a = prev_alpha.gather(1, last.unsqueeze(1)).squeeze(1)
    end_b = prev_alpha.gather(1, second.unsqueeze(1)).squeeze(1)
    end_b = torch.where(ext_len >= 2, end_b, torch.full_like(end_b, NEG_INF))
    log_like = torch.logsumexp(torch.stack([end_a, end_b]), dim=0)

    beta = torch.empty((b, t_len, s_len), dtype=torch.float64, device=dev)
    final = neg.clone()
    # order matters for empty labels, where last == second == 0
    final.scatter_(
        1, second.unsqueeze(1), torch.where(ext_len >= 2, zero_b, neg_b).unsqueeze(1)
    )
    final.scatter_(1, last.unsqueeze(1), zero_b.unsqueeze(1))
    beta[:, t_len - 1] = final
    for t in range(t_len - 2, -1, -1):
        nxt = beta[:, t + 1] + em[:, t + 1]
        shift1 = torch.cat([nxt[:, 1:], neg[:, :1]], dim=1)
        shift2 = torch.cat([nxt[:, 2:], neg[:, :2]], dim=1)
        skip_from = torch.zeros_like(can_skip)
        skip_from[:, :-2] = can_skip[:, 2:]
        shift2 = torch.where(skip_from, shift2, neg)
        beta[:, t] = torch.logsumexp(torch.stack([nxt, shift1, shift2]), dim=0)

    return log_like, alpha_bar, beta


def _grad_probs_batch(log_probs, ext, ext_len, log_like, alpha_bar, beta):
    """d(-log P)/d probs, batched; zero where the likelihood is zero."""
    b, t_len, c = log_probs.shape
    s_len = ext.shape[1]
    contrib = alpha_bar + beta - log_like.view(b, 1, 1)
    contrib = torch.where(
        torch.isfinite(log_like).view(b, 1, 1), contrib,
        torch.full_like(contrib, NEG_INF),
    )
    grad = torch.zeros((b, t_len, c), dtype=torch.float64,
                       device=log_probs.device)
    grad.scatter_add_(
        2, ext.unsqueeze(1).expand(b, t_len, s_len), torch.exp(contrib)
    )
    return -grad


def _single_grid_core(grid: np.ndarray, indices):
    lp = torch.from_numpy(
        np.log(np.asarray(grid, dtype=np.float64),
               out=np.full(grid.shape, NEG_INF), where=grid > 0)
    ).unsqueeze(0)
    ext = torch.tensor([extended_label(indices)], dtype=torch.long)
    ext_len = torch.tensor([ext.shape[1]], dtype=torch.long)
    return lp, ext, ext_len


def ctc_loss(grid: np.ndarray, label, validate: bool = True) -> float:
    """Negative log likelihood of the label given a T x (|A|+1) grid.

    Computed by the log-space forward recursion over the blank-extended
    label; finite whenever the label is feasible and its path mass is
    nonzero. ``validate`` relaxes only the row-stochasticity check (the
    finite-difference tests perturb single entries).
    """
    grid = _validate_grid(np.asarray(grid, dtype=np.float64)) if validate \
        else np.clip(np.asarray(grid, dtype=np.float64), 0.0, None)
    indices = _as_indices(label)
    _check_label(indices, grid.shape[1], grid.shape[0])
    lp, ext, ext_len = _single_grid_core(grid, indices)
    log_like, _, _ = _forward_backward_batch(lp, ext, ext_len)
    return float(-log_like[0])


def ctc_grad(grid: np.ndarray, label, validate: bool = True) -> np.ndarray:
    """Gradient of ctc_loss with respect to the grid probabilities.

    Entries for symbols on no feasible path at a timestep are exactly
    zero; the softmax Jacobian is composed upstream by the model (see
    :func:`ctc_grad_logits`). Each row satisfies sum_k grad[t,k] *
    grid[t,k] = -1 whenever the likelihood is positive.
    """
    grid = _validate_grid(np.asarray(grid, dtype=np.float64)) if validate \
        else np.clip(np.asarray(grid, dtype=np.float64), 0.0, None)
    indices = _as_indices(label)
    _check_label(indices, grid.shape[1], grid.shape[0])
    lp, ext, ext_len = _single_grid_core(grid, indices)
    log_like, alpha_bar, beta = _forward_backward_batch(lp, ext, ext_len)
    grad = _grad_probs_batch(lp, ext, ext_len, log_like, alpha_bar, beta)
    return grad[0].numpy()


def ctc_grad_logits(grid: np.ndarray, label) -> np.ndarray:
    """Gradient composed with the softmax Jacobian at the grid point.

    With g = ctc_grad and rows of the grid produced by a softmax, the
    logit-space gradient is p * (g + 1); symbols off every feasible path
    get a positive entry (their probability is pushed down).
    """
    grid = np.asarray(grid, dtype=np.float64)
    return grid * (ctc_grad(grid, label) + 1.0)


def decode_greedy(grid: np.ndarray) -> LabelSequence:
    """Best-path decoding: argmax per row, collapse repeats, drop blanks."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise InputError(f"grid must be 2-D, got shape {grid.shape}")
    return LabelSequence(collapse_path(np.argmax(grid, axis=1)))


def brute_force_likelihood(grid: np.ndarray, label) -> float:
    """Ground-truth label likelihood by explicit path enumeration.

    Sums the probability of every alignment path whose transcription
    equals the label. Only for small instances: (|A|+1)^T must not
    exceed 10^6.
    """
    grid = np.asarray(grid, dtype=np.float64)
    t_len, c = grid.shape
    if c**t_len > 10**6:
        raise OracleScopeError(
            f"{c}^{t_len} paths exceed the 1e6 enumeration bound"
        )
    target = _as_indices(label)
    total = 0.0
    for path in itertools.product(range(c), repeat=t_len):
        if collapse_path(path) == target:
            p = 1.0
            for t, k in enumerate(path):
                p *= grid[t, k]
            total += p
    return total


# ---------------------------------------------------------------------------
# Batched loss for training
# ---------------------------------------------------------------------------


class _CtcProbLoss(torch.autograd.Function):
    """Per-sample CTC loss taking probability grids (B, T, C).

    The backward returns d(loss)/d(probs); composing with the upstream
    softmax is left to autograd.
    """

    @staticmethod
    def forward(ctx, probs, ext, ext_len):
        lp = torch.log(probs.detach().to(torch.float64).clamp_min(0))
        log_like, alpha_bar, beta = _forward_backward_batch(lp, ext, ext_len)
        grad = _grad_probs_batch(lp, ext, ext_len, log_like, alpha_bar, beta)
        ctx.save_for_backward(grad)
        ctx.in_dtype = probs.dtype
        return (-log_like).to(probs.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        out = grad * grad_output.view(-1, 1, 1).to(torch.float64)
        return out.to(ctx.in_dtype), None, None


def ctc_loss_batch(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean CTC loss over a batch of probability grids.

    ``labels`` is a sequence of LabelSequence / index lists; they are
    blank-extended and padded internally. Differentiable w.r.t. probs.
    """
    if probs.ndim != 3:
        raise InputError(f"probs must be (B, T, C), got shape {tuple(probs.shape)}")
    b, t_len, c = probs.shape
    if len(labels) != b:
        raise InputError(f"{len(labels)} labels for batch of {b}")
    exts = []
    for lab in labels:
        indices = _as_indices(lab)
        _check_label(indices, c, t_len)
        exts.append(extended_label(indices))
    s_max = max(len(e) for e in exts)
    ext = torch.full((b, s_max), BLANK, dtype=torch.long, device=probs.device)
    ext_len = torch.empty(b, dtype=torch.long, device=probs.device)
    for i, e in enumerate(exts):
        ext[i, : len(e)] = torch.tensor(e, dtype=torch.long)
        ext_len[i] = len(e)
    return _CtcProbLoss.apply(probs, ext, ext_len).mean()
