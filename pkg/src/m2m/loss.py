"""Mixture-constraint and supervised losses with exact gradients.

The mixture-constraint loss filters a pair of source estimates, through
closed-form per-frequency least squares, to reconstruct every observed
mixture; the supervised loss compares the estimates against simulated
ground truth. Both come with gradients w.r.t. the real/imag parts of the
two estimates, either differentiated through the closed-form filter solves
("through") or with the filters treated as constants ("detached").
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import fcp
from .fcp import TapConfig, TapWindow
from .spectral import ComplexSpectrogram

GRAD_THROUGH_SOLVE = "through"
GRAD_DETACHED_FILTER = "detached"
_GRAD_MODES = (GRAD_THROUGH_SOLVE, GRAD_DETACHED_FILTER)


class _Magnitude(torch.autograd.Function):
    """|z| from real/imag parts with subgradient 0 at the origin."""

    @staticmethod
    def forward(ctx, re, im):
        mag = torch.sqrt(re * re + im * im)
        ctx.save_for_backward(re, im, mag)
        return mag

    @staticmethod
    def backward(ctx, grad):
        re, im, mag = ctx.saved_tensors
        safe = torch.where(mag > 0, mag, torch.ones_like(mag))
        zero = torch.zeros_like(mag)
        return (
            grad * torch.where(mag > 0, re / safe, zero),
            grad * torch.where(mag > 0, im / safe, zero),
        )


def _magnitude(z: torch.Tensor) -> torch.Tensor:
    return _Magnitude.apply(z.real, z.imag)


def _as_tensor(spec) -> torch.Tensor:
    if isinstance(spec, ComplexSpectrogram):
        return spec.data
    if torch.is_tensor(spec):
        return spec
    return torch.as_tensor(np.asarray(spec), dtype=torch.complex128)


def _g_array(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    # RI + magnitude distance, elementwise
    return (
        torch.abs(y.real - y_hat.real)
        + torch.abs(y.imag - y_hat.imag)
        + torch.abs(_magnitude(y) - _magnitude(y_hat))
    )


def distance_g(y: complex, y_hat: complex) -> float:
    """|Re y - Re ŷ| + |Im y - Im ŷ| + ||y| - |ŷ|| for one T-F unit."""
    y = complex(y)
    y_hat = complex(y_hat)
    return (
        abs(y.real - y_hat.real)
        + abs(y.imag - y_hat.imag)
        + abs(abs(y) - abs(y_hat))
    )


def mc_term(mixture, reconstruction) -> torch.Tensor:
    """Normalized distance sum_tf G(Y, Ŷ) / sum_tf |Y| (0-dim tensor)."""
    y = _as_tensor(mixture)
    y_hat = _as_tensor(reconstruction)
    if y.shape != y_hat.shape:
        raise ValueError("mixture and reconstruction shapes differ")
    denom = _magnitude(y.detach()).sum()
    if float(denom) == 0.0:
        raise ValueError("zero-energy mixture")
    return _g_array(y, y_hat).sum() / denom


@dataclass
class EstimatePair:
    """Speech and noise estimates at the reference microphone."""

    speech: ComplexSpectrogram
    noise: ComplexSpectrogram

    def __post_init__(self):
        if self.speech.data.shape != self.noise.data.shape:
            raise ValueError("speech and noise estimates must share a shape")


@dataclass
class MixtureSet:
    """The observed mixtures one training utterance provides.

    far holds the far-field spectrograms in fixed microphone order;
    ref_index marks the reference microphone; closetalk is optional.
    """

    far: list
    ref_index: int = 0
    closetalk: object | None = None

    def __post_init__(self):
        if len(self.far) < 1:
            raise ValueError("need at least one far-field microphone")
        if not 0 <= self.ref_index < len(self.far):
            raise ValueError("ref_index out of range")

    @property
    def reference(self):
        return self.far[self.ref_index]

    @property
    def nonref(self):
        return [y for i, y in enumerate(self.far) if i != self.ref_index]


@dataclass
class LossBreakdown:
    """Loss terms and the gradients w.r.t. the two source estimates.

    For mixture-constraint losses total = ref_weight * mc_ref +
    nonref_weight * sum(mc_nonref) + mc_closetalk; for supervised losses
    total = sup_target + sup_nontarget. Gradients are complex arrays
    holding dL/dRe + i dL/dIm.
    """

    total: float
    mc_ref: float | None = None
    mc_nonref: tuple = ()
    mc_closetalk: float | None = None
    sup_target: float | None = None
    sup_nontarget: float | None = None
    grad_speech: torch.Tensor | None = None
    grad_noise: torch.Tensor | None = None
    ct_future_taps: int | None = field(default=None)  # chosen Z when estimated

    def log_line(self, step: int, source: str) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.12g}"

        nonref_sum = sum(self.mc_nonref) if self.mc_nonref else None
        fields = [str(step), source, fmt(self.mc_ref), fmt(nonref_sum), fmt(self.mc_closetalk), fmt(self.total)]
        return "\t".join(fields)


LOG_HEADER = "step\tsource\tmc_ref\tmc_nonref_sum\tmc_closetalk\ttotal"


def _maybe_detach(banks, grad_mode):
    if grad_mode == GRAD_DETACHED_FILTER:
        return [fcp.FilterBank(b.taps.detach(), b.window) for b in banks]
    return banks


def mc_loss_tensors(
    speech: torch.Tensor,
    noise: torch.Tensor,
    mixtures: MixtureSet,
    cfg: TapConfig,
    grad_mode: str = GRAD_THROUGH_SOLVE,
    filters: dict | None = None,
) -> dict:
    """Differentiable mixture-constraint terms; filters solved inside.

    Returns a dict with 0-dim tensors "ref", "nonref" (tuple), "closetalk"
    (None when the config omits it), "total", the solved banks under
    "filters", and the searched close-talk future tap count under
    "ct_future_taps" when applicable. Passing a previously returned
    "filters" dict skips the solves and treats those banks as constants.
    """
    if grad_mode not in _GRAD_MODES:
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    y_ref = _as_tensor(mixtures.reference)
    if speech.shape != y_ref.shape or noise.shape != y_ref.shape:
        raise ValueError("estimate shape inconsistent with the mixtures")
    solved: dict = {"ref_reverb": None, "nonref": [], "closetalk": None}

    # reference far-field microphone: estimates enter unfiltered, plus an
    # optional reverb filter on the speech estimate solved against the
    # residual mixture
    reverb_window = cfg.ref_reverb_window()
    recon_ref = speech + noise
    if reverb_window is not None:
        if filters is not None:
            g_bank = filters["ref_reverb"]
        else:
            lam_ref = fcp.compute_lambda(y_ref, cfg.weight_floor)
            residual = y_ref - (speech + noise)
            (g_bank,) = _maybe_detach(
                [fcp.fcp_solve(residual, speech, reverb_window, lam_ref)], grad_mode
            )
        solved["ref_reverb"] = g_bank
        recon_ref = recon_ref + fcp.apply_filter(g_bank, speech)
    term_ref = mc_term(y_ref, recon_ref)

    # non-reference far-field microphones: both estimates filtered, jointly
    speech_window = TapWindow(past=cfg.speech_past, future=cfg.speech_future)
    noise_window = TapWindow(past=cfg.noise_past, future=cfg.noise_future)
    terms_nonref = []
    for i, y_p in enumerate(mixtures.nonref):
        y_p = _as_tensor(y_p)
        if filters is not None:
            h_bank, r_bank = filters["nonref"][i]
        else:
            lam = fcp.compute_lambda(y_p, cfg.weight_floor)
            h_bank, r_bank = _maybe_detach(
                fcp.solve_joint(y_p, [(speech, speech_window), (noise, noise_window)], lam),
                grad_mode,
            )
        solved["nonref"].append((h_bank, r_bank))
        recon = fcp.apply_filter(h_bank, speech) + fcp.apply_filter(r_bank, noise)
        terms_nonref.append(mc_term(y_p, recon))

    # close-talk microphone
    term_ct = None
    ct_future = None
    if cfg.uses_closetalk:
        if mixtures.closetalk is None:
            raise ValueError("config demands a close-talk mixture but none was given")
        y_ct = _as_tensor(mixtures.closetalk)
        if filters is not None:
            h0_bank, r0_bank = filters["closetalk"]
        else:
            if cfg.estimates_ct_future:
                ct_future = fcp.estimate_future_taps(y_ct, speech, noise, cfg)
                ct_s_future = ct_v_future = ct_future
            else:
                ct_s_future = int(cfg.ct_speech_future)
                ct_v_future = int(cfg.ct_noise_future)
            ct_s_window = TapWindow(past=cfg.ct_speech_past, future=ct_s_future)
            ct_v_window = TapWindow(past=cfg.ct_noise_past, future=ct_v_future)
            lam_ct = fcp.compute_lambda(y_ct, cfg.weight_floor)
            h0_bank, r0_bank = _maybe_detach(
                fcp.solve_joint(y_ct, [(speech, ct_s_window), (noise, ct_v_window)], lam_ct),
                grad_mode,
            )
        solved["closetalk"] = (h0_bank, r0_bank)
        recon_ct = fcp.apply_filter(h0_bank, speech) + fcp.apply_filter(r0_bank, noise)
        term_ct = mc_term(y_ct, recon_ct)

    total = cfg.ref_weight * term_ref
    for t in terms_nonref:
        total = total + cfg.nonref_weight * t
    if term_ct is not None:
        total = total + term_ct
    return {
        "ref": term_ref,
        "nonref": tuple(terms_nonref),
        "closetalk": term_ct,
        "total": total,
        "ct_future_taps": ct_future,
        "filters": solved,
    }


def supervised_loss_tensors(
    speech: torch.Tensor,
    noise: torch.Tensor,
    truth_speech,
    truth_noise,
    mixture_ref,
) -> dict:
    """Differentiable supervised terms, normalized by the mixture magnitude."""
    s_true = _as_tensor(truth_speech).detach()
    v_true = _as_tensor(truth_noise).detach()
    y = _as_tensor(mixture_ref).detach()
    if speech.shape != s_true.shape or noise.shape != v_true.shape or speech.shape != y.shape:
        raise ValueError("shapes of estimates, truth, and mixture must agree")
    denom = _magnitude(y).sum()
    if float(denom) == 0.0:
        raise ValueError("zero-energy mixture")
    target = _g_array(s_true, speech).sum() / denom
    nontarget = _g_array(v_true, noise).sum() / denom
    return {"target": target, "nontarget": nontarget, "total": target + nontarget}


def _grad_leaves(estimates: EstimatePair):
    s = estimates.speech.data.detach()
    v = estimates.noise.data.detach()
    leaves = [x.clone().requires_grad_(True) for x in (s.real, s.imag, v.real, v.imag)]
    speech = torch.complex(leaves[0], leaves[1])
    noise = torch.complex(leaves[2], leaves[3])
    return leaves, speech, noise


def _collect_grad(re_leaf, im_leaf, what: str) -> torch.Tensor:
    g_re = re_leaf.grad if re_leaf.grad is not None else torch.zeros_like(re_leaf)
    g_im = im_leaf.grad if im_leaf.grad is not None else torch.zeros_like(im_leaf)
    grad = torch.complex(g_re, g_im)
    bad = ~(torch.isfinite(g_re) & torch.isfinite(g_im))
    if bool(bad.any()):
        t, f = [int(i) for i in bad.nonzero()[0]]
        raise FloatingPointError(f"non-finite {what} gradient at (t={t}, f={f})")
    return grad


def mc_loss(
    estimates: EstimatePair,
    mixtures: MixtureSet,
    cfg: TapConfig,
    grad_mode: str = GRAD_THROUGH_SOLVE,
) -> LossBreakdown:
    """Mixture-constraint loss over all microphones, with gradients."""
    leaves, speech, noise = _grad_leaves(estimates)
    terms = mc_loss_tensors(speech, noise, mixtures, cfg, grad_mode)
    terms["total"].backward()
    return LossBreakdown(
        total=float(terms["total"].detach()),
        mc_ref=float(terms["ref"].detach()),
        mc_nonref=tuple(float(t.detach()) for t in terms["nonref"]),
        mc_closetalk=None if terms["closetalk"] is None else float(terms["closetalk"].detach()),
        grad_speech=_collect_grad(leaves[0], leaves[1], "speech"),
        grad_noise=_collect_grad(leaves[2], leaves[3], "noise"),
        ct_future_taps=terms["ct_future_taps"],
    )


def supervised_loss(
    estimates: EstimatePair,
    truth_speech,
    truth_noise,
    mixture_ref,
) -> LossBreakdown:
    """Supervised loss on simulated truth, with gradients."""
    leaves, speech, noise = _grad_leaves(estimates)
    terms = supervised_loss_tensors(speech, noise, truth_speech, truth_noise, mixture_ref)
    terms["total"].backward()
    return LossBreakdown(
        total=float(terms["total"].detach()),
        sup_target=float(terms["target"].detach()),
        sup_nontarget=float(terms["nontarget"].detach()),
        grad_speech=_collect_grad(leaves[0], leaves[1], "speech"),
        grad_noise=_collect_grad(leaves[2], leaves[3], "noise"),
    )
