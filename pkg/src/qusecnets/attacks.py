"""Adversarial example generation: FGSM, JSMA, and C&W-L2.

All three are white-box: gradients flow through the quantization layer
analytically when a defense is present (no gradient-masking shortcut).
Black-box transfer wraps white-box generation against a substitute model.
Attacks are deterministic given (model, input, spec).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model
from .serial import AdversarialBatch

ATTACK_KINDS = ("fgsm", "jsma", "cw_l2")


@dataclass
class AttackSpec:
    """Attack kind plus its hyperparameters; unused fields are ignored."""

    kind: str
    epsilon: float = 0.3
    iterations: int = 100
    targeted: bool = False
    target_class: int | None = None
    kappa: float = 0.0          # cw_l2 confidence margin
    c: float = 1.0              # cw_l2 trade-off constant
    theta: float = 1.0          # jsma per-step pixel change
    gamma: float = 0.1          # jsma max fraction of pixels modified
    step_size: float = 0.01     # cw_l2 descent step in tanh space

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0,1], got {self.epsilon}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "epsilon": self.epsilon,
            "iterations": self.iterations, "targeted": self.targeted,
            "target_class": self.target_class, "kappa": self.kappa,
            "c": self.c, "theta": self.theta, "gamma": self.gamma,
            "step_size": self.step_size,
        }


@dataclass
class AdversarialExample:
    """One attacked image with bookkeeping for reporting."""

    original: np.ndarray
    perturbed: np.ndarray
    true_label: int
    predicted_label_before: int
    predicted_label_after: int
    confidence_after: float
    success: bool
    iterations_used: int = 0


def _finish(model: Model, x, x_adv, true_label, pred_before, iterations,
            target_class=None) -> AdversarialExample:
    probs_after = model.predict(x_adv)
    pred_after = int(probs_after.argmax())
    if target_class is not None:
        success = pred_after == target_class
    else:
        success = pred_after != true_label
    return AdversarialExample(
        original=np.asarray(x, dtype=np.float64).copy(),
        perturbed=x_adv,
        true_label=int(true_label),
        predicted_label_before=pred_before,
        predicted_label_after=pred_after,
        confidence_after=float(probs_after[pred_after]),
        success=success,
        iterations_used=iterations,
    )


# ---------------------------------------------------------------------------
# FGSM
# ---------------------------------------------------------------------------

def fgsm_batch(model: Model, images: np.ndarray, labels: np.ndarray,
               spec: AttackSpec, chunk: int = 64) -> np.ndarray:
    """x + epsilon * sign(d loss/d x), clamped to [0,1]; sign(0) = 0."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.empty_like(images)
    for start in range(0, len(images), chunk):
        xb = images[start:start + chunk]
        yb = labels[start:start + chunk]
        grad = model.input_gradient_batch(xb, yb)
        if not np.all(np.isfinite(grad)):
            raise RuntimeError(f"non-finite FGSM gradient in images {start}..{start + len(xb)}")
        out[start:start + chunk] = np.clip(xb + spec.epsilon * np.sign(grad), 0.0, 1.0)
    return out


def fgsm(model: Model, x: np.ndarray, true_label: int, spec: AttackSpec) -> AdversarialExample:
    """Single-image FGSM against the model's configured training loss."""
    x = np.asarray(x, dtype=np.float64)
    pred_before = int(model.predict(x).argmax())
    x_adv = fgsm_batch(model, x[None], np.array([true_label]), spec)[0]
    return _finish(model, x, x_adv, true_label, pred_before, iterations=1)


# ---------------------------------------------------------------------------
# JSMA (targeted, increasing features, pixel pairs)
# ---------------------------------------------------------------------------

def jsma(model: Model, x: np.ndarray, target_class: int, spec: AttackSpec,
         true_label: int | None = None) -> AdversarialExample:
    """Saliency-map attack: flood the most target-salient pixel pair by theta.

    Stops at success, the iteration cap, or once gamma * pixel-count pixels
    have been modified. Rejects non-targeted specs.
    """
    if not spec.targeted:
        raise ValueError("jsma requires a targeted AttackSpec")
    x = np.asarray(x, dtype=np.float64)
    n_pixels = x.size
    pred_before = int(model.predict(x).argmax())
    if true_label is None:
        true_label = pred_before
    if target_class == true_label:
        raise ValueError("jsma target_class must differ from the true label")
    budget = int(np.floor(spec.gamma * n_pixels))
    x_adv = x.copy()
    flat = x_adv.reshape(-1)
    modified = np.zeros(n_pixels, dtype=bool)
    iterations = 0
    for _ in range(spec.iterations):
        if int(model.predict(x_adv).argmax()) == target_class:
            break
        if modified.sum() >= budget:
            break
        jac = model.probability_jacobian(x_adv).reshape(model.num_classes, n_pixels)
        alpha = jac[target_class]
        beta = jac.sum(axis=0) - alpha
        domain = flat < 1.0  # increasing features only; saturated pixels leave
        pick = _saliency_pair(alpha, beta, domain)
        if pick is None:
            break
        new = [p for p in pick if not modified[p]]
        if modified.sum() + len(new) > budget:
            break
        iterations += 1
        for p in pick:
            flat[p] = min(1.0, flat[p] + spec.theta)
            modified[p] = True
    return _finish(model, x, x_adv, true_label, pred_before, iterations,
                   target_class=target_class)


def _saliency_pair(alpha: np.ndarray, beta: np.ndarray, domain: np.ndarray):
    """Most salient eligible pixel pair: max (a_p+a_q)|b_p+b_q| with a>0, b<0.

    Falls back to the best single pixel when no positive-saliency pair
    exists; returns None when nothing is eligible.
    """
    idx = np.flatnonzero(domain)
    if idx.size == 0:
        return None
    a = alpha[idx]
    b = beta[idx]
    if idx.size >= 2:
        pair_a = a[:, None] + a[None, :]
        pair_b = b[:, None] + b[None, :]
        valid = (pair_a > 0.0) & (pair_b < 0.0)
        np.fill_diagonal(valid, False)
        if valid.any():
            scores = np.where(valid, pair_a * -pair_b, -np.inf)
            p, q = np.unravel_index(int(scores.argmax()), scores.shape)
            return int(idx[p]), int(idx[q])
    single = (a > 0.0) & (b < 0.0)
    if single.any():
        scores = np.where(single, a * -b, -np.inf)
        return (int(idx[int(scores.argmax())]),)
    return None


# ---------------------------------------------------------------------------
# C&W-L2 (tanh reparameterization, fixed-step descent, single c)
# ---------------------------------------------------------------------------

_ATANH_CLIP = 1.0 - 1e-12


def _to_tanh_space(x: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(2.0 * x - 1.0, -_ATANH_CLIP, _ATANH_CLIP))


def _from_tanh_space(w: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(w) + 1.0)


def _cw_optimize(model: Model, images: np.ndarray, pivots: np.ndarray,
                 spec: AttackSpec):
    """Shared C&W descent over a batch; returns (perturbed, objective trace).

    pivots[i] is the target class when spec.targeted, else the true class
    the attack pushes away from. The epsilon box is enforced every step by
    clipping in tanh space (monotone, so equivalent to the pixel-space
    projection). Trace has shape (iterations, N).
    """
    x0 = np.asarray(images, dtype=np.float64)
    n = len(x0)
    pivots = np.asarray(pivots)
    lo = np.maximum(x0 - spec.epsilon, 0.0)
    hi = np.minimum(x0 + spec.epsilon, 1.0)
    w_lo, w_hi = _to_tanh_space(lo), _to_tanh_space(hi)
    w = np.clip(_to_tanh_space(x0), w_lo, w_hi)
    rows = np.arange(n)
    objectives = np.empty((spec.iterations, n))
    for step in range(spec.iterations):
        x_adv = _from_tanh_space(w)
        probs, cache = model.forward_batch(x_adv, keep_cache=True)
        logits = cache["logits"]
        z_pivot = logits[rows, pivots]
        masked = logits.copy()
        masked[rows, pivots] = -np.inf
        best_other = masked.argmax(axis=1)
        z_other = logits[rows, best_other]
        diff = (z_other - z_pivot) if spec.targeted else (z_pivot - z_other)
        margin = np.maximum(diff, -spec.kappa)
        delta = x_adv - x0
        obj = (delta * delta).reshape(n, -1).sum(axis=1) + spec.c * margin
        if not np.all(np.isfinite(obj)):
            raise RuntimeError(f"cw_l2 objective diverged at step {step}")
        objectives[step] = obj
        d_logits = np.zeros_like(logits)
        active = diff > -spec.kappa
        sgn = 1.0 if spec.targeted else -1.0
        d_logits[rows[active], best_other[active]] = sgn * spec.c
        d_logits[rows[active], pivots[active]] = -sgn * spec.c
        _, d_model = model.backward_batch(cache, d_logits,
                                          need_param_grads=False,
                                          need_input_grad=True)
        d_x = 2.0 * delta + d_model
        d_w = d_x * 0.5 * (1.0 - np.tanh(w) ** 2)
        w = np.clip(w - spec.step_size * d_w, w_lo, w_hi)
    x_adv = _from_tanh_space(w) if spec.iterations > 0 else x0.copy()
    # exact budget contract regardless of float round-trip noise
    x_adv = np.clip(x0 + np.clip(x_adv - x0, -spec.epsilon, spec.epsilon), 0.0, 1.0)
    return x_adv, objectives


def cw_l2(model: Model, x: np.ndarray, target_class: int,
          spec: AttackSpec) -> AdversarialExample:
    """L2-minimizing attack; target_class is the margin pivot.

    When spec.targeted, the attack drives the prediction toward
    target_class; otherwise target_class is interpreted as the true label
    being pushed away from.
    """
    x = np.asarray(x, dtype=np.float64)
    pred_before = int(model.predict(x).argmax())
    x_adv, _ = _cw_optimize(model, x[None], np.array([target_class]), spec)
    return _finish(model, x, x_adv[0],
                   true_label=target_class if not spec.targeted else pred_before,
                   pred_before=pred_before,
                   iterations=spec.iterations,
                   target_class=target_class if spec.targeted else None)


# ---------------------------------------------------------------------------
# Batch generation and black-box transfer
# ---------------------------------------------------------------------------

def next_class_targets(labels: np.ndarray, num_classes: int = 10) -> np.ndarray:
    """Default target assignment for targeted attacks: the next class mod C."""
    return (np.asarray(labels) + 1) % num_classes


def generate_batch(model: Model, images: np.ndarray, labels: np.ndarray,
                   spec: AttackSpec) -> AdversarialBatch:
    """Attack a whole set of images and package the result for evaluation."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if spec.kind == "fgsm":
        perturbed = fgsm_batch(model, images, labels, spec)
    elif spec.kind == "cw_l2":
        if spec.targeted:
            pivots = (np.full(len(labels), spec.target_class)
                      if spec.target_class is not None
                      else next_class_targets(labels, model.num_classes))
        else:
            pivots = labels
        perturbed, _ = _cw_optimize(model, images, pivots, spec)
    else:  # jsma
        targets = (np.full(len(labels), spec.target_class)
                   if spec.target_class is not None
                   else next_class_targets(labels, model.num_classes))
        perturbed = np.empty_like(images)
        for i in range(len(images)):
            ex = jsma(model, images[i], int(targets[i]), spec,
                      true_label=int(labels[i]))
            perturbed[i] = ex.perturbed
    return AdversarialBatch(originals=images.copy(), perturbed=perturbed,
                            labels=labels.copy(), spec=spec.to_dict())


def transfer_attack(substitute: Model, victim: Model, spec: AttackSpec,
                    dataset) -> "EvalReport":
    """Black-box setting: craft against the substitute, measure on the victim."""
    from .evaluate import evaluate

    if substitute.config.input_shape != victim.config.input_shape:
        raise ValueError(
            f"substitute input shape {substitute.config.input_shape} != "
            f"victim {victim.config.input_shape}")
    batch = generate_batch(substitute, dataset.images, dataset.labels, spec)
    return evaluate(victim, dataset, adversarial=batch)
