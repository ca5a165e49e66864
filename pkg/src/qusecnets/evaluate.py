"""Accuracy, confidence, and perturbation metrics for one (model, data, attack) triple."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeMismatchError
from .model import Model
from .serial import AdversarialBatch


@dataclass
class EvalReport:
    """One evaluation row; serializes to schema-stable JSON (nulls where N/A)."""

    clean_accuracy: float
    adv_accuracy: float | None
    mean_confidence_correct: float | None
    mean_confidence_incorrect: float | None
    l2_mean: float | None
    linf_max: float | None
    l0_mean: float | None
    per_class_accuracy: list
    config: dict

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "adv_accuracy": self.adv_accuracy,
            "mean_confidence_correct": self.mean_confidence_correct,
            "mean_confidence_incorrect": self.mean_confidence_incorrect,
            "l2_mean": self.l2_mean,
            "linf_max": self.linf_max,
            "l0_mean": self.l0_mean,
            "per_class_accuracy": self.per_class_accuracy,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def perturbation_stats(originals: np.ndarray, perturbed: np.ndarray):
    """(mean per-image L2, global max |delta|, mean fraction of pixels changed)."""
    originals = np.asarray(originals, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    if originals.shape != perturbed.shape:
        raise ShapeMismatchError(
            f"originals shape {originals.shape} != perturbed {perturbed.shape}")
    delta = (perturbed - originals).reshape(len(originals), -1)
    l2_mean = float(np.sqrt((delta * delta).sum(axis=1)).mean())
    linf_max = float(np.abs(delta).max(initial=0.0))
    l0_mean = float((np.abs(delta) > 1e-6).mean(axis=1).mean())
    return l2_mean, linf_max, l0_mean


def _predict_all(model: Model, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    probs = np.empty((len(images), model.num_classes))
    for start in range(0, len(images), chunk):
        probs[start:start + chunk] = model.forward_batch(images[start:start + chunk])
    return probs


def _accuracy_bits(probs: np.ndarray, labels: np.ndarray):
    preds = probs.argmax(axis=1)
    correct = preds == labels
    conf = probs[np.arange(len(probs)), preds]
    return preds, correct, conf


def _mean_or_none(values: np.ndarray):
    return float(values.mean()) if values.size else None


def evaluate(model: Model, dataset, adversarial: AdversarialBatch | None = None) -> EvalReport:
    """Clean accuracy over the dataset, plus adversarial stats when a batch is given.

    Confidence and per-class figures describe the adversarial pass when one
    is present, else the clean pass.
    """
    probs_clean = _predict_all(model, dataset.images)
    _, correct_clean, conf_clean = _accuracy_bits(probs_clean, dataset.labels)
    clean_accuracy = float(correct_clean.mean())

    adv_accuracy = l2_mean = linf_max = l0_mean = None
    if adversarial is not None:
        probs_adv = _predict_all(model, adversarial.perturbed)
        _, correct, conf = _accuracy_bits(probs_adv, adversarial.labels)
        adv_accuracy = float(correct.mean())
        l2_mean, linf_max, l0_mean = perturbation_stats(
            adversarial.originals, adversarial.perturbed)
        labels = adversarial.labels
        eps = adversarial.spec.get("epsilon")
        if adversarial.spec.get("kind") in ("fgsm", "cw_l2") and eps is not None:
            if linf_max > eps + 1e-12:
                raise DataError(
                    f"perturbation linf {linf_max} exceeds declared budget {eps}")
    else:
        correct, conf, labels = correct_clean, conf_clean, dataset.labels

    per_class = []
    for cls in range(model.num_classes):
        members = labels == cls
        per_class.append(float(correct[members].mean()) if members.any() else None)

    config = {
        "defense": model.config.defense,
        "levels": model.config.levels,
        "steepness": model.config.steepness,
        "loss": model.config.loss,
        "seed": model.config.seed,
        "dataset": {"name": dataset.name, "split": dataset.split, "size": len(dataset)},
        "attack": dict(adversarial.spec) if adversarial is not None else None,
    }
    model.clear_buffers()
    return EvalReport(
        clean_accuracy=clean_accuracy,
        adv_accuracy=adv_accuracy,
        mean_confidence_correct=_mean_or_none(conf[correct]),
        mean_confidence_incorrect=_mean_or_none(conf[~correct]),
        l2_mean=l2_mean,
        linf_max=linf_max,
        l0_mean=l0_mean,
        per_class_accuracy=per_class,
        config=config,
    )
