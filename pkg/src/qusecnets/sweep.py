"""Level/epsilon sweeps with cached model training."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

from .attacks import AttackSpec, generate_batch
from .evaluate import EvalReport, evaluate
from .model import Model, ModelConfig, build_model, train
from .serial import load_weights, save_weights


def _train_key(config: ModelConfig, epochs, batch_size, lr, train_seed, dataset) -> str:
    h = hashlib.sha256()
    h.update(config.canonical_text().encode())
    h.update(f"|{epochs}|{batch_size}|{lr}|{train_seed}".encode())
    h.update(f"|{dataset.name}|{dataset.split}|{len(dataset)}|".encode())
    h.update(dataset.labels.tobytes())
    h.update(dataset.images.tobytes())
    return h.hexdigest()[:24]


class ModelCache:
    """Train-once store for sweep configurations.

    Hits come from memory first, then from weight files under cache_dir
    (when given). Every lookup appends ("trained"|"cached", key) to events,
    which is how tests verify that a second sweep does no retraining.
    """

    def __init__(self, cache_dir=None):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, Model] = {}
        self.events: list[tuple[str, str]] = []

    def get_or_train(self, config: ModelConfig, train_set, epochs: int,
                     batch_size: int = 64, lr: float = 0.01,
                     train_seed: int = 0) -> Model:
        key = _train_key(config, epochs, batch_size, lr, train_seed, train_set)
        if key in self._memory:
            self.events.append(("cached", key))
            return self._memory[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key}.qsn"
            if path.exists():
                model = load_weights(path)
                self._memory[key] = model
                self.events.append(("cached", key))
                return model
        model = build_model(config)
        train(model, train_set, epochs=epochs, batch_size=batch_size,
              lr=lr, seed=train_seed)
        self._memory[key] = model
        if self.cache_dir is not None:
            save_weights(model, self.cache_dir / f"{key}.qsn")
        self.events.append(("trained", key))
        return model


@dataclass
class SweepRow:
    levels: int
    epsilon: float
    report: EvalReport


@dataclass
class SweepResult:
    rows: list
    recommended_levels: int
    events: list


def sweep(base_config: ModelConfig, levels: list, epsilons: list,
          attack_kind: str, train_set, test_set, epochs: int = 5,
          batch_size: int = 64, lr: float = 0.01, train_seed: int = 0,
          cache: ModelCache | None = None, attack_params: dict | None = None) -> SweepResult:
    """Train (or reuse) one defended model per level count, attack per epsilon.

    Emits the full levels x epsilons cross-product and recommends the level
    count with the highest mean adversarial accuracy (ties to the smaller n).
    """
    if not levels or not epsilons:
        raise ValueError("levels and epsilons must be non-empty")
    if cache is None:
        cache = ModelCache()
    attack_params = dict(attack_params or {})
    rows = []
    mean_adv = {}
    for n in levels:
        config = replace(base_config, levels=n)
        model = cache.get_or_train(config, train_set, epochs=epochs,
                                   batch_size=batch_size, lr=lr,
                                   train_seed=train_seed)
        accs = []
        for eps in epsilons:
            spec = AttackSpec(kind=attack_kind, epsilon=eps, **attack_params)
            batch = generate_batch(model, test_set.images, test_set.labels, spec)
            report = evaluate(model, test_set, adversarial=batch)
            rows.append(SweepRow(levels=n, epsilon=eps, report=report))
            accs.append(report.adv_accuracy)
        model.clear_buffers()
        mean_adv[n] = sum(accs) / len(accs)
    recommended = max(sorted(mean_adv), key=lambda n: mean_adv[n])
    return SweepResult(rows=rows, recommended_levels=recommended,
                       events=list(cache.events))


def sweep_to_csv(result: SweepResult, path) -> None:
    """One row per (levels, epsilon) cell; diff-friendly chart source."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "levels", "epsilon", "clean_accuracy", "adv_accuracy",
            "mean_confidence_correct", "mean_confidence_incorrect",
            "l2_mean", "linf_max", "l0_mean",
        ])
        for row in result.rows:
            r = row.report
            writer.writerow([
                row.levels, row.epsilon, r.clean_accuracy, r.adv_accuracy,
                r.mean_confidence_correct, r.mean_confidence_incorrect,
                r.l2_mean, r.linf_max, r.l0_mean,
            ])
        writer.writerow(["recommended_levels", result.recommended_levels,
                         "", "", "", "", "", "", ""])
