"""Bagging and multiclass AdaBoost (SAMME) over any trainable classifier.

A member is any object with ``predict_probs(X) -> (n, n_classes)`` for a
batch ``X``.  Trainers are plain callables ``trainer(dataset) -> member``
(or ``trainer(dataset, weights)`` when they take sample weights natively).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError


@dataclass
class WeightedEnsemble:
    members: list
    weights: list
    n_classes: int
    kind: str = "bagging"
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.members) != len(self.weights):
            raise ValueError(f"{len(self.members)} members but {len(self.weights)} weights")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("ensemble weights must be finite")

    def member_predictions(self, X):
        return np.stack([np.argmax(m.predict_probs(X), axis=-1) for m in self.members])

    def tally(self, X):
        """Weighted vote totals, shape ``(n, n_classes)``."""
        return weighted_tally(self.member_predictions(X), self.weights, self.n_classes)

    def predict(self, X):
        return np.argmax(self.tally(X), axis=-1)

    def predict_probs(self, X):
        t = self.tally(X)
        return t / t.sum(axis=-1, keepdims=True)


def weighted_tally(votes, weights, n_classes):
    """``votes`` is ``(M, n)`` member labels; returns ``(n, n_classes)`` totals."""
    votes = np.asarray(votes)
    n = votes.shape[1]
    out = np.zeros((n, n_classes))
    cols = np.arange(n)
    for m, w in enumerate(weights):
        np.add.at(out, (cols, votes[m]), w)
    return out


def _single(x):
    return np.asarray(x)[None]


def ensemble_vote(ensemble, x):
    """Label of one sample by weighted vote; ties go to the lowest class."""
    if not ensemble.members:
        raise ValueError("empty ensemble")
    return int(ensemble.predict(_single(x))[0])


def adaboost_predict(ensemble, x):
    """argmax_c sum_m alpha_m [member m predicts c] for one sample."""
    return ensemble_vote(ensemble, x)


def bootstrap_indices(n, rng):
    return rng.integers(0, n, size=n)


def bagging_train(trainer, M, dataset, rng):
    """``M`` members, each fit on a bootstrap replica of the full dataset size."""
    if M < 1:
        raise ValueError("bagging needs M >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot bag an empty dataset")
    members, replicas = [], []
    for m in range(M):
        idx = bootstrap_indices(n, rng)
        replicas.append(idx)
        try:
            members.append(trainer(dataset.subset(idx)))
        except Exception as exc:
            raise TrainingError(f"bagging member {m} failed: {exc}") from exc
    return WeightedEnsemble(members, [1.0] * M, dataset.n_classes, "bagging", {"replicas": replicas})


def samme_alpha(error, n_classes):
    """Member weight ``ln((1 - err) / err) + ln(K - 1)``."""
    return float(np.log((1.0 - error) / error) + np.log(n_classes - 1))


def adaboost_train(
    trainer, M, dataset, n_classes, rng, native_weights=False, max_retries=5, zero_error=1e-10
):
    """SAMME boosting for ``M`` rounds.

    Without native weight support the trainer sees a weighted bootstrap
    resample each round.  A member no better than chance (error at least
    ``1 - 1/K``) is discarded and the round retried; after ``max_retries``
    failures training stops with :class:`TrainingError`.  A perfect member
    ends training early with a large finite weight.
    """
    if n_classes < 2:
        raise ValueError("boosting needs at least 2 classes")
    n = len(dataset)
    w = np.full(n, 1.0 / n)
    chance = 1.0 - 1.0 / n_classes
    members, alphas = [], []
    weights_hist, errors = [w.copy()], []
    for m in range(M):
        for attempt in range(max_retries + 1):
            if native_weights:
                member = trainer(dataset, w)
            else:
                idx = rng.choice(n, size=n, replace=True, p=w)
                member = trainer(dataset.subset(idx))
            pred = np.argmax(member.predict_probs(dataset.volumes), axis=-1)
            miss = pred != dataset.labels
            err = float(np.sum(w[miss]))
            if err < chance:
                break
            errors.append(("rejected", m, attempt, err))
        else:
            raise TrainingError(
                f"boosting round {m}: {max_retries + 1} members at or below chance "
                f"(last weighted error {err:.4f}, chance level {chance:.4f})"
            )
        errors.append(("accepted", m, attempt, err))
        members.append(member)
        if err <= zero_error:
            alphas.append(samme_alpha(zero_error, n_classes))
            break
        alpha = samme_alpha(err, n_classes)
        alphas.append(alpha)
        w = w * np.exp(alpha * miss)
        w /= w.sum()
        weights_hist.append(w.copy())
    history = {"sample_weights": weights_hist, "errors": errors}
    return WeightedEnsemble(members, alphas, n_classes, "boosting", history)
