"""Grading metrics on a toy 5-class problem, with a bootstrap CI."""

import numpy as np

from kneegrade.metrics import (average_precision, balanced_accuracy, binarize_probs,
                               bootstrap_ci, cohen_kappa, f1_macro, mse_grades, roc_auc)

if __name__ == "__main__":
    rng = np.random.default_rng(42)
    n, k = 400, 5
    y = rng.integers(0, k, size=n)
    # simulate a decent but imperfect grader: right answer gets the biggest logit
    logits = rng.normal(size=(n, k))
    logits[np.arange(n), y] += 1.5
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    pred = probs.argmax(axis=1)

    print("quadratic kappa ", round(cohen_kappa(y, pred, k, weighting="quadratic"), 4))
    print("linear kappa    ", round(cohen_kappa(y, pred, k, weighting="linear"), 4))
    print("balanced acc (%)", round(balanced_accuracy(y, pred, k), 2))
    print("macro F1        ", round(f1_macro(y, pred, k), 4))
    print("grade MSE       ", round(mse_grades(y, pred, k), 4))

    # collapse to "grade >= 2" and score the ranking
    labels, scores = binarize_probs(y, probs, threshold_grade=2)
    print("ROC AUC         ", round(roc_auc(labels, scores), 4))
    print("avg precision   ", round(average_precision(labels, scores), 4))

    ci = bootstrap_ci(lambda t, p: cohen_kappa(t, p, k, weighting="quadratic"),
                      y, pred, n_iterations=200, level=0.95, seed=7)
    print(f"kappa {ci.point:.4f}  95% CI [{ci.lo:.4f}, {ci.hi:.4f}] "
          f"({ci.n_bootstrap} resamples)")
