"""Discrimination metrics between in- and out-distribution confidences.

The AUC uses the strict indicator Conf(in) > Conf(out): ties contribute
zero.  Feeding certified upper bounds on the out-confidences yields a
guaranteed lower bound on the worst-case AUC (GAUC); feeding attacked
confidences yields an empirical upper bound on it (AAUC).  The false
positive rate at fixed true positive rate follows the same substitution.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np


def auc(conf_in, conf_out, tie_half_credit=False):
    """Mean over all pairs of 1[conf_in > conf_out].

    Rank-based (sort + binary search), identical to the brute-force
    pairwise mean.  ``tie_half_credit`` switches to the conventional 0.5
    credit per tied pair for cross-tool comparison; off by default.
    """
    a = _checked(conf_in, "conf_in")
    b = _checked(conf_out, "conf_out")
    b_sorted = np.sort(b)
    strictly_below = np.searchsorted(b_sorted, a, side="left").sum()
    if tie_half_credit:
        ties = np.searchsorted(b_sorted, a, side="right").sum() - strictly_below
        return (float(strictly_below) + 0.5 * float(ties)) / (a.size * b.size)
    return float(strictly_below) / (a.size * b.size)


def auc_pairwise(conf_in, conf_out, tie_half_credit=False):
    """Quadratic reference evaluation of the same quantity."""
    a = _checked(conf_in, "conf_in")
    b = _checked(conf_out, "conf_out")
    cmp = a[:, None] > b[None, :]
    total = cmp.sum(dtype=np.int64)
    if tie_half_credit:
        total = float(total) + 0.5 * float((a[:, None] == b[None, :]).sum(dtype=np.int64))
    return float(total) / (a.size * b.size)


def gauc(conf_in, conf_out_ub):
    """AUC against certified per-sample confidence upper bounds.

    Since every bound dominates the best the adversary can reach for that
    sample, the result is a lower bound on the worst-case AUC.
    """
    return auc(conf_in, conf_out_ub)


def aauc(conf_in, conf_out_adv):
    """AUC against attacked confidences: an upper bound on the worst case
    (the attack includes the clean point, so it also never exceeds AUC)."""
    return auc(conf_in, conf_out_adv)


def fpr_at_tpr(conf_in, conf_out, tpr=0.95):
    """False positive rate at a fixed true positive rate.

    The threshold is the ceil(tpr*N)-th largest in-confidence: the largest
    value at which the fraction of in-samples >= threshold still reaches
    ``tpr``.  Both comparisons use >=.
    """
    a = _checked(conf_in, "conf_in")
    b = _checked(conf_out, "conf_out")
    if not 0.0 < tpr <= 1.0:
        raise ValueError("tpr must lie in (0, 1]")
    k = math.ceil(tpr * a.size)
    threshold = float(np.sort(a)[::-1][k - 1])
    fpr = float(np.mean(b >= threshold))
    return fpr, threshold


def _checked(arr, name):
    arr = np.asarray(arr, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    return arr


@dataclass
class ConfidenceSets:
    """Clean in-confidences plus clean / attacked / certified out-confidences."""
    conf_in: np.ndarray
    conf_out_clean: np.ndarray
    conf_out_adv: np.ndarray
    conf_out_ub: np.ndarray

    def validate(self, num_classes, tol=1e-6):
        k = num_classes
        for name in ("conf_in", "conf_out_clean", "conf_out_adv", "conf_out_ub"):
            v = getattr(self, name)
            if np.any(v < 1.0 / k - tol) or np.any(v > 1.0 + tol):
                raise ValueError(f"{name} outside [1/K, 1]")
        if np.any(self.conf_out_clean > self.conf_out_adv + tol):
            raise ValueError("attacked confidence fell below clean confidence")
        if np.any(self.conf_out_adv > self.conf_out_ub + tol):
            raise ValueError("attacked confidence exceeds certified bound")
        return self


REPORT_COLUMNS = ("out_dist", "Acc", "AUC", "GAUC", "AAUC", "FPR", "GFPR", "AFPR")


@dataclass
class EvalReport:
    """One row per out-distribution, Table-style columns."""
    rows: list = field(default_factory=list)

    def add(self, out_dist, acc, sets: ConfidenceSets):
        row = {
            "out_dist": out_dist,
            "Acc": acc,
            "AUC": auc(sets.conf_in, sets.conf_out_clean),
            "GAUC": gauc(sets.conf_in, sets.conf_out_ub),
            "AAUC": aauc(sets.conf_in, sets.conf_out_adv),
            "FPR": fpr_at_tpr(sets.conf_in, sets.conf_out_clean)[0],
            "GFPR": fpr_at_tpr(sets.conf_in, sets.conf_out_ub)[0],
            "AFPR": fpr_at_tpr(sets.conf_in, sets.conf_out_adv)[0],
        }
        self.check_orderings(row)
        self.rows.append(row)
        return row

    @staticmethod
    def check_orderings(row):
        # structural given the per-sample bound chain; a violation means
        # an interval-propagation or attack bug
        if not row["GAUC"] <= row["AAUC"] <= row["AUC"]:
            raise ValueError(f"AUC ordering violated: {row}")
        if not row["FPR"] <= row["AFPR"] <= row["GFPR"]:
            raise ValueError(f"FPR ordering violated: {row}")

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow([row["out_dist"]] + [repr(float(row[c])) for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"rows": self.rows}, sort_keys=True, indent=2) + "\n"
