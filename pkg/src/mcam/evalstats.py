"""Classification metrics and the one-sided paired t-test.

The Student-t CDF goes through the regularized incomplete beta function,
evaluated with a modified-Lentz continued fraction.
"""

import math

import numpy as np

from mcam.errors import ContractError, DegenerateSampleError, ValidationError


def confusion_matrix(y_true, y_pred, n_classes=4):
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def metrics(cm):
    """Accuracy plus macro-averaged one-vs-rest specificity and F1.

    Per-class precision or recall with a zero denominator count as 0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or total <= 0:
        raise ContractError("confusion matrix must be square with a positive total")
    if (cm < 0).any():
        raise ValidationError("confusion matrix has negative counts")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    spec = np.divide(tn, tn + fp, out=np.zeros_like(tn), where=(tn + fp) > 0)
    prec = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    rec = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    f1 = np.divide(2 * prec * rec, prec + rec, out=np.zeros_like(tp), where=(prec + rec) > 0)
    return {"accuracy": float(tp.sum() / total), "specificity": float(spec.mean()),
            "f1": float(f1.mean())}


# ---------------------------------------------------------------- Student t


def _betacf(a, b, x, max_iter=500, tol=1e-16):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValidationError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
           + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(lbt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def t_cdf(t, df):
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValidationError(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 0.5
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


def t_pdf(t, df):
    lc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(lc - (df + 1) / 2 * math.log1p(t * t / df))


def paired_t_test(a, b):
    """One-sided paired t-test of H1: mean(a) < mean(b).

    Differences are ``b - a``; returns dict(t, p, n, df, mean_diff).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValidationError(f"need two equal-length samples with n >= 2, got {a.shape} and {b.shape}")
    d = b - a
    n = d.size
    sd = d.std(ddof=1)
    if not sd > 1e-12 * max(1.0, float(np.abs(d).max())):
        raise DegenerateSampleError(
            "paired differences are (numerically) identical, so the t statistic is undefined; "
            "add subjects or repetitions, or compare variants that differ")
    t = float(d.mean() / (sd / math.sqrt(n)))
    # 1 - T(t) evaluated as T(-t) to keep precision in the far tail
    return {"t": t, "p": t_cdf(-t, n - 1), "n": int(n), "df": int(n - 1),
            "mean_diff": float(d.mean())}
