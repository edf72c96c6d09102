"""Discrete-time hazard/survival math and cohort-level statistics.

All functions are pure and operate on plain numpy arrays or the small
dataclasses below; nothing here holds state, so everything is safe to
call concurrently.

Conventions: time is discretized into T bins indexed 0..T-1. A hazard
vector h gives the probability of death in bin t given survival up to
it, and the survival curve is the running product of (1 - h). Censorship
is 1 when the subject left the study alive (event time is only a lower
bound) and 0 when death was observed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_CLAMP = 1e-7


class UndefinedMetricError(ValueError):
    """A statistic has no defined value on this input (never silently 0)."""


@dataclass(frozen=True)
class SurvivalLabel:
    """Discretized follow-up for one subject."""

    event_bin: int
    censorship: int
    raw_time: float

    def __post_init__(self):
        if self.censorship not in (0, 1):
            raise ValueError(f"censorship must be 0 or 1, got {self.censorship}")
        if self.event_bin < 0:
            raise ValueError(f"event_bin must be nonnegative, got {self.event_bin}")
        if self.raw_time < 0:
            raise ValueError(f"raw_time must be nonnegative, got {self.raw_time}")


@dataclass(frozen=True)
class BinScheme:
    """Cut points splitting raw time into len(edges)+1 bins."""

    edges: tuple[float, ...]

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.size and not np.all(np.diff(e) > 0):
            raise ValueError("bin edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1

    def assign(self, raw_time) -> np.ndarray:
        """Map raw times to bin indices (times equal to an edge go up)."""
        return np.searchsorted(np.asarray(self.edges), raw_time, side="right")


@dataclass(frozen=True)
class HazardCurve:
    """Per-bin hazards and the survival curve they induce."""

    hazards: np.ndarray
    survival: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        h = np.asarray(self.hazards, dtype=float)
        object.__setattr__(self, "hazards", h)
        if self.survival is None:
            object.__setattr__(self, "survival", survival_from_hazard(h))
        else:
            s = np.asarray(self.survival, dtype=float)
            object.__setattr__(self, "survival", s)
            ref = survival_from_hazard(h)
            if s.shape != ref.shape or np.max(np.abs(s - ref)) > 1e-9:
                raise ValueError("survival curve inconsistent with hazards")

    @classmethod
    def from_hazards(cls, hazards) -> "HazardCurve":
        return cls(hazards=np.asarray(hazards, dtype=float))

    @classmethod
    def from_logits(cls, logits) -> "HazardCurve":
        return cls.from_hazards(sigmoid(np.asarray(logits, dtype=float)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def survival_from_hazard(hazards) -> np.ndarray:
    """Cumulative survival: out[t] = prod_{j<=t} (1 - hazards[j])."""
    h = np.asarray(hazards, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("hazards must be a nonempty 1-D vector")
    if np.any(h < 0) or np.any(h > 1) or not np.all(np.isfinite(h)):
        raise ValueError("hazards must lie in [0, 1]")
    return np.cumprod(1.0 - h)


def risk_score(curve: HazardCurve) -> float:
    """Scalar death risk: negated area under the discrete survival curve.

    Strictly decreasing in any single survival value, so curves with
    pointwise-dominating survival always score lower risk. The choice of
    scalar is a convention; swap here if a different summary is wanted.
    """
    return float(-np.sum(curve.survival))


def _validate_batch(hazard_logits, labels):
    logits = np.asarray(hazard_logits, dtype=float)
    if logits.ndim == 1:
        logits = logits[None, :]
    if logits.ndim != 2 or logits.shape[0] == 0 or logits.shape[1] == 0:
        raise ValueError("hazard_logits must be (batch, T) with a nonempty batch")
    labels = list(labels)
    if len(labels) != logits.shape[0]:
        raise ValueError(
            f"batch size mismatch: {logits.shape[0]} logit rows, {len(labels)} labels"
        )
    T = logits.shape[1]
    for lab in labels:
        if lab.event_bin >= T:
            raise ValueError(f"event_bin {lab.event_bin} out of range for T={T}")
    return logits, labels


def nll_surv_loss(hazard_logits, labels) -> float:
    """Negative log-likelihood of a discrete hazard model over a batch.

    Per subject with event bin t: censored subjects contribute
    -log s(t); observed deaths contribute -log s(t-1) - log h(t), with
    s(-1) = 1. Log arguments are clamped at LOG_CLAMP so boundary
    hazards keep the loss finite.
    """
    loss, _ = nll_surv_loss_and_grad(hazard_logits, labels)
    return loss


def nll_surv_loss_and_grad(hazard_logits, labels):
    """Loss plus its analytic gradient w.r.t. the hazard logits.

    Returns (loss, grad) with grad shaped like the (batch, T) logits.
    The gradient treats the log clamp exactly: a clamped term is locally
    constant and contributes zero.
    """
    logits, labels = _validate_batch(hazard_logits, labels)
    B, T = logits.shape
    h = sigmoid(logits)
    surv = np.cumprod(1.0 - h, axis=1)
    grad = np.zeros_like(logits)
    loss = 0.0
    for i, lab in enumerate(labels):
        t = lab.event_bin
        if lab.censorship == 1:
            s_t = surv[i, t]
            loss -= math.log(max(s_t, LOG_CLAMP))
            if s_t > LOG_CLAMP:
                grad[i, : t + 1] += h[i, : t + 1]
        else:
            s_prev = 1.0 if t == 0 else surv[i, t - 1]
            loss -= math.log(max(s_prev, LOG_CLAMP))
            loss -= math.log(max(h[i, t], LOG_CLAMP))
            if t > 0 and s_prev > LOG_CLAMP:
                grad[i, :t] += h[i, :t]
            if h[i, t] > LOG_CLAMP:
                grad[i, t] -= 1.0 - h[i, t]
    return float(loss), grad


def concordance_index(risks, labels) -> float:
    """Harrell's C over admissible pairs.

    A pair (i, j) is admissible when subject i died (censorship 0) and
    was observed strictly earlier than j's observed time; equal observed
    times are never admissible. Concordant pairs (risk_i > risk_j) count
    1, risk ties count 0.5.
    """
    risks = np.asarray(risks, dtype=float)
    labels = list(labels)
    n = risks.shape[0]
    if n != len(labels):
        raise ValueError("risks and labels length mismatch")
    if n < 2:
        raise UndefinedMetricError("need at least two subjects")
    times = np.array([lab.raw_time for lab in labels])
    events = np.array([lab.censorship == 0 for lab in labels])
    # admissible[i, j]: i an observed death, j observed strictly longer
    admissible = events[:, None] & (times[:, None] < times[None, :])
    n_pairs = int(admissible.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("no admissible pairs: C-index undefined")
    gt = risks[:, None] > risks[None, :]
    eq = risks[:, None] == risks[None, :]
    score = np.sum(gt & admissible) + 0.5 * np.sum(eq & admissible)
    return float(score / n_pairs)


def kaplan_meier(labels):
    """Product-limit survival estimate over raw times.

    Returns (times, survival): distinct event times in increasing order
    and the post-step survival value at each. Censored subjects leave
    the risk set without producing a step.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("empty cohort")
    times = np.array([lab.raw_time for lab in labels])
    events = np.array([lab.censorship == 0 for lab in labels])
    event_times = np.unique(times[events])
    surv = 1.0
    out_s = []
    for tau in event_times:
        at_risk = int(np.sum(times >= tau))
        deaths = int(np.sum(events & (times == tau)))
        surv *= 1.0 - deaths / at_risk
        out_s.append(surv)
    return event_times, np.array(out_s)


def log_rank_test(labels_a, labels_b):
    """Two-group log-rank test with 1 degree of freedom.

    Returns (chi_square, p_value). p is exact for df=1 via the
    complementary error function. Raises UndefinedMetricError when the
    variance accumulates to zero (e.g. no events anywhere).
    """
    labels_a, labels_b = list(labels_a), list(labels_b)
    if not labels_a or not labels_b:
        raise ValueError("both groups must be nonempty")
    t_a = np.array([lab.raw_time for lab in labels_a])
    e_a = np.array([lab.censorship == 0 for lab in labels_a])
    t_b = np.array([lab.raw_time for lab in labels_b])
    e_b = np.array([lab.censorship == 0 for lab in labels_b])
    event_times = np.unique(np.concatenate([t_a[e_a], t_b[e_b]]))
    delta = 0.0  # sum of (observed - expected) for group A
    var = 0.0
    for tau in event_times:
        n_a = int(np.sum(t_a >= tau))
        n_b = int(np.sum(t_b >= tau))
        d_a = int(np.sum(e_a & (t_a == tau)))
        d_b = int(np.sum(e_b & (t_b == tau)))
        n = n_a + n_b
        d = d_a + d_b
        # integer numerators keep the statistic exactly symmetric in (A, B)
        delta += (d_a * n_b - d_b * n_a) / n
        if n > 1:
            var += d * (n_a * n_b) * (n - d) / (n * n * (n - 1))
    if var <= 0:
        raise UndefinedMetricError("log-rank statistic undefined: zero variance")
    chi2 = delta * delta / var
    p = math.erfc(math.sqrt(chi2 / 2.0))
    return float(chi2), float(p)


def bin_times(raw_times, censorships, T: int) -> BinScheme:
    """Quantile bin edges over uncensored times, giving T near-equal bins."""
    raw_times = np.asarray(raw_times, dtype=float)
    censorships = np.asarray(censorships)
    if T < 1:
        raise ValueError(f"need at least one bin, got T={T}")
    unc = raw_times[censorships == 0]
    if len(np.unique(unc)) < T:
        raise ValueError(
            f"need at least {T} distinct uncensored times, got {len(np.unique(unc))}"
        )
    if T == 1:
        return BinScheme(edges=())
    qs = np.arange(1, T) / T
    edges = np.quantile(unc, qs)
    return BinScheme(edges=tuple(float(e) for e in edges))
