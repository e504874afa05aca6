"""Token error rates and relative WER reduction."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class WerBreakdown:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_tokens: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        # An empty reference would divide by zero; count errors against one token instead.
        return self.errors / max(self.ref_tokens, 1)

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(self.substitutions + other.substitutions, self.deletions + other.deletions,
                            self.insertions + other.insertions, self.ref_tokens + other.ref_tokens)

    def as_dict(self) -> dict:
        return {"wer": self.wer, "S": self.substitutions, "D": self.deletions,
                "I": self.insertions, "N": self.ref_tokens}


def edit_distance(ref, hyp) -> WerBreakdown:
    """Unit-cost Levenshtein alignment.

    Traceback prefers match, then substitution, then deletion, then
    insertion, so the S/D/I split is deterministic.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + cost, d[i - 1][j] + 1, d[i][j - 1] + 1)
    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i][j] == d[i - 1][j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + 1:
            S += 1
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return WerBreakdown(S, D, I, n)


def wer(refs: dict, hyps: dict) -> WerBreakdown:
    """Pooled error counts over utterances keyed by id."""
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))
        raise ValueError(f"reference and hypothesis ids differ: {missing[:5]}")
    total = WerBreakdown()
    for key in refs:
        total = total + edit_distance(refs[key], hyps[key])
    return total


def werr(baseline: dict, candidate: dict) -> float:
    """Unweighted mean over test sets of relative WER reduction, in percent."""
    if set(baseline) != set(candidate):
        raise ValueError("baseline and candidate cover different test sets")
    rel = []
    for key, b in baseline.items():
        if b <= 0:
            raise ValueError(f"baseline WER for {key!r} must be positive")
        rel.append((b - candidate[key]) / b)
    return 100.0 * sum(rel) / len(rel)


def metrics_report(breakdowns: dict, baseline_wers: dict | None = None) -> dict:
    report = {name: b.as_dict() for name, b in breakdowns.items()}
    if baseline_wers is not None:
        report["werr"] = werr(baseline_wers, {k: b.wer for k, b in breakdowns.items() if k in baseline_wers})
    return report
