"""Signal-level metrics, embedding statistics and evaluation reports.

Metrics take one recording (any shape, flattened) or a batch ``(n, ...)`` via
the ``*_per_recording`` helpers.  An undefined value (zero variance for
Pearson, a zero vector for cosine) is reported as NaN and counted as missing
when averaging rather than raising.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ReportError

METRICS = ("mse", "pearson", "cosine")
CSV_HEADER = ("subject", "protocol", "stage", "mse", "pearson", "cosine")
QUANTILES = (0.01, 0.25, 0.5, 0.75, 0.99)
MISSING = float("nan")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"metric operands differ in size: {a.size} vs {b.size}")
    return a, b


def pearson(x, y) -> float:
    """Correlation over all elements of one recording; NaN when either side is constant."""
    a, b = _pair(x, y)
    if a.size < 2:
        raise DimensionError("pearson needs at least two values")
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        return MISSING
    r = float(a @ b) / math.sqrt(saa * sbb)
    return max(-1.0, min(1.0, r))


def cosine(x, y) -> float:
    """Cosine similarity; NaN when either vector is zero."""
    a, b = _pair(x, y)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return MISSING
    return max(-1.0, min(1.0, float(a @ b) / (na * nb)))


def mse(x, y) -> float:
    a, b = _pair(x, y)
    d = a - b
    return float(d @ d) / d.size


_FUNCS = {"mse": mse, "pearson": pearson, "cosine": cosine}


def per_recording(metric: str, pred, truth) -> np.ndarray:
    """One value per leading-axis recording."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    fn = _FUNCS[metric]
    return np.array([fn(p, t) for p, t in zip(pred, truth)], dtype=np.float64)


@dataclass(frozen=True)
class MetricTriple:
    mse: float
    pearson: float
    cosine: float
    n: int = 0
    missing: int = 0      # recordings whose pearson or cosine was undefined


def evaluate_batch(pred, truth) -> MetricTriple:
    """Per-recording metrics averaged over the batch, skipping undefined values."""
    vals = {m: per_recording(m, pred, truth) for m in METRICS}
    undefined = np.isnan(vals["pearson"]) | np.isnan(vals["cosine"])

    def avg(v):
        ok = v[~np.isnan(v)]
        return float(ok.mean()) if ok.size else MISSING

    return MetricTriple(avg(vals["mse"]), avg(vals["pearson"]), avg(vals["cosine"]),
                        n=len(vals["mse"]), missing=int(undefined.sum()))


@dataclass(frozen=True)
class EmbeddingStats:
    mean: float
    std: float
    median: float
    q25: float
    q75: float
    q01: float
    q99: float
    count: int = 0

    def as_row(self) -> dict[str, float]:
        return {"mean": self.mean, "std": self.std, "median": self.median, "q25": self.q25,
                "q75": self.q75, "q01": self.q01, "q99": self.q99}


def embedding_stats(values) -> EmbeddingStats:
    """Pooled statistics with population std and linearly interpolated quantiles."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DimensionError("embedding_stats needs at least one value")
    q01, q25, med, q75, q99 = np.quantile(v, QUANTILES, method="linear")
    mean = float(v.mean())
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    return EmbeddingStats(mean, std, float(med), float(q25), float(q75), float(q01), float(q99), int(v.size))


@dataclass(frozen=True)
class BridgeReport:
    stds: tuple[float, float, float]       # clip, proxy, latent
    proxy_over_clip: float
    latent_over_proxy: float
    passed: bool

    def message(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (f"{verdict}: std clip {self.stds[0]:.4g} < proxy {self.stds[1]:.4g} < latent {self.stds[2]:.4g}; "
                f"proxy/clip {self.proxy_over_clip:.3g}x, latent/proxy {self.latent_over_proxy:.3g}x")

    def require(self) -> "BridgeReport":
        if not self.passed:
            raise ContractError(self.message())
        return self


def _std_of(s) -> float:
    return float(s.std) if isinstance(s, EmbeddingStats) else float(s)


def scale_bridge_check(clip, proxy, latent) -> BridgeReport:
    """Strict ordering ``std(clip) < std(proxy) < std(latent)`` and the two scale ratios.

    Accepts :class:`EmbeddingStats` or bare std values.
    """
    c, p, z = _std_of(clip), _std_of(proxy), _std_of(latent)
    ratio = lambda num, den: num / den if den > 0 else math.inf
    return BridgeReport((c, p, z), ratio(p, c), ratio(z, p), bool(c < p < z))


@dataclass(frozen=True)
class ReportRow:
    subject: str
    protocol: str
    stage: str
    mse: float
    pearson: float
    cosine: float


@dataclass
class EvalReport:
    """Per-subject metric rows; :meth:`averaged` appends one mean row per (protocol, stage)."""

    rows: list[ReportRow] = field(default_factory=list)
    notes: dict[str, str] = field(default_factory=dict)

    def add(self, subject: str, protocol: str, stage: str, triple: MetricTriple) -> None:
        self.rows.append(ReportRow(subject, protocol, stage, triple.mse, triple.pearson, triple.cosine))

    def groups(self) -> list[tuple[str, str]]:
        seen = []
        for r in self.rows:
            if (r.protocol, r.stage) not in seen:
                seen.append((r.protocol, r.stage))
        return seen

    def averaged(self) -> list[ReportRow]:
        out = []
        for protocol, stage in self.groups():
            rows = [r for r in self.rows if (r.protocol, r.stage) == (protocol, stage)]
            means = [float(np.mean([getattr(r, m) for r in rows])) for m in METRICS]
            out.append(ReportRow("mean", protocol, stage, *means))
        return out

    def to_csv(self, include_mean: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows + (self.averaged() if include_mean else []):
            writer.writerow([r.subject, r.protocol, r.stage] + [_fmt(getattr(r, m)) for m in METRICS])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ReportError(f"unexpected report header {header}")
        rows = [ReportRow(a, b, c, float(d), float(e), float(f)) for a, b, c, d, e, f in reader if a != "mean"]
        return EvalReport(rows)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def require_subjects(expected: Iterable[int], present: Iterable[int]) -> None:
    missing = sorted(set(expected) - set(present))
    if missing:
        raise ReportError(f"missing subjects: {', '.join(f'sub-{s + 1:02d}' for s in missing)}")


def stats_table(families: Mapping[str, EmbeddingStats]) -> str:
    """Table-style CSV: one row per statistic, one column per embedding family."""
    names = list(families)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["statistic"] + names)
    for stat in ("mean", "std", "median", "q25", "q75", "q01", "q99"):
        writer.writerow([stat] + [f"{getattr(families[n], stat):.4f}" for n in names])
    writer.writerow(["count"] + [families[n].count for n in names])
    return buf.getvalue()


def _symlog(v: np.ndarray, linthresh: float) -> np.ndarray:
    return np.sign(v) * np.log10(1.0 + np.abs(v) / linthresh)


def boxplot_svg(groups: Mapping[str, Sequence[float]], title: str = "", linthresh: float = 1e-2,
                width: int = 640, height: int = 360) -> str:
    """Static box plot of each group on a symmetric-log axis, as an SVG string."""
    labels = list(groups)
    data = [np.asarray([v for v in groups[k] if not math.isnan(v)], dtype=np.float64) for k in labels]
    if not labels or any(d.size == 0 for d in data):
        raise ReportError("every box needs at least one finite value")
    scaled = [_symlog(d, linthresh) for d in data]
    lo = min(float(s.min()) for s in scaled)
    hi = max(float(s.max()) for s in scaled)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 50
    plot_h = height - pad_t - pad_b
    step = (width - pad_l - pad_r) / len(labels)
    y = lambda s: pad_t + plot_h * (hi - s) / (hi - lo)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{_escape(title)}</text>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>']
    for tick in np.linspace(lo, hi, 5):
        value = np.sign(tick) * linthresh * (10 ** abs(tick) - 1.0)
        out.append(f'<text x="{pad_l - 4}" y="{y(tick) + 4:.1f}" text-anchor="end">{value:.3g}</text>')
    for n, (label, s) in enumerate(zip(labels, scaled)):
        cx = pad_l + step * (n + 0.5)
        half = step * 0.3
        q1, med, q3 = np.quantile(s, (0.25, 0.5, 0.75))
        out.append(f'<line x1="{cx:.1f}" y1="{y(s.min()):.1f}" x2="{cx:.1f}" y2="{y(s.max()):.1f}" stroke="black"/>')
        out.append(f'<rect x="{cx - half:.1f}" y="{y(q3):.1f}" width="{2 * half:.1f}" '
                   f'height="{max(y(q1) - y(q3), 0.5):.1f}" fill="#9ecae1" stroke="black"/>')
        out.append(f'<line x1="{cx - half:.1f}" y1="{y(med):.1f}" x2="{cx + half:.1f}" y2="{y(med):.1f}" '
                   f'stroke="#d62728" stroke-width="2"/>')
        out.append(f'<text x="{cx:.1f}" y="{height - pad_b + 16}" text-anchor="middle">{_escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
