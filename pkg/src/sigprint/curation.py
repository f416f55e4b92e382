"""Relationship labels, per-label distance distributions, KS tests and outlier flags."""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateImageId,
    EmptySample,
    InsufficientDistribution,
    IoFailure,
    LabelCoverageGap,
    MissingMetadata,
)

SMALL_LAMBDA = 0.2
MAD_SCALE = 1.4826  # MAD to std for a normal sample
METADATA_HEADER = ["image_id", "subject_id", "family_id", "zygosity", "age", "dataset_tag"]


class RelationshipLabel(str, enum.Enum):
    SM = "SM"  # same subject
    MZ = "MZ"  # monozygotic twins
    DZ = "DZ"  # dizygotic twins
    FS = "FS"  # full siblings
    UR = "UR"  # unrelated


class Verdict(str, enum.Enum):
    SAME_LABELED_OTHER = "suspected-same-labeled-other"
    OTHER_LABELED_SAME = "suspected-other-labeled-same"
    EXACT_DUPLICATE = "exact-duplicate"


def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class CohortRow:
    image_id: str
    subject_id: str
    family_id: str | None = None
    zygosity: str | None = None  # MZ | DZ | None
    age: float | None = None
    dataset_tag: str | None = None


class CohortMetadata:
    def __init__(self, rows):
        self.rows = list(rows)
        self._by_id = {}
        for r in self.rows:
            if r.image_id in self._by_id:
                raise DuplicateImageId(f"image id {r.image_id!r} appears twice in the metadata")
            if not r.image_id or not r.subject_id:
                raise MissingMetadata(f"row {r!r} lacks an image or subject id")
            self._by_id[r.image_id] = r

    def __len__(self):
        return len(self.rows)

    def __contains__(self, image_id):
        return image_id in self._by_id

    def __getitem__(self, image_id) -> CohortRow:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise MissingMetadata(f"no metadata row for image {image_id!r}") from None

    @property
    def image_ids(self) -> list[str]:
        return sorted(self._by_id)

    def subset(self, image_ids) -> "CohortMetadata":
        return CohortMetadata([self[i] for i in image_ids])

    @classmethod
    def from_csv_text(cls, text: str) -> "CohortMetadata":
        reader = csv.DictReader(io.StringIO(text))
        missing = [c for c in ("image_id", "subject_id") if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingMetadata(f"metadata CSV lacks column(s) {', '.join(missing)}")
        rows = []
        for rec in reader:
            def opt(name):
                v = (rec.get(name) or "").strip()
                return v or None

            age = opt("age")
            zyg = opt("zygosity")
            rows.append(CohortRow(
                image_id=(rec["image_id"] or "").strip(),
                subject_id=(rec["subject_id"] or "").strip(),
                family_id=opt("family_id"),
                zygosity=zyg.upper() if zyg else None,
                age=float(age) if age is not None else None,
                dataset_tag=opt("dataset_tag"),
            ))
        return cls(rows)

    @classmethod
    def read_csv(cls, path) -> "CohortMetadata":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        return cls.from_csv_text(text)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METADATA_HEADER)
        for r in self.rows:
            w.writerow([r.image_id, r.subject_id, r.family_id or "", r.zygosity or "",
                        "" if r.age is None else repr(r.age), r.dataset_tag or ""])
        return buf.getvalue()


def relationship(a: CohortRow, b: CohortRow) -> RelationshipLabel:
    # Subject and family ids are scoped by dataset; different datasets are taken as unrelated.
    if a.dataset_tag != b.dataset_tag:
        return RelationshipLabel.UR
    if a.subject_id == b.subject_id:
        return RelationshipLabel.SM
    if a.family_id is not None and a.family_id == b.family_id:
        if a.zygosity == b.zygosity == "MZ":
            return RelationshipLabel.MZ
        if a.zygosity == b.zygosity == "DZ":
            return RelationshipLabel.DZ
        return RelationshipLabel.FS
    return RelationshipLabel.UR


def label_pairs(meta: CohortMetadata) -> dict[tuple[str, str], RelationshipLabel]:
    """Label every unordered image pair of the cohort; keys are sorted id tuples."""
    rows = sorted(meta.rows, key=lambda r: r.image_id)
    return {(a.image_id, b.image_id): relationship(a, b) for a, b in combinations(rows, 2)}


@dataclass(frozen=True)
class LabelDistribution:
    label: RelationshipLabel
    count: int  # finite distances
    mean: float
    std: float  # population std (ddof=0)
    min: float
    max: float
    finite_only: bool  # True when +inf pairs were present and excluded
    infinite_count: int = 0
    bucket: object = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label.value
        return d


def _matrix_pairs(matrix):
    """(key, distance) for each stored pair."""
    for a, b, _, d in matrix.pairs():
        yield pair_key(a, b), d


def _check_coverage(matrix, labels):
    missing = [k for k, _ in _matrix_pairs(matrix) if k not in labels]
    if missing:
        raise LabelCoverageGap(missing)


def _distribution(label, values, bucket=None) -> LabelDistribution | None:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    n_inf = int(arr.size - finite.size)
    if finite.size == 0:
        return None
    return LabelDistribution(label, int(finite.size), float(finite.mean()), float(finite.std()),
                             float(finite.min()), float(finite.max()), n_inf > 0, n_inf, bucket)


def summarize(matrix, labels, group_by=None) -> list[LabelDistribution]:
    """Per-(label, bucket) statistics of finite d_J, ordered by label then bucket.

    ``group_by`` maps a pair key to a bucket (or None to skip the pair). Empty
    groups produce no row.
    """
    _check_coverage(matrix, labels)
    groups = defaultdict(list)
    for key, d in _matrix_pairs(matrix):
        bucket = None
        if group_by is not None:
            bucket = group_by(key)
            if bucket is None:
                continue
        groups[(labels[key], bucket)].append(d)
    order = list(RelationshipLabel)
    rows = []
    for (label, bucket) in sorted(groups, key=lambda g: (order.index(g[0]), g[1] is not None, g[1] or 0)):
        row = _distribution(label, groups[(label, bucket)], bucket)
        if row is not None:
            rows.append(row)
    return rows


def age_difference_buckets(meta: CohortMetadata, width: float = 1.0):
    """group_by callable: floor(|age_a - age_b| / width), None when an age is missing."""
    if width <= 0:
        raise ValueError("bucket width must be positive")

    def bucket(key):
        a, b = meta[key[0]].age, meta[key[1]].age
        if a is None or b is None:
            return None
        return int(math.floor(abs(a - b) / width))

    return bucket


def ks_statistic_counts(x, y) -> tuple[int, int, int]:
    """Sup-gap of the empirical CDFs as the integer max |m*cx - n*cy| over n*m."""
    xs = np.sort(np.asarray(x, dtype=np.float64))
    ys = np.sort(np.asarray(y, dtype=np.float64))
    n, m = xs.size, ys.size
    # All jumps at a tied value are applied before the gap is read.
    grid = np.union1d(xs, ys)
    cx = np.searchsorted(xs, grid, side="right").astype(np.int64)
    cy = np.searchsorted(ys, grid, side="right").astype(np.int64)
    gap = int(np.abs(cx * m - cy * n).max()) if grid.size else 0
    return gap, n, m


def kolmogorov_pvalue(d: float, n_eff: float) -> float:
    lam = math.sqrt(n_eff) * d
    # Below 0.2 the series sums to 1 within 1e-12 but needs ~1/lam terms to get there.
    if lam < SMALL_LAMBDA:
        return 1.0
    total, k = 0.0, 1
    while True:
        term = math.exp(-2.0 * k * k * lam * lam)
        if term < 1e-12:
            break
        total += term if k % 2 else -term
        k += 1
    return min(1.0, max(0.0, 2.0 * total))


def ks_two_sample(x, y) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov D and its asymptotic p-value."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise EmptySample("KS test needs two non-empty samples")
    gap, n, m = ks_statistic_counts(x, y)
    d = gap / (n * m)
    return d, kolmogorov_pvalue(d, n * m / (n + m))


def ks_table(matrix, labels, include_self: bool = False) -> dict[str, dict[str, tuple[float, float]]]:
    """KS (D, p) between the finite d_J samples of every ordered pair of present labels."""
    _check_coverage(matrix, labels)
    samples = defaultdict(list)
    for key, d in _matrix_pairs(matrix):
        if math.isfinite(d):
            samples[labels[key]].append(d)
    present = [lab for lab in RelationshipLabel if samples[lab]]
    table: dict = {a.value: {} for a in present}
    for a, b in combinations(present, 2):
        v = ks_two_sample(samples[a], samples[b])
        table[a.value][b.value] = table[b.value][a.value] = v
    if include_self:
        for a in present:
            table[a.value][a.value] = ks_two_sample(samples[a], samples[a])
    return table


@dataclass(frozen=True)
class OutlierRules:
    sigma: float = 3.0
    duplicate_epsilon: float = 1e-6
    # Recompute the reference statistics without flagged pairs until the flags stop
    # changing (robust first pass); 0 evaluates the rules once against the raw
    # label distributions.
    clip_iterations: int = 20

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Flag:
    pair: tuple[str, str]
    label: RelationshipLabel
    distance: float
    verdict: Verdict

    def to_dict(self) -> dict:
        return {"image_a": self.pair[0], "image_b": self.pair[1], "label": self.label.value,
                "distance": self.distance, "verdict": self.verdict.value}


@dataclass
class OutlierReport:
    flags: list[Flag]
    thresholds: dict
    rules: OutlierRules
    reference: dict = field(default_factory=dict)  # label -> (count, mean, std) used

    def verdicts(self) -> dict[tuple[str, str], Verdict]:
        return {f.pair: f.verdict for f in self.flags}


def _stats(values):
    if len(values) < 2:
        return None
    arr = np.asarray(values, dtype=np.float64)
    return int(arr.size), float(arr.mean()), float(arr.std())


def _robust_stats(values):
    """(count, median, 1.4826 * MAD): a location/spread pair one outlier cannot drag."""
    if len(values) < 2:
        return None
    arr = np.asarray(values, dtype=np.float64)
    med = float(np.median(arr))
    return int(arr.size), med, MAD_SCALE * float(np.median(np.abs(arr - med)))


def flag_outliers(matrix, labels, rules: OutlierRules = OutlierRules()) -> OutlierReport:
    """Flag pairs whose d_J contradicts their label.

    (c) d_J < duplicate_epsilon -> exact-duplicate (takes precedence);
    (a) non-SM pair with d_J < mean(SM) + sigma*std(SM) -> suspected-same-labeled-other;
    (b) SM pair with d_J > mean(UR) - sigma*std(UR) -> suspected-other-labeled-same.
    Only finite distances are considered.

    With ``clip_iterations > 0`` the SM and UR reference samples leave out the
    pairs currently flagged, and the rules are re-evaluated until the flag set
    stops changing. The first pass uses median and scaled MAD in place of mean
    and std so that a single mislabelled pair cannot inflate the spread and
    flag a whole distribution.
    """
    _check_coverage(matrix, labels)
    finite = [(k, labels[k], d) for k, d in _matrix_pairs(matrix) if math.isfinite(d)]
    dup = {k for k, _, d in finite if d < rules.duplicate_epsilon}

    def references(excluded, estimator):
        sm = estimator([d for k, lab, d in finite if lab is RelationshipLabel.SM and k not in dup and k not in excluded])
        ur = estimator([d for k, lab, d in finite if lab is RelationshipLabel.UR and k not in excluded])
        if sm is None or ur is None:
            raise InsufficientDistribution("need at least two finite SM and two finite UR distances")
        return sm, ur

    def evaluate(sm, ur):
        hi_same = sm[1] + rules.sigma * sm[2]
        lo_other = ur[1] - rules.sigma * ur[2]
        out = {}
        for k, lab, d in finite:
            if k in dup:
                out[k] = Verdict.EXACT_DUPLICATE
            elif lab is not RelationshipLabel.SM and d < hi_same:
                out[k] = Verdict.SAME_LABELED_OTHER
            elif lab is RelationshipLabel.SM and d > lo_other:
                out[k] = Verdict.OTHER_LABELED_SAME
        return out, hi_same, lo_other

    if rules.clip_iterations == 0:
        sm, ur = references(set(), _stats)
        flags, hi_same, lo_other = evaluate(sm, ur)
    else:
        flags, _, _ = evaluate(*references(set(), _robust_stats))
        for _ in range(rules.clip_iterations):
            sm, ur = references(set(flags), _stats)
            new, hi_same, lo_other = evaluate(sm, ur)
            if new == flags:
                break
            flags = new

    out = [Flag(k, labels[k], d, flags[k]) for k, _, d in finite if k in flags]
    thresholds = {"same_subject_upper": hi_same, "unrelated_lower": lo_other,
                  "duplicate_epsilon": rules.duplicate_epsilon, "sigma": rules.sigma}
    reference = {"SM": {"count": sm[0], "mean": sm[1], "std": sm[2]},
                 "UR": {"count": ur[0], "mean": ur[1], "std": ur[2]}}
    return OutlierReport(out, thresholds, rules, reference)


def _num(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def report_dict(matrix, labels, distributions, report: OutlierReport, ks=None, manifest_hash=None) -> dict:
    return {
        "n_images": len(matrix.image_ids),
        "n_pairs": len(matrix.image_ids) * (len(matrix.image_ids) - 1) // 2,
        "matrix_manifest_sha256": manifest_hash,
        "rules": report.rules.to_dict(),
        "thresholds": report.thresholds,
        "reference": report.reference,
        "distributions": [{k: _num(v) for k, v in d.to_dict().items()} for d in distributions],
        "ks": {a: {b: {"D": v[0], "p": v[1]} for b, v in row.items()} for a, row in (ks or {}).items()},
        "flags": [{k: _num(v) for k, v in f.to_dict().items()} for f in report.flags],
    }


def report_json(data: dict) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def report_text(data: dict) -> str:
    lines = [f"images: {data['n_images']}  pairs: {data['n_pairs']}"]
    if data.get("matrix_manifest_sha256"):
        lines.append(f"matrix manifest sha256: {data['matrix_manifest_sha256']}")
    t = data["thresholds"]
    lines.append(
        f"thresholds: same<{t['same_subject_upper']:.6g}  unrelated>{t['unrelated_lower']:.6g}  "
        f"duplicate<{t['duplicate_epsilon']:.3g}  ({t['sigma']:g} sigma)"
    )
    lines.append("")
    lines.append("label bucket count mean std min max inf")
    for d in data["distributions"]:
        bucket = "-" if d["bucket"] is None else str(d["bucket"])
        lines.append(f"{d['label']} {bucket} {d['count']} {d['mean']:.6g} {d['std']:.6g} "
                     f"{d['min']:.6g} {d['max']:.6g} {d['infinite_count']}")
    if data["ks"]:
        lines.append("")
        lines.append("KS two-sample tests")
        for a, row in data["ks"].items():
            for b, r in row.items():
                if a <= b:
                    lines.append(f"{a} vs {b}: D={r['D']:.6g} p={r['p']:.6g}")
    lines.append("")
    lines.append(f"flagged pairs: {len(data['flags'])}")
    for f in data["flags"]:
        dist = f["distance"] if isinstance(f["distance"], str) else f"{f['distance']:.6g}"
        lines.append(f"{f['image_a']} {f['image_b']} {f['label']} d_J={dist} {f['verdict']}")
    return "\n".join(lines) + "\n"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
