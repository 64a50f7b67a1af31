"""Report documents and run manifests.

Every CLI output is structured text: human-readable tables followed by a
machine-readable JSON block that embeds the run manifest. Outputs are
byte-deterministic given (input digests, flags, seed), so the embedded
manifest carries no wall-clock fields; timing goes to the log stream.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .fitter import FitResult
from .gof import GofReport
from .replicate import ARMS, StudySummary
from .variance import SandwichParts, _normal_quantile

MACHINE_BEGIN = "--- BEGIN MACHINE-READABLE (json) ---"
MACHINE_END = "--- END MACHINE-READABLE ---"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """Reproducibility record embedded in every output artifact."""

    command: str
    options: dict
    seed: int | None
    input_digests: dict
    tool_version: str

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "options": self.options,
            "seed": self.seed,
            "input_digests": self.input_digests,
            "tool_version": self.tool_version,
        }


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def machine_block(payload: dict) -> str:
    body = json.dumps(_jsonable(payload), sort_keys=True, indent=1)
    return f"{MACHINE_BEGIN}\n{body}\n{MACHINE_END}\n"


def parse_machine_block(text: str) -> dict:
    start = text.index(MACHINE_BEGIN) + len(MACHINE_BEGIN)
    end = text.index(MACHINE_END)
    return json.loads(text[start:end])


def _table(df: pd.DataFrame, floatfmt: str = "{:.6g}") -> str:
    out = df.copy()
    for col in out.columns:
        if out[col].dtype.kind == "f":
            out[col] = out[col].map(lambda v: floatfmt.format(v))
    return out.to_string(index=False)


def render_fit_report(
    fit_result: FitResult,
    sw: SandwichParts,
    manifest: RunManifest,
    level: float = 0.95,
) -> str:
    """Coefficient table, baseline curve, covariance, manifest."""
    z = fit_result.beta / sw.se
    zq = _normal_quantile(0.5 + level / 2.0)
    lo = fit_result.beta - zq * sw.se
    hi = fit_result.beta + zq * sw.se
    coef = pd.DataFrame(
        {
            "covariate": fit_result.covariate_names,
            "estimate": fit_result.beta,
            "robust_se": sw.se,
            "z": z,
            f"ci{int(level * 100)}_low": lo,
            f"ci{int(level * 100)}_high": hi,
        }
    )
    curve = fit_result.baseline.curve()
    buf = io.StringIO()
    buf.write("# additive subdistribution hazards fit\n")
    buf.write(
        f"cause={fit_result.cause} mode={fit_result.mode} "
        f"variance={sw.clustering} n_clusters={fit_result.n_clusters} "
        f"n_subjects={fit_result.n_subjects} tau={fit_result.tau:.6g}\n\n"
    )
    buf.write("== coefficients ==\n")
    buf.write(_table(coef))
    buf.write("\n\n== baseline cumulative subdistribution hazard ==\n")
    buf.write("time lambda0\n")
    for t, v in curve:
        buf.write(f"{t:.9g} {v:.9g}\n")
    buf.write("\n== scaled covariance (variance of sqrt(n)(beta - beta0)) ==\n")
    buf.write(np.array2string(sw.Sigma, precision=9, separator=" "))
    buf.write("\n\n")
    buf.write(
        machine_block(
            {
                "kind": "fit",
                "cause": fit_result.cause,
                "mode": fit_result.mode,
                "tau": fit_result.tau,
                "covariates": list(fit_result.covariate_names),
                "beta": fit_result.beta,
                "robust_se": sw.se,
                "z": z,
                "ci_low": lo,
                "ci_high": hi,
                "ci_level": level,
                "Sigma": sw.Sigma,
                "clustering": sw.clustering,
                "baseline_times": curve[:, 0],
                "baseline_values": curve[:, 1],
                "manifest": manifest.to_dict(),
            }
        )
    )
    return buf.getvalue()


def render_gof_report(report: GofReport, manifest: RunManifest) -> str:
    """Per-covariate and overall rows: statistic and p-value."""
    buf = io.StringIO()
    buf.write("# model checking report\n")
    buf.write(f"cause={report.cause} draws={report.B} seed={report.seed}\n\n")
    buf.write("== tests ==\n")
    buf.write(_table(report.to_frame()))
    buf.write("\n\n")
    buf.write(
        machine_block(
            {
                "kind": "gof",
                "cause": report.cause,
                "draws": report.B,
                "entries": [
                    {
                        "test": e.kind,
                        "target": e.name,
                        "statistic": e.statistic,
                        "p_value": e.p_value,
                    }
                    for e in report.entries
                ],
                "manifest": manifest.to_dict(),
            }
        )
    )
    return buf.getvalue()


def render_replicate_summary(summary: StudySummary, manifest: RunManifest) -> str:
    cell = summary.cell
    buf = io.StringIO()
    buf.write(f"# replication study: {cell.study}\n")
    buf.write(f"cell: {cell.label}\n")
    buf.write(
        f"replicates: {summary.reps_completed}/{summary.reps_requested} "
        f"completed ({len(summary.failures)} failed)\n\n"
    )
    buf.write(_table(summary.to_frame()))
    buf.write("\n")
    if summary.reps_completed < 2 and cell.kind == "coverage":
        buf.write("\nnote: MCSE undefined with fewer than 2 replicates\n")
    if summary.failures:
        buf.write("\n== failed replicates ==\n")
        for msg in summary.failures:
            buf.write(msg + "\n")
    payload = {
        "kind": "replicate",
        "study": cell.study,
        "label": cell.label,
        "reps_requested": summary.reps_requested,
        "reps_completed": summary.reps_completed,
        "n_failures": len(summary.failures),
        "manifest": manifest.to_dict(),
    }
    if cell.kind == "coverage":
        payload["arms"] = {a: summary.arm_stats[a] for a in ARMS}
    else:
        payload["rejection_rate"] = summary.rejection_rate
        payload["alpha"] = cell.alpha
        payload["p_values"] = summary.p_values
    buf.write("\n")
    buf.write(machine_block(payload))
    return buf.getvalue()


def manifest_comment_header(manifest: RunManifest) -> str:
    """Manifest as '#'-prefixed comment lines for delimited outputs."""
    body = json.dumps(_jsonable(manifest.to_dict()), sort_keys=True)
    return f"# manifest {body}\n"
