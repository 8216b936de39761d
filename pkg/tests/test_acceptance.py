"""End-to-end acceptance runs over ``configs/acceptance``.

Each criterion prints one ``PASS``/``FAIL`` line. Runs are cached per module so the
determinism check can reuse the single-thread manifests.
"""
import json
import time
from pathlib import Path

import pytest

from follmer_kit import cli

pytestmark = pytest.mark.acceptance

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs" / "acceptance"

# criterion -> (description, config stems, runtime limit in seconds or None)
CRITERIA = {
    1: ("Wiener quadratic variation", ["c01_wiener_quadratic"], 60.0),
    2: ("fBm(1/4) quartic variation", ["c02_fbm_quartic"], 120.0),
    3: ("Takagi-Landsberg linear variation", ["c03_takagi"], 30.0),
    4: ("change-of-variable residuals", ["c04a_ito_wiener_x2", "c04b_ito_fbm_x4"], 120.0),
    5: ("polynomial exactness",
        ["c05_exactness_p2", "c05_exactness_p4", "c05_exactness_p6"], None),
    6: ("scalar geometric solution", ["c06a_geometric_wiener", "c06b_geometric_fbm"], 120.0),
    7: ("transport closed form", ["c07_transport_closed_form"], 60.0),
    8: ("parabolic order and defect", ["c08a_parabolic_order", "c08b_parabolic_defect"], 300.0),
    9: ("hyperbolic skewness and norm", ["c09_hyperbolic"], 60.0),
}


def _run(stem, out, threads):
    cfg = CONFIG_DIR / f"{stem}.json"
    start = time.perf_counter()
    code = cli.main(["run", str(cfg), "--out", str(out), "--threads", str(threads)])
    elapsed = time.perf_counter() - start
    manifest = json.loads((out / "manifest.json").read_text())
    return code, manifest, elapsed, out


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return {stem: _run(stem, root / stem, 1) for _, stems, _ in CRITERIA.values() for stem in stems}


def _report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


def _failed(manifest):
    return [f"{r['name']}={r['value']!r}" for r in manifest.get("assertions", [])
            if not r["passed"]]


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, runs, capsys):
    desc, stems, limit = CRITERIA[n]
    elapsed = sum(runs[s][2] for s in stems)
    problems = []
    for stem in stems:
        code, manifest, _, _ = runs[stem]
        if code != 0:
            problems.append(f"{stem} exit {code} " + ", ".join(_failed(manifest)))
    if limit is not None and elapsed > limit:
        problems.append(f"runtime {elapsed:.1f}s > {limit:.0f}s")
    ok = not problems
    detail = f"{desc} ({elapsed:.1f}s)" + ("" if ok else " " + "; ".join(problems))
    _report(capsys, n, ok, detail)
    assert ok, detail


def _strip(manifest):
    return {k: v for k, v in manifest.items() if k != "timing"}


def test_criterion_10_determinism(runs, tmp_path, capsys):
    mismatched = []
    for stem, (_, first, _, out) in runs.items():
        _, again, _, _ = _run(stem, tmp_path / stem, 3)
        same_csv = ((tmp_path / stem / "per_seed.csv").read_bytes()
                    == (out / "per_seed.csv").read_bytes())
        if _strip(first) != _strip(again) or not same_csv:
            mismatched.append(stem)
    ok = not mismatched
    _report(capsys, 10, ok, "manifests identical across thread counts"
            + ("" if ok else f" except {mismatched}"))
    assert ok
