"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict (``criterion N: PASS|FAIL ...``) that is
printed in the pytest terminal summary, and also when this file is run as a
script.  Verdicts use the stated tolerances and runtime budgets; a failing
verdict fails the test.
"""

import hashlib
import itertools
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from layoutattn.attention import (
    SoftRegionConfig,
    combined_attention,
    combined_attention_soft,
    cross_attention,
    soft_region,
)
from layoutattn.evaluation import GT_ROW, SuiteConfig, detect_objects, object_recall, run_suite, sprel_precision
from layoutattn.generator import GeneratorConfig, crop_region
from layoutattn.layout.gmm import GmmParams, Layout, ExplicitMask, gmm_nll, region_mask
from layoutattn.layout.model import LossConfig, TrainConfig, build_model, encode_batch, relation_satisfaction, train
from layoutattn.optimizer import AttendObjective, OptimizerConfig, Variant, finite_difference_gradient, optimize, variant_setup
from layoutattn.scene_dsl import (
    COLORS,
    NOUNS,
    DEFAULT_CELL_COUNTS,
    RelationKind,
    RelationSpec,
    check_contradictions,
    generate_dataset,
    parse_description,
)
from layoutattn.scorer import local_score, outside_score

from oracles import brute_gmm_nll, naive_combined, naive_cross_attention, paint_scene, predictor_gradient_check

RESULTS: dict[int, str] = {}

# the ablation benchmark runs a shorter denoising loop in single precision so
# that 100 descriptions x 5 seeds x 5 rows fit the time budget
BENCH_GEN = GeneratorConfig(steps=10, dtype="float32")
BENCH_OPT = OptimizerConfig(iterations=30)
BENCH_SEEDS = (0, 1, 2, 3, 4)


def verdict(number: int, ok: bool, detail: str) -> None:
    RESULTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[number])
    assert ok, RESULTS[number]


def random_attention_instance(rng, pixels, d, n):
    q = rng.standard_normal((pixels, d))
    glob = (rng.standard_normal((int(rng.integers(1, 6)), d)), None)
    glob = (glob[0], rng.standard_normal(glob[0].shape))
    locs = []
    for _ in range(n):
        k = rng.standard_normal((int(rng.integers(1, 6)), d))
        locs.append((k, rng.standard_normal(k.shape)))
    return q, glob, locs


# ---------------------------------------------------------------------------
# 1-4: exact identities and oracles
# ---------------------------------------------------------------------------


def test_criterion_01_attention_identities():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        q, glob, locs = random_attention_instance(rng, 64, 8, int(rng.integers(1, 4)))
        masks = (rng.random((len(locs), 8, 8)) > 0.5).astype(int)
        out = combined_attention(q, glob, locs, masks, np.zeros(len(locs)))
        worst = max(worst, np.abs(out - cross_attention(q, *glob)).max())
        mask = (rng.random((1, 8, 8)) > 0.5).astype(int)
        out1 = combined_attention(q, glob, locs[:1], mask, [1.0])
        inside = mask.reshape(-1).astype(bool)
        worst = max(worst, np.abs(out1[inside] - cross_attention(q, *locs[0])[inside]).max(initial=0.0))
        worst = max(worst, np.abs(out1[~inside] - cross_attention(q, *glob)[~inside]).max(initial=0.0))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-6 and elapsed < 1.0, f"max deviation {worst:.2e} (<=1e-6), {elapsed:.2f}s (<1s)")


def test_criterion_02_oracle_equivalence():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        h = w = int(rng.integers(2, 5))
        d, n = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        q, glob, locs = random_attention_instance(rng, h * w, d, n)
        lam = rng.uniform(-1, 2, n)
        worst = max(worst, np.abs(cross_attention(q, *glob) - naive_cross_attention(q, *glob)).max())
        masks = (rng.random((n, h, w)) > 0.5).astype(int)
        hard = combined_attention(q, glob, locs, masks, lam)
        worst = max(worst, np.abs(hard - naive_combined(q, glob, locs, masks.reshape(n, -1), lam)).max())
        soft = np.stack([soft_region(rng.random(2), SoftRegionConfig(float(rng.uniform(0.05, 0.5))), (h, w)) for _ in range(n)])
        out = combined_attention_soft(q, glob, locs, soft, lam)
        worst = max(worst, np.abs(out - naive_combined(q, glob, locs, soft.reshape(n, -1), lam)).max())
    elapsed = time.perf_counter() - t0
    verdict(2, worst <= 1e-6 and elapsed < 10.0, f"50 instances, max deviation {worst:.2e} (<=1e-6), {elapsed:.1f}s (<10s)")


def test_criterion_03_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_pred = 0.0
    for b in range(10):
        items = generate_dataset({(2, 1): 2, (3, 2): 2, (4, 3): 1, (5, 4): 1}, seed=100 + b)
        model = build_model(seed=b).double().eval()
        batch = encode_batch(items, model.cfg.max_len, torch.float64)
        worst_pred = max(worst_pred, predictor_gradient_check(model, batch, LossConfig(), n_params=24, rng=rng))
    worst_lam = 0.0
    texts = ["a red car", "a red car is left of a black mailbox", "a dog is above a white cat and a bed is right of the dog"]
    for i in range(10):
        desc = parse_description(texts[i % 3])
        steps = int(rng.integers(2, 11))
        gen = GeneratorConfig(steps=steps)
        lay = Layout.from_centers(rng.uniform(0.2, 0.8, (desc.n_objects, 2)), r=float(rng.uniform(0.12, 0.3)))
        setup = variant_setup(Variant.FULL, desc, lay, gen.shape)
        obj = AttendObjective(desc, lay, setup.regions, gen, seed=i)
        lam = rng.uniform(-0.5, 1.5, (desc.n_objects, steps))
        _, g = obj.value_and_grad(lam)
        fd = finite_difference_gradient(obj, lam, 1e-4)
        worst_lam = max(worst_lam, np.abs(g - fd).max() / np.abs(fd).max())
    elapsed = time.perf_counter() - t0
    ok = worst_pred <= 1e-3 and worst_lam <= 1e-3 and elapsed < 120
    verdict(3, ok, f"predictor rel err {worst_pred:.1e}, lambda rel err {worst_lam:.1e} (<=1e-3), {elapsed:.0f}s (<120s)")


def test_criterion_04_gmm_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        g = GmmParams(rng.random((k, 2)), rng.uniform(0.005, 0.5, (k, 2)), rng.dirichlet(np.ones(k)))
        c = rng.random(2)
        worst = max(worst, abs(gmm_nll(c, g) - brute_gmm_nll(c, g.means, g.variances, g.weights)))
    ident = abs(gmm_nll((0.4, 0.6), GmmParams([[0.4, 0.6]], [[1.0, 1.0]], [1.0])) - math.log(2 * math.pi))
    verdict(4, worst <= 1e-9 and ident <= 1e-9, f"1000 inputs max |diff| {worst:.1e}, log 2pi identity {ident:.1e} (<=1e-9)")


# ---------------------------------------------------------------------------
# 5-7: learning and ablation directions
# ---------------------------------------------------------------------------

_cache: dict = {}


def layout_split():
    if "split" not in _cache:
        items = generate_dataset({cell: 4 * c for cell, c in DEFAULT_CELL_COUNTS.items()}, seed=0)
        order = np.random.default_rng(0).permutation(len(items))
        cut = int(0.8 * len(items))
        _cache["split"] = ([items[i] for i in order[:cut]], [items[i] for i in order[cut:]])
    return _cache["split"]


def trained_predictor(xi: float):
    key = ("model", xi)
    if key not in _cache:
        fit, _ = layout_split()
        t0 = time.perf_counter()
        res = train(fit, TrainConfig(epochs=40, loss=LossConfig(xi=xi)), seed=0)
        _cache[key] = (res.model, time.perf_counter() - t0)
    return _cache[key]


def test_criterion_05_layout_training():
    fit, held = layout_split()
    model, t_full = trained_predictor(20.0)
    ablated, t_abl = trained_predictor(0.0)
    sat = relation_satisfaction(model, held)
    sat0 = relation_satisfaction(ablated, held)
    elapsed = t_full + t_abl
    ok = sat >= 0.90 and sat0 < sat and elapsed < 600
    verdict(5, ok, f"{len(fit)}/{len(held)} split: held-out satisfaction {sat:.3f} (>=0.90), xi=0 {sat0:.3f} (<), "
            f"{elapsed:.0f}s (<600s)")


def ablation_reports():
    if "bench" not in _cache:
        model, _ = trained_predictor(20.0)
        bench = generate_dataset({cell: c // 5 for cell, c in DEFAULT_CELL_COUNTS.items()}, seed=2024)
        cfg = SuiteConfig(generator=BENCH_GEN, optimizer=BENCH_OPT, ground_truth_row=True)
        t0 = time.perf_counter()
        reports = [run_suite(bench, list(Variant), cfg, seed=s, model=model) for s in BENCH_SEEDS]
        _cache["bench"] = (bench, reports, time.perf_counter() - t0)
    return _cache["bench"]


def paired_gap(reports, a, b, metric):
    x = np.array([r.rows[a][metric] for r in reports], dtype=float)
    y = np.array([r.rows[b][metric] for r in reports], dtype=float)
    p = stats.ttest_rel(x, y, alternative="greater").pvalue if np.any(x != y) else 1.0
    return x.mean(), y.mean(), float(p)


def test_criterion_06_ablation_ordering():
    bench, reports, elapsed = ablation_reports()
    parts, ok = [], elapsed < 900
    for metric, short in (("sprel_precision", "sprel"), ("object_recall", "recall")):
        means = {v.value: np.mean([r.rows[v.value][metric] for r in reports]) for v in Variant}
        parts.append(short + " " + "/".join(f"{means[v.value]:.3f}" for v in Variant))
        for a, b in (("full", "no-temporal"), ("no-temporal", "no-optimization"), ("full", "no-spatial")):
            ma, mb, p = paired_gap(reports, a, b, metric)
            good = (ma > mb) and p < 0.05
            ok &= good
            parts.append(f"{a}>{b} p={p:.3g}{'' if good else '!'}")
    verdict(6, ok, f"{len(bench)} items x {len(reports)} seeds [full/no-spatial/no-temporal/no-opt]: "
            + "; ".join(parts) + f"; {elapsed:.0f}s (<900s)")


def test_criterion_07_ground_truth_layouts():
    _, reports, _ = ablation_reports()
    gt = np.mean([r.rows[GT_ROW]["sprel_precision"] for r in reports])
    pred = np.mean([r.rows["full"]["sprel_precision"] for r in reports])
    verdict(7, gt >= pred, f"sprel ground-truth layout {gt:.3f} >= predicted layout {pred:.3f}")


# ---------------------------------------------------------------------------
# 8-11: optimisation, dataset and metric checks
# ---------------------------------------------------------------------------


def test_criterion_08_optimization_efficacy():
    rng = np.random.default_rng(8)
    wins = 0
    t0 = time.perf_counter()
    for trial in range(100):
        noun = NOUNS[rng.integers(len(NOUNS))]
        color = COLORS[rng.integers(len(COLORS))] if rng.random() < 0.5 else None
        desc = parse_description(f"a {color + ' ' if color else ''}{noun}")
        lay = Layout.from_centers([rng.uniform(0.25, 0.75, 2)], r=0.2)
        full = optimize(desc, lay, opt_cfg=OptimizerConfig(), seed=trial)
        frozen = optimize(desc, lay, opt_cfg=OptimizerConfig(variant=Variant.NO_OPTIMIZATION), seed=trial)
        wins += full.best_loss < frozen.best_loss
    elapsed = time.perf_counter() - t0
    verdict(8, wins >= 95, f"full < no-optimization final loss on {wins}/100 fixtures (>=95), {elapsed:.0f}s")


def three_cycle_fixture(rng, n_cases=1000):
    cases = []
    for _ in range(n_cases):
        n = int(rng.integers(3, 6))
        ids = rng.permutation(n)[:3] + 1
        axis = int(rng.integers(2))
        before = (RelationKind.LEFT_OF, RelationKind.ABOVE)[axis]
        after = (RelationKind.RIGHT_OF, RelationKind.BELOW)[axis]
        rels = []
        for a, b in zip(ids, np.roll(ids, -1)):
            # "a before b" stated either directly or in mirrored form
            rels.append(RelationSpec(int(a), int(b), before) if rng.random() < 0.5 else RelationSpec(int(b), int(a), after))
        other = (RelationKind.ABOVE, RelationKind.BELOW) if axis == 0 else (RelationKind.LEFT_OF, RelationKind.RIGHT_OF)
        for _ in range(int(rng.integers(0, 3))):
            a, b = rng.choice(n, 2, replace=False) + 1
            rels.append(RelationSpec(int(a), int(b), other[int(rng.integers(2))]))
        order = rng.permutation(len(rels))
        cases.append([rels[i] for i in order])
    return cases


def test_criterion_09_dataset_generator():
    data = generate_dataset(seed=0)
    cells = {}
    for it in data:
        cells[it.description.cell] = cells.get(it.description.cell, 0) + 1
    rejected = sum(not check_contradictions(rels) for rels in three_cycle_fixture(np.random.default_rng(9)))
    ok = cells == DEFAULT_CELL_COUNTS and len(data) == 500 and rejected == 1000
    table = " ".join(f"{n}:{m}={cells.get((n, m), 0)}" for n, m in sorted(DEFAULT_CELL_COUNTS))
    verdict(9, ok, f"{len(data)} items ({table}); 3-cycles rejected {rejected}/1000")


def test_criterion_10_metric_oracle():
    data = generate_dataset(seed=10)
    recalls, precisions = [], []
    for it in data:
        dets = detect_objects(paint_scene(it.description, it.layout))
        recalls.append(object_recall(dets, it.description))
        precisions.append(sprel_precision(dets, it.description))
    ok = all(r == 1.0 for r in recalls) and all(p == 1.0 for p in precisions)
    verdict(10, ok, f"{len(data)} painted scenes: min recall {min(recalls)}, min sprel {min(p for p in precisions if p is not None)}")


def random_mask(rng, grid=32):
    while True:
        h, w = rng.integers(6, 14, 2)
        y, x = rng.integers(0, grid - h), rng.integers(0, grid - w)
        m = np.zeros((grid, grid), bool)
        m[y : y + h, x : x + w] = True
        yield m


def test_criterion_11_user_layout_honoring():
    rng = np.random.default_rng(11)
    texts = ["a red car", "a blue bus is left of a dog", "a cat is above a white bed"]
    honoured, t0 = 0, time.perf_counter()
    for case in range(50):
        desc = parse_description(texts[case % 3])
        masks = []
        gen = random_mask(rng)
        while len(masks) < desc.n_objects:
            m = next(gen)
            if not any((m & o).any() for o in masks):
                masks.append(m)
        if desc.relations:
            r = desc.relations[0]
            a, b = masks[r.subject_id - 1], masks[r.object_id - 1]
            ca, cb = ExplicitMask(a).center, ExplicitMask(b).center
            if not r.kind.holds(ca, cb):
                masks[r.subject_id - 1], masks[r.object_id - 1] = b, a
        lay = Layout(tuple(ExplicitMask(m) for m in masks))
        res = optimize(desc, lay, seed=case)
        inside = np.mean([local_score(crop_region(res.scene, reg), o) for reg, o in zip(lay.regions, desc.objects)])
        outside = np.mean([outside_score(res.scene, o, m) for m, o in zip(masks, desc.objects)])
        honoured += inside > outside
    elapsed = time.perf_counter() - t0
    verdict(11, honoured >= 45, f"inside local score > outside signature on {honoured}/50 mask fixtures (>=45), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 12: command-line determinism
# ---------------------------------------------------------------------------


def run_cli(args, cwd):
    env = {**os.environ, "LAYOUTATTN_THREADS": "1"}
    res = subprocess.run([sys.executable, "-m", "layoutattn.cli", *args], cwd=cwd, env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    return res


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_12_cli_determinism(tmp_path):
    fast = ["--steps", "6", "--iterations", "5"]
    commands = [
        ["gen-data", "--out", "d.jsonl", "--counts", "2:1=30,3:2=20", "--seed", "7"],
        ["train", "--data", "d.jsonl", "--epochs", "2", "--out", "m.ckpt", "--seed", "7"],
        ["generate", "--text", "a red car is to the left of a black mailbox", "--ckpt", "m.ckpt", "--seed", "7",
         "--trace", "--scene-json", "--out", "gen", *fast],
        ["generate", "--desc-file", "desc.txt", "--layout-file", "lay.json", "--soft-sigma", "0.1", "--seed", "7",
         "--out", "gen_soft", *fast],
        ["eval", "--data", "d.jsonl", "--ckpt", "m.ckpt", "--limit", "4", "--ground-truth-layout", "--seed", "7",
         "--out", "ev", *fast],
    ]
    digests = []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        (root / "desc.txt").write_text("a dog is above a cat\n")
        (root / "lay.json").write_text('{"objects": [{"id": 1, "cx": 0.5, "cy": 0.25}, {"id": 2, "cx": 0.5, "cy": 0.75}]}')
        for cmd in commands:
            run_cli(cmd, root)
        digests.append(tree_digest(root))
    differing = sorted(k for k in digests[0] if digests[0][k] != digests[1].get(k))
    ok = not differing and set(digests[0]) == set(digests[1])
    verdict(12, ok, f"{len(commands)} commands, {len(digests[0])} files byte-identical across two runs"
            + (f"; differing: {differing}" if differing else ""))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
