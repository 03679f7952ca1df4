"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances are pinned to the published acceptance thresholds and are not
tuned to the implementation.  Lines are collected into ``ACCEPTANCE`` and
echoed by ``pytest_terminal_summary`` in conftest.
"""
import csv
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, tiny_raw
from fedavg_reference import run_fedavg
from test_bank import ReplayBank, brute_topk, random_instance
from test_federation import test_federation_module_has_no_task_branches
from test_models import batch, small_config
from test_spectral import direct_dft
from test_tensor import PRIMITIVES
from specfed.bank import KnowledgeBank
from specfed.cli import main
from specfed.config import parse_config
from specfed.experiment import (ABLATIONS, FEDAVG_DEGENERATE, apply_overrides, build_federation,
                                run_experiment)
from specfed.federation import make_retriever, spalign_loss
from specfed.metrics import dice_iou, psnr, ssim
from specfed.models import OmniModel, task_loss
from specfed.spectral import fft2d, ifft2d, spectrum_distance_ratio
from specfed.synthdata import cross_modality_pairs
from specfed.tensor import gradcheck


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    assert ok, line


def scenario(task, seed, **fed):
    """4 clients over 3 modalities (one modality per client, round robin), 32x32, 4 classes, 30 rounds."""
    federation = {"num_clients": 4, "rounds": 30, "lambda": 0.1, "top_k": 2, "local_epochs": 2}
    federation.update(fed)
    return parse_config({
        "seed": seed,
        "data": {"task": task, "image_size": 32, "num_classes": 4, "num_modalities": 3, "num_samples": 256,
                 "test_fraction": 0.5, "partition": {"mode": "overlapping", "overlap": 0.0}},
        "federation": federation,
        "output": {"curves": False, "checkpoint": False},
    })


def test_01_gradient_soundness():
    start = time.perf_counter()
    errors = []
    for name in sorted(PRIMITIVES):
        fn, params = PRIMITIVES[name](np.random.default_rng(1000))
        errors.append(gradcheck(lambda: fn(*params), params))
    rng = np.random.default_rng(2024)
    variants = [{}, {"fusion": "film"}, {"prompting": "projection"}, {"retrieval": "mean"},
                {"prefix_mode": "full", "head_dim": 3}]
    n_composite = 20
    for i in range(n_composite):
        task = ("classification", "segmentation", "super_resolution")[i % 3]
        cfg = small_config(task, dim=int(rng.integers(3, 6)), tokenizer_hidden=int(rng.integers(3, 7)),
                           **variants[int(rng.integers(len(variants)))])
        model = OmniModel(cfg, seed=int(rng.integers(1 << 16)), client_id=int(rng.integers(4)))
        x, desc, y = batch(cfg, n=int(rng.integers(1, 4)), seed=int(rng.integers(1 << 16)))
        snapshot = rng.normal(size=(int(rng.integers(1, 6)), cfg.dim))
        k = int(rng.integers(1, 4))
        protos = make_retriever(snapshot, k, cfg.retrieval)(model.tokenizer(desc).data)
        lam = float(rng.uniform(0, 1))

        def loss():
            pred, tokens, _ = model(x, desc, lambda t: protos)
            return task_loss(pred, y, cfg.task) + lam * spalign_loss(tokens, protos)

        errors.append(gradcheck(loss, model.parameters()))
    elapsed = time.perf_counter() - start
    worst = max(errors)
    record(1, "gradient soundness", worst < 1e-4 and elapsed < 30.0,
           f"{len(PRIMITIVES)} primitives + {n_composite} composite configs, max rel err {worst:.2e} "
           f"(< 1e-4), {elapsed:.1f} s (< 30 s)")


def test_02_fft_correctness():
    rng = np.random.default_rng(7)
    worst = 0.0
    for h, w in [(1, 1), (2, 3), (7, 5), (8, 8), (16, 16), (31, 17), (32, 32), (64, 48), (64, 64)]:
        x = rng.normal(size=(h, w))
        back = ifft2d(fft2d(x)).real
        worst = max(worst, np.abs(back - x).max() / np.abs(x).max())
        spec = fft2d(x)
        parseval = abs(np.sum(np.abs(spec) ** 2) / (h * w) - np.sum(x ** 2)) / np.sum(x ** 2)
        worst = max(worst, parseval)
    x8 = rng.normal(size=(8, 8))
    ref = direct_dft(x8)
    dft_err = np.abs(fft2d(x8) - ref).max() / np.abs(ref).max()
    worst = max(worst, dft_err)
    record(2, "FFT correctness", worst < 1e-9,
           f"max relative error {worst:.2e} over roundtrip/Parseval to 64x64 and 8x8 direct DFT (< 1e-9)")


def test_03_cross_modality_low_frequency_consistency():
    start = time.perf_counter()
    ratios = [spectrum_distance_ratio(a, b, 0.25) for a, b, ma, mb in cross_modality_pairs(100, 32, seed=0)]
    elapsed = time.perf_counter() - start
    mean, top = float(np.mean(ratios)), float(np.max(ratios))
    record(3, "cross-modality low-pass consistency", len(ratios) == 100 and mean < 0.3 and top < 0.6
           and elapsed < 10.0, f"100 pairs, mean ratio {mean:.4f} (< 0.3), max {top:.4f} (< 0.6), "
           f"{elapsed:.2f} s (< 10 s)")


def test_04_retrieval_exactness():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        protos, query, k = random_instance(rng)
        bank = KnowledgeBank(protos.shape[1], rho=1e12, delta=0.0, max_size=None)
        bank.insert_and_project([(i, v) for i, v in enumerate(protos)])
        got = bank.retrieve_topk(query, k, record=False).indices.tolist()
        mismatches += got != brute_topk(bank.prototypes, query, k)
    record(4, "retrieval exactness", mismatches == 0,
           f"{1000 - mismatches}/1000 instances equal to full-sort brute force")


def test_05_bank_laws():
    rng = np.random.default_rng(5)
    norm_violations = 0
    for _ in range(200):
        dim, rho = int(rng.integers(1, 9)), float(rng.uniform(0.05, 5.0))
        bank = KnowledgeBank(dim, rho=rho, max_size=None)
        scale = 10.0 ** rng.uniform(-3, 3)
        bank.insert_and_project([(c, rng.normal(size=dim) * scale) for c in range(int(rng.integers(1, 6)))])
        norm_violations += np.sqrt((bank.prototypes ** 2).sum(axis=1)).max() > rho
    replay_mismatches = 0
    for seed in range(20):
        r_rng = np.random.default_rng([5, seed])
        window, delta, dim = int(r_rng.integers(2, 6)), float(r_rng.choice([0.05, 0.2, 0.4])), 4
        bank = KnowledgeBank(dim, rho=1.0, delta=delta, window=window, max_size=None)
        oracle = ReplayBank(window, delta)
        for r in range(20):
            for _ in range(int(r_rng.integers(0, 4))):
                if len(bank):
                    res = bank.retrieve_topk(r_rng.normal(size=dim), int(r_rng.integers(1, 3)))
                    oracle.events.append((r, [bank.ids[i] for i in res.indices]))
            before = set(bank.ids)
            bank.insert_and_project([(c, r_rng.normal(size=dim)) for c in range(int(r_rng.integers(0, 3)))])
            for pid in set(bank.ids) - before:
                oracle.alive[pid] = r
            if (r + 1) % window == 0:
                replay_mismatches += bank.prune() != oracle.prune(r)
                replay_mismatches += bank.ids != sorted(oracle.alive)
            bank.advance_round()
    record(5, "bank laws", norm_violations == 0 and replay_mismatches == 0,
           f"{norm_violations} norm violations in 200 fuzz inserts, {replay_mismatches} prune mismatches "
           f"over 20 twenty-round replays")


def test_06_fedavg_degeneration():
    mismatched = []
    for seed in (0, 1, 2):
        cfg = apply_overrides(parse_config(tiny_raw(participation=0.6, rounds=3)).with_seed(seed),
                              FEDAVG_DEGENERATE)
        fed = build_federation(cfg)
        reports = fed.run()
        history, backbone, heads = run_fedavg(cfg.model, cfg.federation, [c.data for c in fed.clients], 3)
        same = [r.records for r in reports] == history
        same &= all(np.array_equal(fed.global_shared["backbone." + k], v) for k, v in backbone.items())
        same &= all(np.array_equal(c.personal["head." + k], v)
                    for c in fed.clients for k, v in heads[c.client_id].items())
        if not same:
            mismatched.append(seed)
    record(6, "FedAvg degeneration", not mismatched,
           f"element-wise equal to the reference on seeds 0,1,2 (mismatched: {mismatched or 'none'})")


@pytest.mark.slow
def test_07_end_to_end_directional_claim():
    start = time.perf_counter()
    variants = {"fedavg": FEDAVG_DEGENERATE, **ABLATIONS}
    acc = {name: [] for name in variants}
    for seed in range(5):
        cfg = scenario("classification", seed)
        for name, overrides in variants.items():
            acc[name].append(run_experiment(apply_overrides(cfg, overrides)).final_values()["accuracy"])
    elapsed = time.perf_counter() - start
    full = np.array(acc["full"])
    wins = {name: int((full >= np.array(acc[name])).sum()) for name in ABLATIONS if name != "full"}
    ok = full.mean() >= np.mean(acc["fedavg"]) and all(w >= 3 for w in wins.values()) and elapsed < 300.0
    means = ", ".join(f"{name} {np.mean(v):.4f}" for name, v in acc.items())
    record(7, "end-to-end directional claim", ok,
           f"mean accuracy {means}; full >= ablation in seeds {wins} (need >= 3/5); {elapsed:.0f} s (< 300 s)")


def test_08_task_generality():
    structure_ok = True
    try:
        test_federation_module_has_no_task_branches()
    except AssertionError:
        structure_ok = False
    gains, margins = [], []
    for seed in range(3):
        fed = build_federation(scenario("segmentation", seed, lr=0.1))
        before = np.mean([m["dice"] for m in fed.evaluate().values()])
        fed.run()
        gains.append(np.mean([m["dice"] for m in fed.evaluate().values()]) - before)
        fed = build_federation(scenario("super_resolution", seed, lr=5.0))
        fed.run()
        trained = np.mean([m["psnr"] for m in fed.evaluate().values()])
        nearest = np.mean([psnr(x[0].repeat(2, axis=0).repeat(2, axis=1), y) for c in fed.clients
                           for x, y in zip(c.data.x_test, c.data.y_test)])
        margins.append(trained - nearest)
    ok = structure_ok and min(gains) >= 0.3 and min(margins) >= 1.0
    record(8, "task generality", ok,
           f"Dice gain {np.round(gains, 3).tolist()} (>= 0.3), PSNR over nearest upsample "
           f"{np.round(margins, 2).tolist()} dB (>= 1), no task branches in federation: {structure_ok}")


def test_09_metric_closed_forms():
    checks = {"psnr offset 0.1": psnr(np.full((8, 8), 0.1), np.zeros((8, 8))) == 20.0}
    a = np.array([1.0, 1.0, 0.0, 0.0])
    triples = [(a, np.array([1.0, 0.0, 1.0, 0.0]), (0.5, 1 / 3)), (a, a, (1.0, 1.0)),
               (a, 1 - a, (0.0, 0.0)), (np.zeros(4), np.zeros(4), (1.0, 1.0)),
               (np.array([1.0, 1.0, 1.0, 0.0]), a, (0.8, 2 / 3))]
    for i, (p, t, expected) in enumerate(triples):
        checks[f"dice/iou triple {i}"] = dice_iou(p, t) == expected
    img = np.random.default_rng(9).random((16, 16))
    checks["ssim identical"] = ssim(img, img) == 1.0
    failed = [k for k, v in checks.items() if not v]
    record(9, "metric closed forms", not failed, f"{len(checks) - len(failed)}/{len(checks)} exact "
           f"(failed: {failed or 'none'})")


def test_10_determinism_across_workers(tmp_path):
    raw = scenario("classification", 3, rounds=3).to_dict()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    codes = [main(["run", str(path), "--workers", str(w), "--out", str(tmp_path / f"w{w}")]) for w in (1, 4)]
    same = (tmp_path / "w1" / "rounds.csv").read_bytes() == (tmp_path / "w4" / "rounds.csv").read_bytes()
    record(10, "determinism", codes == [0, 0] and same,
           f"exit codes {codes}; rounds.csv byte-identical for --workers 1 and 4: {same}")


def test_11_sweep_harness(tmp_path):
    cfg = scenario("classification", 0, rounds=4)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    grids = {"top_k": [1, 2, 4, 8], "lambda": [0.0, 0.01, 0.1, 1.0]}
    cells, mismatches, codes = 0, [], []
    for axis, values in grids.items():
        out = tmp_path / axis
        codes.append(main(["sweep", str(path), "--axis", axis, "--values", *map(str, values), "--out", str(out)]))
        with open(out / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for v in values:
            single = run_experiment(cfg.updated("federation", **{axis: v})).final_values()
            got = {r["metric"]: float(r["final_value"]) for r in rows if float(r["axis_value"]) == v}
            cells += 1
            if got != single:
                mismatches.append((axis, v))
    record(11, "sweep harness", codes == [0, 0] and cells == 8 and not mismatches,
           f"{cells} cells over k and lambda, exit codes {codes}, cells differing from single runs: "
           f"{mismatches or 'none'}")
