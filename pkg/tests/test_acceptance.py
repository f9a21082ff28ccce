"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The desk-scale runs (MLP 784-256-128-10 on synthetic MNIST-shaped data) are
shared by criteria 2, 3, 7 and 9 through a module-scoped fixture.
"""
import os
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import ortho_group

from sparsefreeze import cost as C
from sparsefreeze.analysis import block_similarity, linear_cka
from sparsefreeze.checkpoint import load_checkpoint
from sparsefreeze.config import load_config
from sparsefreeze.dst import cifar_schedule, structure_update
from sparsefreeze.freeze import freeze_step, plan_for_target, solve_start_epoch
from sparsefreeze.model import init_random_sparse
from sparsefreeze.sieve import init_sieve, record_epoch, sieve_update
from sparsefreeze.train import make_network, make_plan, run_train

from oracles import central_difference, mlp_memory_closed_form, round_half_up

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
SEEDS = (0, 1, 2)
RESULTS = []


def verdict(n, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}  {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _keep(size, s):
    return round_half_up((1 - Fraction(str(round(s, 12)))) * size)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("desk")
    runs = {"baseline": [], "spfde": []}
    t0 = time.perf_counter()
    for seed in SEEDS:
        for name, ini in (("baseline", "desk_mlp_baseline.ini"), ("spfde", "desk_mlp.ini")):
            over = {"train": {"seed": seed}}
            if name == "spfde" and seed == 0:
                over["output"] = {"checkpoint_every": 1}
            cfg = load_config(os.path.join(CONFIGS, ini), over)
            runs[name].append((cfg, run_train(cfg, str(base / f"{name}{seed}"))))
    runs["seconds"] = time.perf_counter() - t0
    return runs


# ---------------------------------------------------------------------------


def test_criterion_01_budget_arithmetic():
    cfg = load_config(os.path.join(CONFIGS, "cifar_resnet32.ini"), {"sieve": {"p": 0}})
    net = make_network(cfg)
    sch = cfg.schedule()
    samples = cfg.dataset.n_train
    model = C.NetworkCostModel(net, samples, sch)
    targets = (0.10, 0.15, 0.20, 0.25)
    t0 = time.perf_counter()
    plans = [plan_for_target(model, t, 160, 5, "single_shot") for t in targets]
    starts = [solve_start_epoch(model, t, 160, 5) for t in targets]
    elapsed = time.perf_counter() - t0
    direction = all(a > b for a, b in zip(starts, starts[1:]))

    errors = []
    for plan in plans:
        replay = make_network(cfg)
        rng = np.random.default_rng(0)
        total = 0
        for e in range(160):
            freeze_step(replay, e, plan, {})
            if sch.is_update_epoch(e):
                structure_update(replay, e, sch, rng)
            total += C.epoch_flops(replay, samples)
        errors.append(abs(plan.predicted_total_flops - total) / total)
    ok = direction and max(errors) <= 0.005 and elapsed < 1.0
    verdict(1, "budget arithmetic", ok,
            f"T_frz for 10/15/20/25% = {'/'.join(map(str, starts))}; "
            f"max |predicted-replayed| {max(errors):.4%}; planning {elapsed:.2f} s")


def _expected_nnz(size, s, epoch, sch, frozen):
    if frozen or epoch >= sch.search_end:
        return _keep(size, s)
    grid = epoch - epoch % sch.interval
    return _keep(size, s - sch.delta(grid))


def test_criterion_02_sparsity_conservation(desk_runs):
    bad, checked = [], 0
    for cfg, res in desk_runs["spfde"] + desk_runs["baseline"]:
        sch = cfg.schedule()
        s = cfg.sparsity.s
        for rec in res.metrics:
            frozen = set(rec["frozen_blocks"])
            for b in res.net.blocks:
                for layer in b.layers:
                    if layer.dense:
                        continue
                    want = _expected_nnz(layer.size, s, rec["epoch"], sch, b.index in frozen)
                    checked += 1
                    if rec["layer_nnz"][layer.name] != want:
                        bad.append((cfg.train.seed, rec["epoch"], layer.name))
    verdict(2, "sparsity conservation", not bad,
            f"{checked} (run, epoch, layer) counts checked against the staircase, {len(bad)} mismatches")


def test_criterion_03_freeze_immutability(desk_runs):
    cfg, res = desk_runs["spfde"][0]
    out = res.out_dir
    plan = res.plan
    digests_bad = 0
    compared = 0
    final = {l.name: l.digest() for l in res.net.layers}
    for epoch in range(1, cfg.train.epochs):
        net, _ = load_checkpoint(os.path.join(out, f"epoch{epoch:04d}.spfd"))
        for b in net.blocks:
            fe = plan.block_freeze_epochs.get(b.index)
            if fe is not None and epoch > fe:
                for layer in b.layers:
                    compared += 1
                    digests_bad += layer.digest() != final[layer.name]
    # per-epoch cost rebuilt from nnz: forward for every layer, backward only for trainable ones
    cost_bad = 0
    frozen_fwd_charged = True
    for rec in res.metrics:
        frozen = set(rec["frozen_blocks"])
        fwd = bwd = frozen_fwd = 0
        for b in res.net.blocks:
            for layer in b.layers:
                f = 2 * rec["layer_nnz"][layer.name]
                fwd += f
                if b.index in frozen:
                    frozen_fwd += f
                else:
                    bwd += 2 * f
        cost_bad += rec["epoch_flops"] != rec["samples"] * (fwd + bwd)
        if frozen:
            frozen_fwd_charged &= frozen_fwd > 0
            cost_bad += (rec["flops_sparse"] - rec["flops_frozen"]) != cfg.dataset.n_train * 2 * frozen_fwd
    ok = digests_bad == 0 and compared > 0 and cost_bad == 0 and frozen_fwd_charged
    verdict(3, "freeze immutability", ok,
            f"{compared} frozen-layer digests vs final, {digests_bad} changed; "
            f"{len(res.metrics)} epochs of costs rebuilt with zero frozen backward, {cost_bad} mismatches")


def test_criterion_04_sieving_invariants(desk_runs):
    size, p, T, interval = 1000, 0.20, 160, 5
    sch = cifar_schedule(interval)
    state = init_sieve(size, p, seed=0)
    rng = np.random.default_rng(1)
    crng = np.random.default_rng(2)
    n_partial = len(state.partial_set)
    initial_queue = list(state.removed_queue)
    seen = set(state.partial_set)
    problems = []
    entered = []
    for epoch in range(T):
        if state.removed_queue and epoch > 0 and epoch % interval == 0 and epoch < sch.search_end:
            q = list(state.removed_queue)
            draining = state.initial_drain_remaining > 0
            rep = sieve_update(state, rng)
            if rep["count"] != round_half_up(Fraction(3, 10) * len(q)):
                problems.append(f"swap count at {epoch}")
            entered += q[:rep["count"]]
            if draining and rep["shuffled"] and rep["drain_remaining"] > 0:
                problems.append(f"shuffle before drain at {epoch}")
        if len(state.partial_set) != n_partial:
            problems.append(f"size at {epoch}")
        if not set(state.partial_set).isdisjoint(state.removed_queue) or \
                len(state.partial_set) + len(state.removed_queue) != size:
            problems.append(f"partition at {epoch}")
        seen |= set(state.partial_set)
        record_epoch(state, {i: bool(crng.random() < 0.8) for i in state.partial_set})
    if entered[:len(initial_queue)] != initial_queue:
        problems.append("initial queue not drained in FIFO order before any shuffle")
    if seen != set(range(size)):
        problems.append(f"{size - len(seen)} samples never entered")
    # the desk runs keep a constant partial set and swap round(0.3 * |queue|)
    for cfg, res in desk_runs["spfde"]:
        sizes = {r["samples"] for r in res.metrics}
        queue = cfg.dataset.n_train - sizes.pop() if len(sizes) == 1 else None
        if queue is None or sizes:
            problems.append(f"desk seed {cfg.train.seed}: partial-set size varies")
            continue
        for r in res.metrics:
            if r["sieve"] and r["sieve_swaps"] != round_half_up(Fraction(3, 10) * queue):
                problems.append(f"desk seed {cfg.train.seed}: swap count at {r['epoch']}")
    verdict(4, "sieving invariants", not problems,
            f"{len(seen)}/{size} samples entered the partial set; "
            + ("no violations" if not problems else "; ".join(problems[:3])))


def _loss(net, x, y):
    from sparsefreeze.tensor import softmax_cross_entropy
    logits, _ = net.forward(x)
    return float(softmax_cross_entropy(logits, y).data)


def test_criterion_05_gradient_correctness():
    archs = ("mlp:6-5-4", "cnn:2x6x6:3,4s2:gap-3", "cnn:1x5x5:2:flat-3")
    worst = 0.0
    failures = 0
    for seed in range(20):
        for arch in archs:
            net = init_random_sparse(arch, 0.4, seed=seed, dtype=np.float64, first_layer_dense=False)
            rng = np.random.default_rng(seed)
            for layer in net.layers:
                # nonzero biases keep every pre-activation off the ReLU kink, where the
                # central difference averages two one-sided slopes
                layer.bias[:] = rng.normal(0.0, 0.1, size=layer.bias.shape)
            x = rng.normal(size=(3,) + tuple(net.arch["input"]))
            y = rng.integers(0, 3, size=3)
            _, _, grads = net.loss_and_grads(x, y)
            for layer in net.layers:
                gw, gb = grads[layer.name]
                for analytic, param, mask in ((gw, layer.weights, layer.mask), (gb, layer.bias, None)):
                    num = central_difference(lambda: _loss(net, x, y), param, h=1e-5)
                    if mask is not None:
                        num = num * mask
                    diff = np.abs(analytic - num)
                    scale = np.maximum(np.abs(analytic), np.abs(num))
                    big = scale > 1e-6
                    if big.any():
                        worst = max(worst, float((diff[big] / scale[big]).max()))
                    failures += int(np.any(diff > 1e-4 * scale + 1e-9))
    verdict(5, "gradient correctness", failures == 0,
            f"20 seeds x {len(archs)} architectures (affine, conv s1/s2, gap, flatten); "
            f"max relative error {worst:.2e}")


def test_criterion_06_cka_identities():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(500, 40))
    Y = X @ rng.normal(size=(40, 30)) + 0.5 * rng.normal(size=(500, 30))
    base = linear_cka(X, Y)
    self_err = abs(linear_cka(X, X) - 1.0)
    Q = ortho_group.rvs(30, random_state=1)
    orth_err = abs(linear_cka(X, Y @ Q) - base)
    scale_err = abs(linear_cka(X, 3.7 * Y) - base)
    noise = linear_cka(rng.normal(size=(2048, 64)), rng.normal(size=(2048, 64)))
    ok = self_err <= 1e-10 and orth_err <= 1e-6 and scale_err <= 1e-6 and noise < 0.05
    verdict(6, "CKA identities", ok,
            f"|CKA(X,X)-1| {self_err:.1e}; orthogonal {orth_err:.1e}; scale {scale_err:.1e}; "
            f"independent noise {noise:.4f}")


def test_criterion_07_desk_end_to_end(desk_runs):
    acc_b = np.mean([r.summary["final_eval_acc"] for _, r in desk_runs["baseline"]])
    acc_s = np.mean([r.summary["final_eval_acc"] for _, r in desk_runs["spfde"]])
    fl_b = np.mean([r.summary["cum_flops"] for _, r in desk_runs["baseline"]])
    fl_s = np.mean([r.summary["cum_flops"] for _, r in desk_runs["spfde"]])
    gap = 100 * (acc_s - acc_b)
    reduction = 1 - fl_s / fl_b
    seconds = desk_runs["seconds"]
    ok = abs(gap) <= 1.0 and reduction >= 0.25 and seconds < 600
    verdict(7, "desk end-to-end", ok,
            f"accuracy baseline {acc_b:.2%} vs frozen+sieved {acc_s:.2%} ({gap:+.2f} points); "
            f"FLOPs reduction {reduction:.2%}; six runs in {seconds:.0f} s")


def test_criterion_08_memory_accounting():
    cfg = load_config(os.path.join(CONFIGS, "desk_mlp.ini"))
    net = make_network(cfg)
    plan = make_plan(cfg, net, round_half_up((1 - Fraction(str(cfg.sieve.p))) * cfg.dataset.n_train))
    batch = cfg.output.memory_batch
    run = C.memory_over_run(net, plan, batch, cfg.sparsity.s)
    dims = [784, 256, 128, 10]
    nnz = [784 * 256, _keep(256 * 128, 0.9), _keep(128 * 10, 0.9)]
    per_epoch = []
    for e in range(cfg.train.epochs):
        k = sum(1 for fe in plan.block_freeze_epochs.values() if fe <= e)
        per_epoch.append(mlp_memory_closed_form(dims, nnz, k, batch))
    k_final = len(plan.block_freeze_epochs)
    base = mlp_memory_closed_form(dims, nnz, 0, batch)
    low = mlp_memory_closed_form(dims, nnz, k_final, batch)
    exact = run.per_epoch == per_epoch and run.baseline_bytes == base and run.min_bytes == low
    ordered = run.min_bytes < run.avg_bytes < run.baseline_bytes
    red = Fraction(base - low, base)
    verdict(8, "memory accounting", exact and ordered,
            f"baseline {run.baseline_bytes} B, min {run.min_bytes} B, avg {run.avg_bytes:.1f} B; "
            f"reduction {float(red):.4%} equal to the closed form for all {len(per_epoch)} epochs: {exact}")


def test_criterion_09_similarity_trend(desk_runs):
    firsts, lasts = [], []
    for cfg, res in desk_runs["baseline"]:
        half = cfg.train.epochs // 2
        inter, _ = load_checkpoint(os.path.join(res.out_dir, f"epoch{half:04d}.spfd"))
        sims = block_similarity(inter, res.net, 0.5)
        blocks = sorted(sims)
        firsts.append(sims[blocks[0]])
        lasts.append(sims[blocks[-1]])
    first, last = float(np.mean(firsts)), float(np.mean(lasts))
    verdict(9, "similarity trend (soft)", first > last,
            f"epoch T/2 vs final, 3-seed mean: first masked block {first:.4f}, last block {last:.4f}")


def test_criterion_10_wall_time(tmp_path):
    path = os.path.join(CONFIGS, "desk_mlp_baseline.ini")
    base_cfg = load_config(path)
    frz_cfg = load_config(path, {"freeze": {"target": 0.2}})
    times = {"base": [], "frz": []}
    flops = {}
    for rep in range(2):
        for name, cfg in (("base", base_cfg), ("frz", frz_cfg)):
            res = run_train(cfg, str(tmp_path / f"{name}{rep}"))
            times[name].append(sum(res.timings))
            flops[name] = res.summary["cum_flops"]
    fr = 1 - flops["frz"] / flops["base"]
    tr = 1 - min(times["frz"]) / min(times["base"])
    verdict(10, "wall-time acceleration (soft)", fr >= 0.2 and tr >= 0.10,
            f"FLOPs reduction {fr:.2%} by freezing alone; epoch wall time {min(times['base']):.1f} s -> "
            f"{min(times['frz']):.1f} s ({tr:.2%} faster)")
