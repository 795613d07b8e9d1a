"""The ten acceptance criteria, each reporting one PASS/FAIL line."""

import time

import numpy as np
import pytest
import torch

from cdnas.autodiff import ParamVector
from cdnas.bilevel import BilevelConfig, BilevelTrainer, ModelConfig, hypergradient, neumann_inverse_hvp, train
from cdnas.graph import SynthConfig, build_graph, density_percent, make_splits, synth_generate
from cdnas.metrics import auc, rela_impr_auc, rela_impr_logloss
from cdnas.supernet import ALL_OPS, OpKind, Supernet, candidate_op_apply, mixed_layer

from conftest import ACCEPTANCE_LINES
from test_bilevel import fd_hypergradient, random_quadratic_bilevel, toy_losses
from toys import random_params, random_prop_graph

D = torch.float64


def report(n, ok, detail):
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def vec(*vals):
    return ParamVector.from_tensors({"x": torch.tensor(vals, dtype=D)})


def test_1_rela_impr_reproduction():
    got = [rela_impr_auc(0.7795, 0.7731), rela_impr_auc(0.6559, 0.6410), rela_impr_logloss(0.4268, 0.4533)]
    want = [2.34, 10.57, 6.21]
    errs = [abs(g - w) for g, w in zip(got, want)]
    report(1, max(errs) <= 0.01, "RelaImpr " + ", ".join(f"{g:.4f}%" for g in got) + f" (max err {max(errs):.4f}pp)")


TABLE1 = [  # users, items, interactions, printed density %
    (37387, 49273, 792314, 0.043), (37387, 236530, 945028, 0.011),
    (16738, 150190, 418603, 0.017), (16738, 61201, 380675, 0.037),
    (28506, 203698, 735192, 0.013), (28506, 52134, 364267, 0.025),
    (7576, 117771, 317503, 0.036), (7576, 11567, 84564, 0.096),
    (1390, 17707, 27128, 0.110), (1390, 8074, 12312, 0.110),
    (2809, 28253, 53995, 0.068), (2809, 14274, 37559, 0.094),
    (8235, 31484, 99594, 0.038), (8235, 18703, 66470, 0.043),
]


def test_2_density_reproduction():
    errs = [abs(density_percent(e, u, i) - d) for u, i, e, d in TABLE1]
    report(2, len(errs) == 14 and max(errs) <= 0.001, f"14 densities, max err {max(errs):.5f}pp")


def test_3_auc_oracle_equivalence():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = rng.integers(0, max(2, n // 4), n) / 7.0  # coarse grid forces ties
        pos, neg = s[y == 1], s[y == 0]
        oracle = ((pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])).mean()
        worst = max(worst, abs(auc(s, y) - oracle))
    elapsed = time.perf_counter() - start
    report(3, worst <= 1e-12 and elapsed < 30, f"1000 instances, max |diff| {worst:.2e}, {elapsed:.1f}s")


def _model_fd_rel_error(pg, net, users, items, labels, eps=1e-6):
    loss_of = lambda: torch.nn.functional.binary_cross_entropy_with_logits(net(pg, users, items), labels)
    params = [p for p in net.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss_of(), params)
    ana, num = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + eps
                up = loss_of().item()
                flat[k] = old - eps
                down = loss_of().item()
                flat[k] = old
                num.append((up - down) / (2 * eps))
                ana.append(g.view(-1)[k].item())
    ana, num = np.array(ana), np.array(num)
    return np.linalg.norm(ana - num) / np.linalg.norm(num)


def test_4_full_model_gradient_check():
    start = time.perf_counter()
    errs = {}
    for k, op in enumerate(ALL_OPS):
        for mixing in ("one-hot", "uniform"):
            rng = np.random.default_rng(100 + k)
            torch.manual_seed(k)
            pg, _ = random_prop_graph(rng, 8, 10, n_domains=2, density=0.4)  # 18 nodes
            net = Supernet(8, 10, 2, dim=3, head_widths=(4,)).double()
            if mixing == "one-hot":
                probs = torch.zeros(2, 2, 5, dtype=D)
                probs[..., k] = 1.0
                net.fix_arch(probs)
            users = rng.integers(0, 8, 12)
            items = rng.integers(0, 10, 12)
            labels = torch.tensor(rng.integers(0, 2, 12), dtype=D)
            errs[(op.value, mixing)] = _model_fd_rel_error(pg, net, users, items, labels)
    worst = max(errs.values())
    elapsed = time.perf_counter() - start
    report(4, worst < 1e-4 and elapsed < 120,
           f"10 op/mixing configs, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_5_hypergradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = []
    for _ in range(20):
        main, dev, solve, dev_np, lmax = random_quadratic_bilevel(rng)
        phi = rng.normal(size=5)
        hg = hypergradient(main, dev, vec(*solve(phi)), vec(*phi), K=50, alpha=0.9 / lmax)
        fd = fd_hypergradient(solve, dev_np, phi)
        errs.append(np.linalg.norm(hg.values.numpy() - fd) / np.linalg.norm(fd))
    main, dev = toy_losses()
    toy_ok = all(hypergradient(main, dev, vec(p), vec(p), K=5, alpha=1.0).values.item() == p for p in (0.3, -2.0, 7.5))
    elapsed = time.perf_counter() - start
    report(5, max(errs) < 1e-3 and toy_ok and elapsed < 60,
           f"20 quadratics, max rel err {max(errs):.2e}; toy hypergradient == phi: {toy_ok}; {elapsed:.1f}s")


def test_6_neumann_geometric_convergence():
    details, ok = [], True
    for h, alpha, v in ((1.0, 0.5, 1.0), (2.0, 0.3, -1.5), (0.8, 0.9, 2.0)):
        errs = [abs(neumann_inverse_hvp(vec(v), lambda p: p.like(h * p.values), k, alpha).values.item() - v / h)
                for k in range(21)]
        ratios = [b / a for a, b in zip(errs, errs[1:])]
        want = 1 - alpha * h
        ok &= all(float(f"{r:.3g}") == float(f"{want:.3g}") for r in ratios)
        details.append(f"H={h}, alpha={alpha}: ratios {min(ratios):.5f}..{max(ratios):.5f} vs {want:.5f}")
    report(6, ok, "; ".join(details))


def test_7_one_hot_mixture_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n_dom = int(rng.integers(1, 3))
        pg, _ = random_prop_graph(rng, int(rng.integers(2, 7)), int(rng.integers(2, 9)), n_domains=n_dom,
                                  density=float(rng.uniform(0.2, 0.8)))
        dim = int(rng.integers(2, 6))
        h = torch.tensor(rng.normal(size=(pg.n_nodes, dim)))
        p = random_params(rng, dim)
        for k, op in enumerate(ALL_OPS):
            probs = torch.zeros(n_dom, 5, dtype=D)
            probs[:, k] = 1.0
            want = sum(pg.node_masks[d][:, None] * candidate_op_apply(op, h, es, p) for d, es in enumerate(pg.domains))
            worst = max(worst, (mixed_layer(h, pg, probs, p) - want).abs().max().item())
    elapsed = time.perf_counter() - start
    report(7, worst <= 1e-6 and elapsed < 30, f"50 graphs x 5 ops, max |diff| {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# training-based criteria

DESK_MODEL = ModelConfig(dim=32, head_widths=(64, 32))


def desk_graph(seed, noise):
    cfg = SynthConfig(n_users=200, n_domains=2, shared_factor_strength=1.0, source_noise_fraction=noise, seed=seed)
    inter, _ = synth_generate(cfg)
    return build_graph(make_splits(inter, (0.8, 0.1, 0.1), seed=seed, target_domain="d0"), cfg.domain_spec)


def desk_config(seed, **kw):
    base = dict(max_epochs=30, warmup_epochs=5, patience=10, lr_inner=5e-3, lr_outer=1e-2, alpha=1e-3,
                batch_size=256, K=5, T_inner=5, seed=seed)
    base.update(kw)
    return BilevelConfig(**base)


def test_8_synthetic_transfer_ordering():
    start = time.perf_counter()
    res = {k: [] for k in ("FULL0", "NO-SOURCE0", "FULL5", "NO-IMPO5")}
    for seed in range(5):
        clean, noisy = desk_graph(seed, 0.0), desk_graph(seed, 0.5)
        res["FULL0"].append(train(clean, None, desk_config(seed), "FULL", DESK_MODEL)[1].auc)
        res["NO-SOURCE0"].append(train(clean, None, desk_config(seed), "NO-SOURCE", DESK_MODEL)[1].auc)
        res["FULL5"].append(train(noisy, None, desk_config(seed), "FULL", DESK_MODEL)[1].auc)
        res["NO-IMPO5"].append(train(noisy, None, desk_config(seed), "NO-IMPO", DESK_MODEL)[1].auc)
    m = {k: float(np.mean(v)) for k, v in res.items()}
    gap_src = m["FULL0"] - m["NO-SOURCE0"]
    gap_imp = m["FULL5"] - m["NO-IMPO5"]
    elapsed = time.perf_counter() - start
    per_seed = "; ".join(f"{k}=" + ",".join(f"{x:.4f}" for x in v) for k, v in res.items())
    print(per_seed)
    report(8, gap_src >= 0.02 and gap_imp >= 0.01 and elapsed < 1200,
           f"noise 0: FULL {m['FULL0']:.4f} - NO-SOURCE {m['NO-SOURCE0']:.4f} = {gap_src:+.4f} (need >= 0.02); "
           f"noise 0.5: FULL {m['FULL5']:.4f} - NO-IMPO {m['NO-IMPO5']:.4f} = {gap_imp:+.4f} (need >= 0.01); "
           f"{elapsed:.0f}s")


def _epoch_seconds(graph, ops):
    mc = ModelConfig(dim=32, head_widths=(64, 32), ops=ops)
    tr = BilevelTrainer(graph, desk_config(0, max_epochs=4, warmup_epochs=1, patience=100), mc, "FULL")
    res = tr.run()
    return float(np.mean([r["seconds"] for r in res.epoch_log]))


def test_9_candidate_count_scaling():
    graph = desk_graph(0, 0.0)
    start = time.perf_counter()
    one = _epoch_seconds(graph, (OpKind.LIGHTGCN.value,))
    five = _epoch_seconds(graph, tuple(o.value for o in ALL_OPS))
    elapsed = time.perf_counter() - start
    ratio = five / one
    report(9, ratio <= 6.0 and elapsed < 600,
           f"per-epoch {five:.2f}s with 5 ops vs {one:.2f}s with 1 op, ratio {ratio:.2f} (limit 6); {elapsed:.0f}s")


def test_10_training_protocol_invariants():
    cfg = SynthConfig(n_users=60, n_items_per_domain=30, positives_per_user=6, seed=3)
    inter, _ = synth_generate(cfg)
    graph = build_graph(make_splits(inter, (0.8, 0.1, 0.1), seed=3, target_domain="d0"), cfg.domain_spec)
    bc = BilevelConfig(warmup_epochs=10, max_epochs=100, patience=10, lr_inner=5e-3, alpha=1e-3, batch_size=128, seed=3)
    tr = BilevelTrainer(graph, bc, ModelConfig(dim=16, head_widths=(32, 16)), "FULL")
    res = tr.run()
    warm_ok = res.warmup_phi_unchanged == [True] * 10
    stop_ok = res.epochs_run <= 100 and (res.epochs_run == 100 or res.epochs_run - 1 - res.best_epoch == 10)
    disjoint = [r["disjoint"] for r in res.outer_log]
    disjoint_ok = bool(disjoint) and all(disjoint)
    report(10, warm_ok and stop_ok and disjoint_ok,
           f"phi unchanged in {sum(res.warmup_phi_unchanged)}/10 warm-up epochs; stopped after {res.epochs_run} epochs "
           f"(best {res.best_epoch}); {sum(disjoint)}/{len(disjoint)} outer steps disjoint")
