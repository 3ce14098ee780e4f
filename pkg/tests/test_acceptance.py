"""Acceptance criteria, one printed PASS/FAIL line each.

The two long experiments (MNIST and the synthetic transition set) run in full
here; together they take roughly an hour on one CPU core.
"""
import json
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from stagnn import autodiff as ad
from stagnn.cli import main as cli_main
from stagnn.datasets import (
    LAND_COVER, SyntheticSpec, generate_synthetic, load_mnist, load_temporal_dir, mnist_to_graphs,
    records_to_supergraphs,
)
from stagnn.graph import GraphBatch, Rag, SuperGraph, build_supergraph
from stagnn.nn import (
    GraphClassifier, LayerParams, ModelConfig, count_params, gatv1_attention, gatv2_attention, gcn_layer,
    gcp_readout, group_layers, gsp_readout, init_params, mlp_head, node_embeddings, sagnn_attention_layer,
    sagnn_first_layer,
)
from stagnn.segmentation import Image, load_image, slic
from stagnn.training import TrainConfig, evaluate, split_dataset, train, train_ensemble

from conftest import flood_fill_connected, is_partition, mnist_paths, needs_mnist, numeric_grad, random_graph, rel_error

GRAD_TOL = 1e-5
GRAD_GRAPHS = 20
GRAD_SECONDS = 60.0
ATTN_TOL = 1e-6
ATTN_GRAPHS = 1000
ISOLATION_TOL = 1e-12
SLIC_BAND = (50, 100)
MNIST_MINUTES = 30.0
# Seeds 0, 1 and 2 of run_mnist reached 0.891, 0.891 and 0.900; the bound is the lowest minus 0.02.
MNIST_THRESHOLD = 0.871
STAG_MARGIN = 0.05
PARAM_BAND = (20_000, 60_000)


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- 1. gradients


def _grad_case(kind, rng):
    """Scalar loss ``sum(R * out)`` for one layer or readout plus its input arrays."""
    g = random_graph(rng, 5, 10, p=0.4)
    H = rng.standard_normal((g.n_nodes, 3))
    n = g.n_nodes
    if kind == "gcn":
        arrays = [H, rng.standard_normal((4, 3)), rng.standard_normal(4)]
        fn = lambda H, W, b: gcn_layer(H, g, LayerParams(W, None, b), "identity")
    elif kind in ("gatv1", "sagnn-attention"):
        layer = gatv1_attention if kind == "gatv1" else sagnn_attention_layer
        arrays = [H, rng.standard_normal((4, 3)), rng.standard_normal((2, 4)), rng.standard_normal(4)]
        fn = lambda H, W, a, b: layer(H, g, LayerParams(W, a, b), "identity").H
    elif kind == "gatv2":
        arrays = [H, rng.standard_normal((4, 6)), rng.standard_normal((2, 2)), rng.standard_normal(4)]
        fn = lambda H, W, a, b: gatv2_attention(H, g, LayerParams(W, a, b), "identity").H
    elif kind == "sagnn-first":
        arrays = [H, rng.standard_normal((4, 6)), rng.standard_normal(4)]
        fn = lambda H, W, b: sagnn_first_layer(H, g, LayerParams(W, None, b), "identity")
    elif kind == "gsp":
        arrays = [H]
        fn = lambda H: gsp_readout(H, g).x
    elif kind == "gcp":
        cut = int(rng.integers(1, n))
        sg = SuperGraph(np.hstack([g.features, np.zeros((n, 1))]),
                        g.edges[(g.edges < cut).all(1) | (g.edges >= cut).all(1)], (cut, n - cut))
        arrays = [H]
        fn = lambda H: gcp_readout(H, sg).x
    else:  # mlp head
        arrays = [rng.standard_normal((2, 3)), rng.standard_normal((5, 3)), rng.standard_normal(5) + 2.0,
                  rng.standard_normal((4, 5)), rng.standard_normal(4)]
        fn = lambda x, W1, b1, W2, b2: mlp_head(x, [LayerParams(W1, None, b1), LayerParams(W2, None, b2)])
    R = rng.standard_normal(fn(*arrays).shape)
    return fn, arrays, R


GRAD_KINDS = ("gcn", "gatv1", "gatv2", "sagnn-first", "sagnn-attention", "gsp", "gcp", "mlp")


def test_criterion_01_gradients(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    for kind in GRAD_KINDS:
        worst[kind] = 0.0
        for _ in range(GRAD_GRAPHS):
            fn, arrays, R = _grad_case(kind, rng)
            leaves = [ad.parameter(a) for a in arrays]
            grads = ad.backward(ad.sum(ad.mul(fn(*leaves), R)), leaves)
            value = lambda: float((fn(*arrays).data * R).sum())
            for a, gr in zip(arrays, grads):
                worst[kind] = max(worst[kind], rel_error(gr, numeric_grad(value, a)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < GRAD_TOL and elapsed < GRAD_SECONDS
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s for {GRAD_GRAPHS} graphs each"
    report(1, "finite-difference gradients", ok, detail)


# ---------------------------------------------------------------- 2. attention rows


def test_criterion_02_attention_normalisation(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(ATTN_GRAPHS):
        g = random_graph(rng, 1, 12, p=float(rng.uniform(0.1, 0.9)))
        heads = int(rng.integers(1, 3))
        if i % 3 == 2:
            p = LayerParams(rng.standard_normal((heads * 4, 6)) * 5, rng.standard_normal((heads, 4)) * 5)
            act = gatv2_attention(g.features, g, p)
        else:
            p = LayerParams(rng.standard_normal((heads * 4, 3)) * 5, rng.standard_normal((heads, 8)) * 5)
            act = (gatv1_attention if i % 3 == 0 else sagnn_attention_layer)(g.features, g, p)
        sums = np.zeros((g.n_nodes, heads))
        np.add.at(sums, act.dst, act.attn)
        worst = max(worst, float(np.abs(sums - 1).max()))
        assert (act.attn >= 0).all()
    report(2, "attention rows sum to one", worst < ATTN_TOL, f"max |sum - 1| = {worst:.1e} over {ATTN_GRAPHS} graphs")


# ---------------------------------------------------------------- 3. block isolation


def test_criterion_03_block_isolation(report):
    rng = np.random.default_rng(11)
    cfg = ModelConfig(in_dim=4, hidden_dims=(16, 16), n_frames=3)
    worst = 0.0
    for trial in range(100):
        gnn, _ = group_layers(cfg, init_params(cfg, seed=trial, dtype=np.float64))
        sg = build_supergraph([random_graph(rng, 3, 10) for _ in range(3)])
        H = node_embeddings(GraphBatch([sg]), gnn, cfg).data
        lo, hi = sg.frame_offsets[1], sg.frame_offsets[2]
        feats = sg.features.copy()
        feats[lo:hi, :-1] += rng.standard_normal((hi - lo, 3))
        H2 = node_embeddings(GraphBatch([SuperGraph(feats, sg.edges, sg.frame_sizes)]), gnn, cfg).data
        keep = np.r_[0:lo, hi:sg.n_nodes]
        worst = max(worst, float(np.abs(H[keep] - H2[keep]).max()))
        assert not np.allclose(H[lo:hi], H2[lo:hi])
    report(3, "frames do not exchange messages", worst <= ISOLATION_TOL,
           f"max change in frames 1 and 3 = {worst:.1e} over 100 supergraphs")


# ---------------------------------------------------------------- 4. readouts


def test_criterion_04_readout_invariances(report):
    rng = np.random.default_rng(12)
    gsp_worst, gcp_worst, swaps_differ = 0.0, 0.0, 0
    cfg = ModelConfig(in_dim=4, hidden_dims=(8, 8), readout="gcp", n_frames=2)
    gnn, _ = group_layers(cfg, init_params(cfg, seed=1, dtype=np.float64))
    for _ in range(100):
        g = random_graph(rng, 3, 10)
        H = rng.standard_normal((g.n_nodes, 5))
        perm = rng.permutation(g.n_nodes)
        gsp_worst = max(gsp_worst, float(np.abs(gsp_readout(H, g).numpy() - gsp_readout(H[perm], g).numpy()).max()))

        a, b = random_graph(rng, 3, 8), random_graph(rng, 3, 8)
        sg = build_supergraph([a, b])
        Hs = node_embeddings(GraphBatch([sg]), gnn, cfg).data
        inner = np.concatenate([rng.permutation(a.n_nodes), a.n_nodes + rng.permutation(b.n_nodes)])
        gcp_worst = max(gcp_worst, float(np.abs(gcp_readout(Hs, sg).numpy() - gcp_readout(Hs[inner], sg).numpy()).max()))
        swapped = build_supergraph([b, a])
        Hw = node_embeddings(GraphBatch([swapped]), gnn, cfg).data
        swaps_differ += not np.allclose(gcp_readout(Hs, sg).numpy(), gcp_readout(Hw, swapped).numpy())
    # Reordered float sums may differ in the last bit, so exactness is checked on integer-valued rows.
    Hi = rng.integers(-50, 50, (9, 4)).astype(float)
    g = Rag(np.zeros((9, 1)))
    exact = np.array_equal(gsp_readout(Hi, g).numpy(), gsp_readout(Hi[rng.permutation(9)], g).numpy())
    ok = gsp_worst < 1e-12 and exact and gcp_worst < 1e-12 and swaps_differ == 100
    report(4, "GSP/GCP invariances", ok,
           f"GSP perm diff {gsp_worst:.1e} (integer case exact: {exact}); GCP within-frame diff {gcp_worst:.1e}; "
           f"frame swap changed GCP in {swaps_differ}/100")


# ---------------------------------------------------------------- 5. SLIC audit


@needs_mnist
def test_criterion_05_slic_partition_audit(report, tmp_path):
    records = load_mnist(*mnist_paths(), limit=100)
    bad = 0
    for r in records:
        lm = slic(Image(r.frames[0].astype(np.float64)))
        bad += not (is_partition(lm) and flood_fill_connected(lm.labels))
    generate_synthetic(SyntheticSpec(image_size=256, n_per_class=2, seed=3), tmp_path)
    counts = []
    for rec in load_temporal_dir(tmp_path):
        lm = slic(load_image(rec.frames[0]))
        bad += not (is_partition(lm) and flood_fill_connected(lm.labels))
        counts.append(lm.n_segments)
    in_band = all(SLIC_BAND[0] <= c <= SLIC_BAND[1] for c in counts)
    report(5, "SLIC partition and 256px segment count", bad == 0 and in_band and len(counts) == 10,
           f"{bad} failing label maps of 110; 256px counts {min(counts)}-{max(counts)} in {list(SLIC_BAND)}")


# ---------------------------------------------------------------- 6. MNIST


def run_mnist(seed: int, cache_dir=None, minutes: float = MNIST_MINUTES, log=None) -> dict:
    """Desk-scale protocol: first 10k training digits (85/15 train/val), first 2k test digits."""
    t0 = time.perf_counter()
    train_recs = load_mnist(*mnist_paths("train"), limit=10_000)
    test_recs = load_mnist(*mnist_paths("test"), limit=2_000)
    graphs = mnist_to_graphs(train_recs + test_recs, cache_dir=cache_dir)
    labels = np.array([r.label for r in train_recs + test_recs])
    tr, va, _ = split_dataset(np.arange(10_000), seed, labels[:10_000], fractions=(0.85, 0.15, 0.0))
    prep = time.perf_counter() - t0
    budget = minutes * 60 - prep - 120.0
    res = train(ModelConfig(in_dim=3), graphs, labels,
                TrainConfig(seed=seed, deterministic=True, time_budget=budget),
                splits=(tr, va, np.arange(10_000, 12_000)), log=log)
    return {"seed": seed, "test_accuracy": res.test.accuracy, "epochs": len(res.history),
            "best_epoch": res.best_epoch, "prep_s": prep, "total_s": time.perf_counter() - t0}


@needs_mnist
def test_criterion_06_mnist(report):
    cache = os.environ.get("STAGNN_CACHE_DIR")
    with tempfile.TemporaryDirectory() as tmp:
        out = run_mnist(0, cache_dir=cache or tmp)
    ok = out["test_accuracy"] >= MNIST_THRESHOLD and out["total_s"] <= MNIST_MINUTES * 60
    report(6, "SAG-NN on superpixel MNIST (10k/2k)", ok,
           f"test accuracy {out['test_accuracy']:.4f} (bound {MNIST_THRESHOLD:.4f}) after {out['epochs']} epochs, "
           f"{out['total_s'] / 60:.1f} min including {out['prep_s']:.0f}s graph building")


# ---------------------------------------------------------------- 7. spatio-temporal comparison


SYNTH_BUDGET = 300.0


def run_synthetic(root, cache_dir=None, seed: int = 0, budget: float = SYNTH_BUDGET, log=None) -> dict:
    """STAG-NN-BA (GSP and GCP) versus the per-frame ensemble on the same split."""
    generate_synthetic(SyntheticSpec(seed=seed), root)
    records = load_temporal_dir(root)
    sgs = records_to_supergraphs(records, cache_dir=cache_dir)
    labels = np.array([r.label for r in records])
    tr, va, te = (np.asarray(s) for s in split_dataset(np.arange(len(sgs)), seed, labels))
    out = {}
    for readout in ("gsp", "gcp"):
        cfg = ModelConfig(in_dim=sgs[0].feature_dim, readout=readout, n_frames=3, n_classes=5)
        res = train(cfg, sgs, labels, TrainConfig(seed=seed, deterministic=True, time_budget=budget),
                    splits=(tr, va, te), log=log)
        out[f"stag-{readout}"] = res.test.accuracy
    frame_index = {c: i for i, c in enumerate(LAND_COVER)}
    frame_labels = np.array([[frame_index[c] for c in r.frame_labels] for r in records])
    cfg = ModelConfig(in_dim=sgs[0].feature_dim - 1, n_classes=len(LAND_COVER))
    ens = train_ensemble(cfg, sgs, frame_labels, LAND_COVER, list(SyntheticSpec().classes),
                         TrainConfig(seed=seed, deterministic=True, time_budget=budget / 3),
                         splits=(tr, va, te), log=log)
    test_sgs = [sgs[i] for i in te]
    out["sagnn-e"] = float((ens.predict(test_sgs) == labels[te]).mean())
    out["sagnn-e-frame-accuracy"] = float((ens.frame_predictions(test_sgs) == frame_labels[te]).mean())
    return out


def test_criterion_07_spatio_temporal(report, tmp_path):
    cache = os.environ.get("STAGNN_CACHE_DIR")
    out = run_synthetic(tmp_path / "synthetic", cache_dir=cache)
    gsp, gcp, ens = out["stag-gsp"], out["stag-gcp"], out["sagnn-e"]
    ok = gsp - ens >= STAG_MARGIN and gsp >= gcp
    report(7, "STAG-GSP beats the voting ensemble and GCP", ok,
           f"STAG-GSP {gsp:.4f}, STAG-GCP {gcp:.4f}, SAG-NN-E {ens:.4f} "
           f"(frame accuracy {out['sagnn-e-frame-accuracy']:.4f}); margin {gsp - ens:+.4f} vs {STAG_MARGIN}")


# ---------------------------------------------------------------- 8. forward cost


def test_criterion_08_forward_cost(report, tmp_path):
    generate_synthetic(SyntheticSpec(n_per_class=1, seed=0), tmp_path / "data")
    assert cli_main(["bench-fpt", "--data", str(tmp_path / "data"), "--models", "stag-gsp,sagnn-e",
                     "--n-passes", "100", "--warmup", "10", "--out", str(tmp_path / "bench.json")]) == 0
    rows = {r["model"]: r for r in json.loads((tmp_path / "bench.json").read_text())["results"]}
    stag, ens = rows["stag-gsp"], rows["sagnn-e"]
    ok = stag["op_count"] < ens["op_count"] and stag["median_ms"] < ens["median_ms"]
    report(8, "one supergraph forward is cheaper than T frame forwards", ok,
           f"ops {stag['op_count']} vs {ens['op_count']}; median {stag['median_ms']:.3f} ms vs "
           f"{ens['median_ms']:.3f} ms over 100 passes")


# ---------------------------------------------------------------- 9. parameters


def test_criterion_09_param_count(report):
    n = count_params(ModelConfig(in_dim=3))
    n_rgb = count_params(ModelConfig(in_dim=5))
    ok = PARAM_BAND[0] <= n <= PARAM_BAND[1] and PARAM_BAND[0] <= n_rgb <= PARAM_BAND[1]
    assert GraphClassifier(ModelConfig(in_dim=3)).n_params() == n
    report(9, "default SAG-NN parameter count", ok,
           f"{n} (grey MNIST) and {n_rgb} (RGB) in [{PARAM_BAND[0]}, {PARAM_BAND[1]}]")


# ---------------------------------------------------------------- 10. determinism


def test_criterion_10_determinism(report, tmp_path):
    generate_synthetic(SyntheticSpec(image_size=32, n_per_class=6, seed=1), tmp_path / "data")
    csvs = []
    for run in ("a", "b"):
        argv = ["train", "--data", str(tmp_path / "data"), "--out", str(tmp_path / run), "--seed", "9",
                "--deterministic", "--max-epochs", "5", "--n-segments", "30", "--hidden-dims", "32,32"]
        assert cli_main(argv) == 0
        csvs.append((tmp_path / run / "metrics.csv").read_bytes())
    epochs = len(csvs[0].splitlines()) - 1
    report(10, "identical seeds give byte-identical metrics", csvs[0] == csvs[1],
           f"{len(csvs[0])} bytes, {epochs} epochs")
