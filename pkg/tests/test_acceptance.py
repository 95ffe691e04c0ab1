"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The heavy criteria (ablation ordering, alignment effect, more-views claim)
share one set of trained runs: three variants x five training seeds on a
fixed synthetic 4-class, 3-view dataset of 2000 samples, 50 epochs each.
Run with `pytest tests/test_acceptance.py -v -s` to see the lines and
timing.
"""

import dataclasses
import math
import statistics

import numpy as np
import pytest

from ipmc import align as al
from ipmc import dataio
from ipmc import diffmath as dm
from ipmc import encoders as enc
from ipmc import evalkit
from ipmc import membank as mb
from ipmc import mioracle as mi
from ipmc import pools as pl
from ipmc import trainer as tr
from ipmc import uniloss as ul
from ipmc.cli import main as cli_main

SEEDS = (0, 1, 2, 3, 4)

TRAIN_KWARGS = dict(
    epochs=50,
    batch_size=250,
    lr=8e-3,
    beta=0.02,
    widths=(64,),
    embed_dim=32,
    loss=ul.LossConfig(gamma=4.0),
    align=al.AlignConfig(
        k_critic=10, critic_hidden=(64, 32, 16), critic_lr=1e-2, gp_weight=1.0
    ),
    pool=pl.PoolConfig(pool_negatives=128, sap_start_epoch=10, eta=10),
)

DATASET_KWARGS = dict(
    classes=4,
    n_per_class=500,
    latent_dim=6,
    views=3,
    noise=0.5,
    seed=100,
    view_dim=24,
    class_sep=4.0,
    clusters_per_class=2,
    private_noise=2.5,
    private_dim=4,
    view_offset=0.3,
)


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"{name}: {'pass' if ok else 'FAIL'}" + (f" ({detail})" if detail else ""))


@pytest.fixture(scope="module")
def dataset():
    return dataio.gen_synthetic(**DATASET_KWARGS)


@pytest.fixture(scope="module")
def trained_runs(dataset):
    """probe / view-discriminability / subset accuracies per (variant, seed)."""
    tri, tei = dataset.train_indices, dataset.test_indices
    ytr, yte = dataset.labels[tri], dataset.labels[tei]
    view_labels = np.repeat(np.arange(dataset.m), dataset.n)

    def probe(etr, ete, views=None):
        return evalkit.linear_probe(
            tr.concat_features(etr, views), ytr, tr.concat_features(ete, views), yte
        )

    def disc(etr, ete):
        # all samples pooled: the view classifier should not be data-starved
        pooled = np.concatenate(
            [np.concatenate([a, b]) for a, b in zip(etr, ete)], axis=0
        )
        return evalkit.view_discriminability(pooled, view_labels)

    runs = {}
    for seed in SEEDS:
        rnd = enc.init_params(
            [64, 32], dataset.m, 7000 + seed, list(dataset.dims)
        )
        retr = tr.encode_dataset(rnd, dataset, tri)
        rete = tr.encode_dataset(rnd, dataset, tei)
        runs[("random", seed)] = {"probe": probe(retr, rete)}
        for variant in tr.VARIANTS:
            cfg = tr.TrainConfig(seed=seed, variant=variant, **TRAIN_KWARGS)
            state, history = tr.fit(cfg, dataset)
            etr = tr.encode_dataset(state.params, dataset, tri)
            ete = tr.encode_dataset(state.params, dataset, tei)
            entry = {
                "probe": probe(etr, ete),
                "disc": disc(etr, ete),
                "unisap_first": history.rows[0]["loss_unisap"],
                "unisap_last": history.rows[-1]["loss_unisap"],
            }
            if variant == "sap+da":
                entry["subsets"] = {
                    tuple(views): probe(etr, ete, views)
                    for views in ([0], [1], [2], [0, 1], [0, 2], [1, 2])
                }
            runs[(variant, seed)] = entry
    return runs


def median_of(runs, variant, key):
    return statistics.median(runs[(variant, seed)][key] for seed in SEEDS)


# ---------------------------------------------------------------------------


def test_ac1_gradient_suite():
    """AC-1: primitives and the full pair/total losses vs central differences."""
    rng = np.random.default_rng(0)
    worst = 0.0

    # every primitive at 100 generic points (via the shared parametrized ops)
    from test_diffmath import PRIMITIVES

    for name, build in PRIMITIVES.items():
        for _ in range(100):
            point = {
                "a": rng.normal(size=4) + np.sign(rng.normal(size=4)) * 0.2,
                "b": rng.normal(size=4) + np.sign(rng.normal(size=4)) * 0.2,
                "m": rng.normal(size=(3, 4)) + 0.2,
                "m2": rng.normal(size=(3, 4)),
                "w": rng.normal(size=(4, 2)),
                "c": rng.normal(size=2),
            }
            graph = dm.CompGraph(tuple(point), lambda i: dm.reduce_sum(build(i)))
            worst = max(worst, dm.finite_difference_check(graph, point, 1e-5))

    # the closed-form pair loss over 100 random similarity sets
    cfg = ul.LossConfig(gamma=32.0, delta=0.35, mode="unified")
    for _ in range(100):
        point = {
            "sp": rng.uniform(0.05, 0.95, size=rng.integers(2, 8)),
            "sn": rng.uniform(0.05, 0.95, size=rng.integers(2, 10)),
        }
        graph = dm.CompGraph(("sp", "sn"), lambda i: ul.pair_loss_node(i["sp"], i["sn"], cfg))
        worst = max(worst, dm.finite_difference_check(graph, point, 1e-5))

    # the total objective (pair loss through encoders + beta * frozen-critic
    # alignment) at 100 random points, rotating through the parameters
    m, din, hid, d_emb = 2, 4, 5, 4
    bank = mb.bank_init(12, m, d_emb, seed=1)
    critic = al.init_critic(d_emb, seed=2, hidden=(6, 5, 4))
    pool_cfg = pl.PoolConfig(pool_negatives=5, sap_start_epoch=99)
    loss_cfg = ul.LossConfig(gamma=8.0)
    def kink_distance(params, raw):
        # smallest |relu pre-activation| anywhere in encoders and critic
        dist = math.inf
        embs = []
        for v in range(m):
            h = raw[v]
            for w, b in params.stacks[v]:
                z = h @ w + b
                dist = min(dist, float(np.min(np.abs(z))))
                h = np.maximum(z, 0.0)
            embs.append(h / np.linalg.norm(h, axis=1, keepdims=True))
        for x in embs:
            h = x
            for w, b in critic.layers[:-1]:
                z = h @ w + b
                dist = min(dist, float(np.min(np.abs(z))))
                h = np.maximum(z, 0.0)
        return dist

    trial = 0
    attempt = 0
    while trial < 100:
        attempt += 1
        params = enc.init_params([hid, d_emb], m, 3000 + attempt, din)
        for stack in params.stacks:
            for _, b in stack:
                b += 0.6
        raw = [np.abs(rng.normal(size=(3, din))) + 0.2 for _ in range(m)]
        # the check's own precondition: stay clear of relu kinks
        if kink_distance(params, raw) < 1e-3:
            continue
        trial += 1
        values = params.param_dict()
        names = list(values)

        def build(inp):
            nodes = []
            for v in range(m):
                layers = [
                    (inp[f"enc/v{v}/l{l}/W"], inp[f"enc/v{v}/l{l}/b"])
                    for l in range(2)
                ]
                nodes.append(enc.forward_node(dm.constant(raw[v]), layers))
            anchor_losses = []
            for b_i in range(3):
                pools_ = pl.build_pools(
                    [nodes[v].value[b_i] for v in range(m)],
                    bank,
                    b_i,
                    pool_cfg,
                    np.random.default_rng(b_i),
                )
                pos = dm.concat(
                    [
                        dm.gather_rows(nodes[0], [b_i]),
                        dm.gather_rows(nodes[1], [b_i]),
                        dm.constant(pools_.pos_feats[m:]),
                    ]
                )
                gallery = dm.concat([pos, dm.constant(pools_.neg_feats)])
                sims = dm.reshape(dm.matmul(pos, dm.transpose(gallery)), (-1,))
                n_pos, n_all = pools_.n_pos, pools_.n_pos + pools_.n_neg
                ii, jj = pl.pos_pair_indices(n_pos)
                s_pos = dm.gather_rows(sims, ii * n_all + jj)
                cols = np.arange(n_pos, n_all)
                s_neg = dm.gather_rows(
                    sims, (np.arange(n_pos)[:, None] * n_all + cols[None, :]).ravel()
                )
                anchor_losses.append(ul.pair_loss_node(s_pos, s_neg, loss_cfg))
            unisap = dm.mul(dm.constant(1.0 / 3.0), anchor_losses[0] + anchor_losses[1] + anchor_losses[2])
            layers = [(dm.constant(w), dm.constant(bb)) for w, bb in critic.layers]
            est = al.estimate_node(layers, nodes[0], nodes[1])
            return dm.add(unisap, dm.mul(dm.constant(0.5), est))

        wrt = [names[trial % len(names)]]
        graph = dm.CompGraph(tuple(names), build)
        worst = max(worst, dm.finite_difference_check(graph, values, 1e-5, wrt=wrt))

    ok = worst < 1e-4
    report("AC-1 gradient suite", ok, f"max rel err {worst:.2e}")
    assert ok


def test_ac2_gamma_limit():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        sp = rng.uniform(0, 1, size=rng.integers(1, 15))
        sn = rng.uniform(0, 1, size=rng.integers(1, 15))
        margin = rng.uniform(0, 0.5)
        worst = max(
            worst,
            abs(ul.softened_loss(sp, sn, margin, 2.0**10) - ul.hinge_loss(sp, sn, margin)),
        )
    ok = worst < 1e-2
    report("AC-2 gamma limit", ok, f"max |softened - hinge| {worst:.2e}")
    assert ok


def test_ac3_algebraic_equivalence():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        sp = rng.uniform(0, 1, size=rng.integers(1, 12))
        sn = rng.uniform(0, 1, size=rng.integers(1, 12))
        worst = max(worst, ul.algebraic_equivalence_check(sp, sn, 0.35, 32.0))
    ok = worst < 1e-9
    report("AC-3 leveraged == unified", ok, f"max dev {worst:.2e}")
    assert ok


def test_ac4_critic_vs_oracle():
    cfg = al.AlignConfig(k_critic=200, critic_lr=1e-2, critic_hidden=(128, 64, 32))
    checks = []
    for seed in (0, 1, 2):
        for dmu in (0.5, 1.0):
            rng = np.random.default_rng(100 + seed)
            a = rng.normal(0.0, 0.1, size=(256, 1))
            b = a + dmu
            truth = al.exact_w1_1d(a, b)
            critic = al.init_critic(1, seed=seed, hidden=(128, 64, 32))
            _, est, _ = al.train_critic(critic, a, b, cfg, np.random.default_rng(seed))
            checks.append(abs(abs(est) - truth) <= 0.2 * truth)
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2048, 1)), rng.normal(size=(2048, 1))
    critic = al.init_critic(1, seed=9, hidden=(128, 64, 32))
    _, est, _ = al.train_critic(critic, a, b, cfg, np.random.default_rng(9))
    same_ok = abs(est) < 0.1
    ok = all(checks) and same_ok
    report(
        "AC-4 critic vs 1-D oracle",
        ok,
        f"{sum(checks)}/6 shifted checks, identical-dist |est|={abs(est):.3f}",
    )
    assert ok


def test_ac5_ablation_ordering(trained_runs):
    med = {v: median_of(trained_runs, v, "probe") for v in tr.VARIANTS}
    med["random"] = statistics.median(
        trained_runs[("random", s)]["probe"] for s in SEEDS
    )
    ordering_ok = (
        med["sap+da"] >= med["fp+da"] - 0.005 and med["fp+da"] >= med["fp"] - 0.005
    )
    margin_ok = all(med[v] >= med["random"] + 0.10 for v in tr.VARIANTS)
    learns_ok = all(
        trained_runs[(v, s)]["unisap_last"] < trained_runs[(v, s)]["unisap_first"]
        for v in tr.VARIANTS
        for s in SEEDS
    )
    ok = ordering_ok and margin_ok and learns_ok
    report(
        "AC-5 ablation ordering",
        ok,
        f"medians fp={med['fp']:.3f} fp+da={med['fp+da']:.3f} "
        f"sap+da={med['sap+da']:.3f} random={med['random']:.3f}",
    )
    assert ok


def test_ac6_alignment_effect(trained_runs):
    fp = median_of(trained_runs, "fp", "disc")
    fpda = median_of(trained_runs, "fp+da", "disc")
    ok = fpda <= fp - 0.10
    report("AC-6 alignment effect", ok, f"view-disc fp={fp:.3f} fp+da={fpda:.3f}")
    assert ok


def test_ac7_view_filter_precision():
    rng = np.random.default_rng(3)
    dim, n_classes = 12, 3
    axes = np.zeros((n_classes, dim))
    for c in range(n_classes):
        axes[c, 4 * c : 4 * c + 4] = 0.5

    def sample(c):
        v = np.abs(axes[c] + 0.1 * rng.normal(size=dim))
        return v / np.linalg.norm(v)

    # check the stated premise: within-class cosine beats cross by >= 0.2
    probes = {c: np.stack([sample(c) for _ in range(50)]) for c in range(n_classes)}
    within = np.mean([np.mean(probes[c] @ probes[c].T) for c in range(n_classes)])
    cross = np.mean(probes[0] @ probes[1].T)
    assert within - cross >= 0.2

    cfg = pl.PoolConfig(sap_start_epoch=0, eta=10)
    hits = total = 0
    while total < 1000:
        anchor_class = total % n_classes
        pos = np.stack([sample(anchor_class) for _ in range(3)])
        neg_classes = [int(rng.integers(0, n_classes)) for _ in range(8)]
        if anchor_class not in neg_classes:
            continue
        neg = np.stack([sample(c) for c in neg_classes])
        pools_ = pl.ContrastPools(
            0, pos, [pl.PROV_BATCH] * 3, neg, np.arange(8, dtype=np.int64)
        )
        tracker = pl.SimilarityTracker(10)
        scores = pl.record_pool_similarities(pools_, tracker, 0)
        _, events = pl.view_filter_transfer(pools_, tracker, 1, 0, cfg, scores=scores)
        total += 1
        hits += neg_classes[events[0][2]] == anchor_class
    rate = hits / total
    ok = rate >= 0.95
    report("AC-7 view-filter precision", ok, f"{hits}/{total} same-class = {rate:.3f}")
    assert ok


def test_ac8_information_identities():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(2, 4, size=2))
        table = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
        joint = mi.DiscreteJoint(("A", "B"), table)
        worst = max(worst, mi.kl_identity_check(joint, "A", "B"))
    table = np.zeros((2, 2, 2))
    for x in (0, 1):
        for z in (0, 1):
            table[x, x ^ z, z] = 0.25
    xor = mi.DiscreteJoint(("X", "Y", "Z"), table)
    triple = (
        mi.info_measure(xor, "I", "X", "Y"),
        mi.info_measure(xor, "CMI", "X", "Y", "Z"),
        mi.info_measure(xor, "INT", "X", "Y", "Z"),
    )
    ok = worst < 1e-12 and triple == (0.0, 1.0, -1.0)
    report("AC-8 information identities", ok, f"max KL dev {worst:.2e}, xor={triple}")
    assert ok


def test_ac9_more_views_help(trained_runs):
    def med_subset(views):
        return statistics.median(
            trained_runs[("sap+da", s)]["subsets"][tuple(views)] for s in SEEDS
        )

    full = median_of(trained_runs, "sap+da", "probe")
    pairs = [med_subset(v) for v in ([0, 1], [0, 2], [1, 2])]
    singles = [med_subset(v) for v in ([0], [1], [2])]
    tol = 0.005
    ok = all(full >= p - tol for p in pairs) and all(
        p >= s - tol for p in pairs for s in singles
    )
    report(
        "AC-9 more views help",
        ok,
        f"3v={full:.3f} 2v={[f'{p:.3f}' for p in pairs]} 1v={[f'{s:.3f}' for s in singles]}",
    )
    assert ok


def test_ac10_determinism_and_round_trips(tmp_path):
    ds = dataio.gen_synthetic(3, 20, 4, 3, noise=0.5, seed=5, view_dim=8)
    data_path = tmp_path / "data.bin"
    dataio.write_dataset(ds, data_path)
    loaded = dataio.read_dataset(data_path)
    dataio.write_dataset(loaded, tmp_path / "data2.bin")
    dataset_ok = data_path.read_bytes() == (tmp_path / "data2.bin").read_bytes()

    config = tmp_path / "config.json"
    config.write_text(
        '{"epochs": 2, "batch": 24, "seed": 3, "widths": [10], "embed_dim": 6,'
        ' "pool_negatives": 12, "sap_start_epoch": 1, "k_critic": 2,'
        ' "critic_hidden": [10, 8, 6], "gamma": 8.0, "beta": 0.1}'
    )
    histories = []
    for name in ("runA", "runB"):
        out = tmp_path / name
        code = cli_main(
            ["train", "--config", str(config), "--data", str(data_path), "--out", str(out)]
        )
        assert code == 0
        histories.append((out / "history.csv").read_bytes())
    history_ok = histories[0] == histories[1]

    ck1 = tmp_path / "runA" / "checkpoint.bin"
    state = tr.load_checkpoint(ck1)
    tr.save_checkpoint(state, tmp_path / "ck2.bin")
    checkpoint_ok = ck1.read_bytes() == (tmp_path / "ck2.bin").read_bytes()

    ok = dataset_ok and history_ok and checkpoint_ok
    report(
        "AC-10 determinism and round trips",
        ok,
        f"dataset={dataset_ok} history={history_ok} checkpoint={checkpoint_ok}",
    )
    assert ok
