"""Command-line front door: data generation, training, evaluation, audits.

Config is a single JSON document; every run writes its resolved config
(defaults filled in) next to its outputs so an experiment can be
reproduced from the artifacts alone.  Failures are reported as one JSON
object on stderr: usage/config problems exit 2, runtime failures exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import align as al
from . import dataio, evalkit, mioracle, report
from . import pools as pl
from . import trainer as tr
from . import uniloss as ul
from .errors import ConfigError, DivergenceError, FormatError, IpmcError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


TRAIN_KEYS = {
    "gamma": 32.0,
    "delta": 0.35,
    "lambda": 0.25,
    "beta": 1.0,
    "k_top": 1,
    "eta": 10,
    "phi_dec": 6.0,
    "tau_dec": 1.0,
    "mode": "unified",
    "scale": 1.0,
    "k_critic": 5,
    "gp_weight": 10.0,
    "discrepancy": "wasserstein",
    "critic_lr": 1e-3,
    "critic_hidden": [1000, 128, 64],
    "pool_negatives": 4096,
    "include_bank_positives": True,
    "sap_start_epoch": 10,
    "seed": 0,
    "epochs": 50,
    "batch": 250,
    "lr": 3e-3,
    "widths": [48],
    "embed_dim": 32,
    "variant": "sap+da",
}

GEN_KEYS = {
    "kind": "synthetic",
    "classes": 4,
    "n_per_class": 500,
    "latent_dim": 6,
    "views": 3,
    "noise": 1.0,
    "view_dim": 24,
    "class_sep": 3.0,
    "train_fraction": 0.75,
    "seed": 0,
    "images": None,
    "labels": None,
}


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def _merge_defaults(user: dict, defaults: dict, what: str) -> dict:
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(user)
    return merged


def train_config_from_dict(raw: dict) -> tuple[tr.TrainConfig, dict]:
    """Build a TrainConfig from a flat JSON dict; returns (config, resolved)."""
    merged = _merge_defaults(raw, TRAIN_KEYS, "training")
    cfg = tr.TrainConfig(
        epochs=int(merged["epochs"]),
        batch_size=int(merged["batch"]),
        lr=float(merged["lr"]),
        seed=int(merged["seed"]),
        beta=float(merged["beta"]),
        variant=str(merged["variant"]),
        widths=tuple(int(w) for w in merged["widths"]),
        embed_dim=int(merged["embed_dim"]),
        loss=ul.LossConfig(
            gamma=float(merged["gamma"]),
            delta=float(merged["delta"]),
            margin=float(merged["lambda"]),
            phi_dec=float(merged["phi_dec"]),
            tau_dec=float(merged["tau_dec"]),
            mode=str(merged["mode"]),
            scale=float(merged["scale"]),
        ),
        align=al.AlignConfig(
            k_critic=int(merged["k_critic"]),
            gp_weight=float(merged["gp_weight"]),
            discrepancy=str(merged["discrepancy"]),
            critic_lr=float(merged["critic_lr"]),
            critic_hidden=tuple(int(h) for h in merged["critic_hidden"]),
        ),
        pool=pl.PoolConfig(
            pool_negatives=int(merged["pool_negatives"]),
            include_bank_positives=bool(merged["include_bank_positives"]),
            k_top=int(merged["k_top"]),
            eta=int(merged["eta"]),
            sap_start_epoch=int(merged["sap_start_epoch"]),
        ),
    )
    return cfg, merged


def _write_resolved(resolved: dict, out_dir: Path, name="resolved_config.json") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _features_from_checkpoint(dataset, checkpoint_path, views=None):
    state = tr.load_checkpoint(checkpoint_path)
    train_emb = tr.encode_dataset(state.params, dataset, dataset.train_indices)
    test_emb = tr.encode_dataset(state.params, dataset, dataset.test_indices)
    return (
        state,
        tr.concat_features(train_emb, views),
        tr.concat_features(test_emb, views),
        train_emb,
        test_emb,
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    merged = _merge_defaults(raw, GEN_KEYS, "generation")
    if args.seed is not None:
        merged["seed"] = args.seed
    if merged["kind"] == "synthetic":
        dataset = dataio.gen_synthetic(
            classes=int(merged["classes"]),
            n_per_class=int(merged["n_per_class"]),
            latent_dim=int(merged["latent_dim"]),
            views=int(merged["views"]),
            noise=float(merged["noise"]),
            seed=int(merged["seed"]),
            view_dim=merged["view_dim"],
            class_sep=float(merged["class_sep"]),
            train_fraction=float(merged["train_fraction"]),
        )
    elif merged["kind"] == "channels":
        if not merged["images"]:
            raise ConfigError("channel decomposition needs an 'images' .npy path")
        images = np.load(merged["images"])
        views = dataio.decompose_channels(images)
        n = views[0].shape[0]
        labels = (
            np.load(merged["labels"]).astype(np.int64)
            if merged["labels"]
            else np.zeros(n, dtype=np.int64)
        )
        rng = np.random.default_rng(int(merged["seed"]))
        train_mask = np.zeros(n, dtype=bool)
        order = rng.permutation(n)
        train_mask[order[: int(round(float(merged["train_fraction"]) * n))]] = True
        dataset = dataio.MultiViewDataset(views, labels, train_mask)
    else:
        raise ConfigError(f"unknown generation kind {merged['kind']!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_dataset(dataset, out)
    _write_resolved(merged, out.parent, out.name + ".config.json")
    print(f"wrote {out} (n={dataset.n}, m={dataset.m}, dims={dataset.dims})")
    return 0


def _cmd_train(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.variant is not None:
        raw["variant"] = args.variant
    cfg, resolved = train_config_from_dict(raw)
    dataset = dataio.read_dataset(args.data)
    out = Path(args.out)
    _write_resolved(resolved, out)
    try:
        state, history = tr.fit(cfg, dataset)
    except DivergenceError as exc:
        # keep the last consistent state and partial history for post-mortems
        if getattr(exc, "state", None) is not None:
            tr.save_checkpoint(exc.state, out / "checkpoint_abort.bin")
            if exc.history.rows:
                dataio.write_metrics_csv(exc.history.rows, out / "history.csv")
        raise
    tr.save_checkpoint(state, out / "checkpoint.bin")
    dataio.write_metrics_csv(history.rows, out / "history.csv")
    if history.transfer_events:
        dataio.write_metrics_csv(
            [
                {"epoch": e, "anchor": a, "negative_id": n, "smoothed": s}
                for e, a, n, s in history.transfer_events
            ],
            out / "transfers.csv",
        )
    report.save_history_figure(history.rows, out / "figures" / "loss_curves.png")
    print(f"trained {cfg.variant} for {cfg.epochs} epochs -> {out}")
    return 0


def _probe_rows(dataset, checkpoint, views=None):
    _, train_x, test_x, _, _ = _features_from_checkpoint(dataset, checkpoint, views)
    acc = evalkit.linear_probe(
        train_x,
        dataset.labels[dataset.train_indices],
        test_x,
        dataset.labels[dataset.test_indices],
    )
    return acc, test_x


def _echo_args(args, out: Path) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "fn"}
    _write_resolved(resolved, out)


def _cmd_probe(args) -> int:
    dataset = dataio.read_dataset(args.data)
    views = [int(v) for v in args.views.split(",")] if args.views else None
    acc, test_x = _probe_rows(dataset, args.checkpoint, views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_args(args, out)
    dataio.write_metrics_csv(
        [
            {"metric": "probe_accuracy", "value": acc},
            {"metric": "n_train", "value": len(dataset.train_indices)},
            {"metric": "n_test", "value": len(dataset.test_indices)},
        ],
        out / "probe.csv",
    )
    coords = evalkit.export_embedding_2d(test_x)
    labels = dataset.labels[dataset.test_indices]
    dataio.write_metrics_csv(
        [
            {"index": i, "x": coords[i, 0], "y": coords[i, 1], "label": int(labels[i])}
            for i in range(len(coords))
        ],
        out / "embedding_2d.csv",
    )
    report.save_embedding_figure(coords, labels, out / "figures" / "embedding_2d.png")
    print(f"probe accuracy {acc:.4f} -> {out}")
    return 0


def _cmd_knn(args) -> int:
    dataset = dataio.read_dataset(args.data)
    _, train_x, test_x, _, _ = _features_from_checkpoint(dataset, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_args(args, out)
    rows = []
    for qi, query in enumerate(test_x):
        hits = evalkit.knn_retrieve(query, train_x, args.k)
        dists = np.sum(np.abs(train_x[hits] - query), axis=1)
        for rank, (gi, dist) in enumerate(zip(hits, dists), start=1):
            rows.append(
                {
                    "query_index": int(dataset.test_indices[qi]),
                    "rank": rank,
                    "gallery_index": int(dataset.train_indices[gi]),
                    "l1_distance": float(dist),
                }
            )
    dataio.write_metrics_csv(rows, out / "knn.csv")
    print(f"wrote {len(rows)} retrieval rows -> {out / 'knn.csv'}")
    return 0


def _cmd_view_audit(args) -> int:
    dataset = dataio.read_dataset(args.data)
    _, _, _, _, test_emb = _features_from_checkpoint(dataset, args.checkpoint)
    pooled = np.concatenate(test_emb, axis=0)
    labels = np.repeat(np.arange(dataset.m), len(dataset.test_indices))
    acc = evalkit.view_discriminability(pooled, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_args(args, out)
    dataio.write_metrics_csv(
        [
            {"metric": "view_discriminability", "value": acc},
            {"metric": "chance", "value": 1.0 / dataset.m},
        ],
        out / "view_audit.csv",
    )
    print(f"view discriminability {acc:.4f} (chance {1.0 / dataset.m:.4f}) -> {out}")
    return 0


def _cmd_mi_audit(args) -> int:
    joint = mioracle.read_joint_csv(args.table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_args(args, out)
    rows = []
    for name in joint.names:
        rows.append({"measure": f"H({name})", "value": mioracle.info_measure(joint, "H", name)})
    for i, a in enumerate(joint.names):
        for b in joint.names[i + 1 :]:
            rows.append(
                {"measure": f"I({a};{b})", "value": mioracle.info_measure(joint, "I", a, b)}
            )
            rows.append(
                {
                    "measure": f"|I({a};{b}) - KL|",
                    "value": mioracle.kl_identity_check(joint, a, b),
                }
            )
    names = set(joint.names)
    view_vars = sorted(n for n in names if n.startswith("V"))
    if {"X", "T"} <= names and view_vars:
        audit = mioracle.assumption1_audit(
            joint, "X", "T", view_vars, [args.epsilon] * len(view_vars)
        )
        for entry in audit["per_view"]:
            rows.append(
                {
                    "measure": f"I(X;T|{entry['view']})",
                    "value": entry["residual"],
                }
            )
            rows.append(
                {
                    "measure": f"assumption1({entry['view']}, eps={args.epsilon})",
                    "value": "pass" if entry["passes"] else "fail",
                }
            )
        rows.append({"measure": "I(X;T|all views)", "value": audit["residual_all_views"]})
    if {"Y", "X", "V1", "V2"} <= names:
        for key, value in mioracle.definition1_report(joint).items():
            rows.append({"measure": key, "value": value})
    dataio.write_metrics_csv(rows, out / "mi_audit.csv")
    print(f"wrote {len(rows)} measures -> {out / 'mi_audit.csv'}")
    return 0


def _cmd_ablate(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    dataset = dataio.read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    resolved_all = {}
    for variant in tr.VARIANTS:
        raw_v = dict(raw)
        raw_v["variant"] = variant
        cfg, resolved = train_config_from_dict(raw_v)
        resolved_all[variant] = resolved
        state, history = tr.fit(cfg, dataset)
        train_emb = tr.encode_dataset(state.params, dataset, dataset.train_indices)
        test_emb = tr.encode_dataset(state.params, dataset, dataset.test_indices)
        acc = evalkit.linear_probe(
            tr.concat_features(train_emb),
            dataset.labels[dataset.train_indices],
            tr.concat_features(test_emb),
            dataset.labels[dataset.test_indices],
        )
        pooled = np.concatenate(test_emb, axis=0)
        view_labels = np.repeat(np.arange(dataset.m), len(dataset.test_indices))
        disc = evalkit.view_discriminability(pooled, view_labels)
        rows.append(
            {
                "variant": variant,
                "probe_accuracy": acc,
                "view_discriminability": disc,
                "loss_final": history.rows[-1]["loss_total"] if history.rows else 0.0,
            }
        )
        dataio.write_metrics_csv(
            history.rows, out / f"history_{variant.replace('+', '_')}.csv"
        )
    _write_resolved(resolved_all, out)
    dataio.write_metrics_csv(rows, out / "ablation.csv")
    report.save_ablation_figure(rows, out / "figures" / "ablation.png")
    for row in rows:
        print(
            f"{row['variant']}: probe={row['probe_accuracy']:.4f} "
            f"view_disc={row['view_discriminability']:.4f}"
        )
    return 0


def _cmd_check(args) -> int:
    from . import diffmath as dm

    rng = np.random.default_rng(0)
    results = []

    def suite(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed suite is a failure, not an abort
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
        print(f"{name}: {'pass' if ok else 'FAIL'} ({detail})")

    def gradient_suite():
        worst = 0.0
        for _ in range(20):
            point = {
                "x": rng.normal(size=(3, 4)) + 0.3,
                "w": 0.4 * rng.normal(size=(4, 3)),
                "b": rng.uniform(1.0, 2.0, size=3),
            }
            graph = dm.CompGraph(
                ("x", "w", "b"),
                lambda i: dm.reduce_sum(
                    dm.l2_normalize(dm.relu(dm.affine(i["x"], i["w"], i["b"])))
                ),
            )
            worst = max(worst, dm.finite_difference_check(graph, point, 1e-5))
        return worst < 1e-4, f"max rel err {worst:.2e}"

    def loss_gradient_suite():
        worst = 0.0
        cfg = ul.LossConfig()
        for _ in range(20):
            point = {
                "sp": rng.uniform(0.05, 0.95, size=6),
                "sn": rng.uniform(0.05, 0.95, size=8),
            }
            graph = dm.CompGraph(
                ("sp", "sn"), lambda i: ul.pair_loss_node(i["sp"], i["sn"], cfg)
            )
            worst = max(worst, dm.finite_difference_check(graph, point, 1e-5))
        return worst < 1e-4, f"max rel err {worst:.2e}"

    def gamma_limit_suite():
        worst = 0.0
        for _ in range(100):
            sp = rng.uniform(0, 1, size=rng.integers(1, 12))
            sn = rng.uniform(0, 1, size=rng.integers(1, 12))
            margin = rng.uniform(0, 0.5)
            worst = max(
                worst,
                abs(
                    ul.softened_loss(sp, sn, margin, 2.0**10)
                    - ul.hinge_loss(sp, sn, margin)
                ),
            )
        return worst < 1e-2, f"max gap {worst:.2e}"

    def equivalence_suite():
        worst = 0.0
        for _ in range(100):
            sp = rng.uniform(0, 1, size=rng.integers(1, 12))
            sn = rng.uniform(0, 1, size=rng.integers(1, 12))
            worst = max(worst, ul.algebraic_equivalence_check(sp, sn, 0.35, 32.0))
        return worst < 1e-9, f"max dev {worst:.2e}"

    def kl_identity_suite():
        worst = 0.0
        for _ in range(100):
            table = rng.dirichlet(np.ones(12)).reshape(3, 4)
            joint = mioracle.DiscreteJoint(("A", "B"), table)
            worst = max(worst, mioracle.kl_identity_check(joint, "A", "B"))
        return worst < 1e-12, f"max dev {worst:.2e}"

    def xor_suite():
        table = np.zeros((2, 2, 2))
        for x in (0, 1):
            for z in (0, 1):
                table[x, x ^ z, z] = 0.25
        joint = mioracle.DiscreteJoint(("X", "Y", "Z"), table)
        i = mioracle.info_measure(joint, "I", "X", "Y")
        cmi = mioracle.info_measure(joint, "CMI", "X", "Y", "Z")
        inter = mioracle.info_measure(joint, "INT", "X", "Y", "Z")
        ok = i == 0.0 and cmi == 1.0 and inter == -1.0
        return ok, f"(I, CMI, INT) = ({i}, {cmi}, {inter})"

    def w1_suite():
        ok = (
            al.exact_w1_1d([0.0], [0.8]) == 0.8
            and al.exact_w1_1d([0.0, 1.0], [2.0, 3.0]) == 2.0
        )
        return ok, "quantile coupling fixtures"

    suite("gradient-primitives", gradient_suite)
    suite("unified-loss-gradient", loss_gradient_suite)
    suite("gamma-limit", gamma_limit_suite)
    suite("eq-equivalence", equivalence_suite)
    suite("kl-identity", kl_identity_suite)
    suite("xor-fixture", xor_suite)
    suite("w1-oracle", w1_suite)
    return 0 if all(ok for _, ok, _ in results) else 1


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="ipmc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a multi-view dataset file")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config and dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=tr.VARIANTS)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("probe", help="linear-probe accuracy of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", help="comma-separated view subset, e.g. 0,2")
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("knn", help="L1 nearest-neighbor retrieval table")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(fn=_cmd_knn)

    p = sub.add_parser("view-audit", help="how separable the views remain")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_view_audit)

    p = sub.add_parser("mi-audit", help="exact information measures from a joint CSV")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.set_defaults(fn=_cmd_mi_audit)

    p = sub.add_parser("ablate", help="run fp / fp+da / sap+da and compare")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("check", help="run the fast verification suites")
    p.set_defaults(fn=_cmd_check)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError, FileNotFoundError, FormatError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except IpmcError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except Exception as exc:  # keep failures machine-readable
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
