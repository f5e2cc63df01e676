"""Config-driven command line: generation, scoring, evaluation, spectral
checks, analytic-theory grids, and EM training runs.

Flags select only the command, the config path, and the output directory;
every numeric knob lives in a JSON config.  Unknown config keys are
rejected and every config carries an explicit integer ``seed`` so a rerun
reproduces each numeric cell (and therefore each CSV byte) exactly.

Exit codes: 0 success, 1 a checked assertion failed, 2 usage/validation.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys

import numpy as np

from .data import (ClassifierHead, EmbeddingSet, SyntheticSpec, gen_esn_samples,
                   gen_sphere_mixture, gen_unit_contributions, read_embeddings,
                   read_head, write_embeddings)
from .metrics import aupr, auroc, fpr_at_tpr
from .opencon import (HISTORY_COLUMNS, TrainConfig, em_consistency_checks,
                      em_train)
from .report import (ReportTable, atomic_write_bytes, atomic_write_text,
                     config_sha256, histogram_figure, line_figure, read_report,
                     save_figure, scatter_figure, standard_footnotes,
                     write_report)
from .scoring import (KnnIndex, dice_contribution_matrix, dice_logits,
                      dice_mask, energy_score, knn_score, logits, msp_score,
                      react_apply, react_percentile_threshold)
from .spectral import (build_toy_graph, delta_kms, kms_derivative, residual,
                       residual_bound, sorl_toy_eigen_check, spectral_split,
                       toy_residual_theorems)
from .theory import (ContributionStats, EsnParams, dice_var_reduction,
                     dice_var_reduction_correlated, esn_rect_clip_mean,
                     esn_rect_mean, id_reduction, ood_reduction,
                     rect_gauss_mean)

SCORE_METHODS = ("msp", "energy", "react+energy", "dice+energy",
                 "dice+react+energy", "knn")


class ConfigError(Exception):
    """Bad usage or config content; maps to exit code 2."""


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc


def _take(config, required, optional=None, where="config"):
    """Key validation: everything in ``required`` present, nothing unknown."""
    optional = optional or {}
    if not isinstance(config, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(config) - set(required) - set(optional))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    missing = [key for key in required if key not in config]
    if missing:
        raise ConfigError(f"{where} is missing required keys: {', '.join(missing)}")
    merged = dict(optional)
    merged.update(config)
    return merged


def _seed_of(cfg) -> int:
    seed = cfg.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return seed


def _emit(table: ReportTable, raw_config, out_dir, quiet) -> None:
    table.footnotes.extend(standard_footnotes(raw_config))
    csv_path, _ = write_report(table, out_dir, table.name.replace(" ", "_"))
    if not quiet:
        print(table.to_markdown())
        print(f"wrote {csv_path}")


# ---------------------------------------------------------------------------
# gen


def _gen_summary_figure(kind, es, path):
    if kind == "sphere-mixture":
        fig = scatter_figure(es.vectors, es.labels,
                             "generated mixture (first two coordinates)")
    elif kind == "esn-samples":
        fig = histogram_figure({"samples": es.vectors[:, 0]},
                               "skewed-normal sample distribution", "value")
    else:
        fig = histogram_figure({"row sums": es.vectors.sum(axis=1)},
                               "summed unit contributions", "sum")
    save_figure(fig, path)


def cmd_gen(raw, out_dir, quiet) -> int:
    kind = raw.get("kind")
    per_kind = {
        "sphere-mixture": ["centers", "sigma_gen", "class_counts"],
        "esn-samples": ["mu", "sigma", "eps", "count"],
        "unit-contributions": ["unit_means", "unit_sigmas", "count"],
    }
    if kind not in per_kind:
        raise ConfigError(f"kind must be one of {sorted(per_kind)}")
    cfg = _take(raw, ["kind", "seed"] + per_kind[kind], {"name": "data"})
    seed = _seed_of(cfg)

    try:
        if kind == "sphere-mixture":
            spec = SyntheticSpec(kind=kind, seed=seed, centers=cfg["centers"],
                                 sigma_gen=cfg["sigma_gen"],
                                 class_counts=cfg["class_counts"])
            es = gen_sphere_mixture(spec)
        elif kind == "esn-samples":
            spec = SyntheticSpec(kind=kind, seed=seed, mu=cfg["mu"],
                                 sigma=cfg["sigma"], eps=cfg["eps"],
                                 count=cfg["count"])
            es = EmbeddingSet(gen_esn_samples(spec).reshape(-1, 1), None, False)
        else:
            spec = SyntheticSpec(kind=kind, seed=seed,
                                 unit_means=cfg["unit_means"],
                                 unit_sigmas=cfg["unit_sigmas"],
                                 count=cfg["count"])
            es = EmbeddingSet(gen_unit_contributions(spec), None, False)
    except ValueError as exc:
        raise ConfigError(f"invalid generator spec: {exc}") from exc

    name = cfg["name"]
    buf = io.BytesIO()
    write_embeddings(es, buf)
    payload = buf.getvalue()
    emb_path = os.path.join(out_dir, f"{name}.emb1")
    atomic_write_bytes(emb_path, payload)

    manifest = {
        "command": "gen",
        "config_sha256": config_sha256(raw),
        "seed": seed,
        "files": [{"name": f"{name}.emb1",
                   "sha256": hashlib.sha256(payload).hexdigest(),
                   "rows": es.n, "cols": es.d}],
    }
    atomic_write_text(os.path.join(out_dir, f"{name}.manifest.json"),
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    table = ReportTable(f"{name}_summary", ["field", "value"])
    table.add_row("kind", kind)
    table.add_row("rows", es.n)
    table.add_row("cols", es.d)
    if es.labels is not None:
        for value in np.unique(es.labels):
            table.add_row(f"class_{value}_count", int(np.sum(es.labels == value)))
    _emit(table, raw, out_dir, quiet)
    _gen_summary_figure(kind, es, os.path.join(out_dir, f"{name}.png"))
    return 0


# ---------------------------------------------------------------------------
# score


def _unit_rows(vectors, what):
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise ConfigError(f"{what} contains a zero row; cannot normalize")
    return vectors / norms[:, None]


def _method_scores(method, es_id, es_ood, head, cfg):
    """Per-split score vectors; every method orients higher = more ID.

    The combined dice+react pipeline rectifies first and derives the DICE
    contribution matrix from the rectified ID activations, so the mask is
    computed on the same representation it gates.
    """
    x_id, x_ood = es_id.vectors, es_ood.vectors
    if method == "knn":
        bank = _unit_rows(x_id, "id_embeddings")
        k = cfg["knn_k"]
        if not 1 <= k <= bank.shape[0] - 1:
            raise ConfigError("knn_k must satisfy 1 <= k <= n_id - 1")
        index = KnnIndex(bank, k)
        return (knn_score(index, bank, exclude_self=True),
                knn_score(index, _unit_rows(x_ood, "ood_embeddings")))
    if head is None:
        raise ConfigError(f"method {method!r} needs a classifier head file")
    if method == "msp":
        return msp_score(logits(head, x_id)), msp_score(logits(head, x_ood))
    if method == "energy":
        return energy_score(logits(head, x_id)), energy_score(logits(head, x_ood))
    if method == "react+energy":
        c = react_percentile_threshold(x_id, cfg["react_percentile"])
        return (energy_score(logits(head, react_apply(x_id, c))),
                energy_score(logits(head, react_apply(x_ood, c))))
    rect_id, rect_ood = x_id, x_ood
    if method == "dice+react+energy":
        c = react_percentile_threshold(x_id, cfg["react_percentile"])
        rect_id, rect_ood = react_apply(x_id, c), react_apply(x_ood, c)
    V = dice_contribution_matrix(head, rect_id)
    mask = dice_mask(V, cfg["dice_percentile"] / 100.0)
    return (energy_score(dice_logits(head, mask, rect_id)),
            energy_score(dice_logits(head, mask, rect_ood)))


def cmd_score(raw, out_dir, quiet) -> int:
    cfg = _take(raw, ["seed", "id_embeddings", "ood_embeddings", "methods"],
                {"head": None, "react_percentile": 90.0,
                 "dice_percentile": 70.0, "knn_k": 10})
    _seed_of(cfg)
    methods = cfg["methods"]
    if not methods or not set(methods) <= set(SCORE_METHODS):
        raise ConfigError(f"methods must be a non-empty subset of {SCORE_METHODS}")

    es_id = read_embeddings(cfg["id_embeddings"])
    es_ood = read_embeddings(cfg["ood_embeddings"])
    head = read_head(cfg["head"]) if cfg["head"] else None

    metrics_table = ReportTable("score_metrics",
                                ["method", "fpr95", "auroc", "aupr"])
    for method in methods:
        id_s, ood_s = _method_scores(method, es_id, es_ood, head, cfg)
        per = ReportTable(f"scores {method}", ["split", "index", "score"])
        for i, s in enumerate(id_s):
            per.add_row("id", i, float(s))
        for i, s in enumerate(ood_s):
            per.add_row("ood", i, float(s))
        per.footnotes.extend(standard_footnotes(raw))
        write_report(per, out_dir, f"scores_{method}")
        metrics_table.add_row(method, fpr_at_tpr(id_s, ood_s, 0.95),
                              auroc(id_s, ood_s), aupr(id_s, ood_s))
        save_figure(histogram_figure({"id": id_s, "ood": ood_s},
                                     f"{method} score distributions", "score"),
                    os.path.join(out_dir, f"scores_{method}.png"))
    _emit(metrics_table, raw, out_dir, quiet)
    return 0


# ---------------------------------------------------------------------------
# eval


def _roc_points(id_s, ood_s):
    thresholds = np.unique(np.concatenate([id_s, ood_s]))[::-1]
    tpr = [float(np.mean(id_s >= t)) for t in thresholds]
    fpr = [float(np.mean(ood_s >= t)) for t in thresholds]
    return [0.0] + fpr + [1.0], [0.0] + tpr + [1.0]


def cmd_eval(raw, out_dir, quiet) -> int:
    cfg = _take(raw, ["seed", "score_files"])
    _seed_of(cfg)
    files = cfg["score_files"]
    if not isinstance(files, list) or not files:
        raise ConfigError("score_files must be a non-empty list of paths")

    table = ReportTable("eval_metrics", ["method", "n_id", "n_ood",
                                         "fpr95", "auroc", "aupr"])
    for path in files:
        scores = read_report(path)
        if scores.columns != ["split", "index", "score"]:
            raise ConfigError(f"{path} is not a score table")
        method = scores.name.removeprefix("scores ").strip() or path
        id_s = np.array([r[2] for r in scores.rows if r[0] == "id"])
        ood_s = np.array([r[2] for r in scores.rows if r[0] == "ood"])
        if id_s.size == 0 or ood_s.size == 0:
            raise ConfigError(f"{path} lacks id or ood rows")
        table.add_row(method, int(id_s.size), int(ood_s.size),
                      fpr_at_tpr(id_s, ood_s, 0.95), auroc(id_s, ood_s),
                      aupr(id_s, ood_s))
        fpr, tpr = _roc_points(id_s, ood_s)
        fig = line_figure(fpr, {"ROC": tpr}, f"{method} ROC",
                          "false positive rate", "true positive rate")
        save_figure(fig, os.path.join(out_dir, f"roc_{method}.png"))
    _emit(table, raw, out_dir, quiet)
    return 0


# ---------------------------------------------------------------------------
# spectral


def _spectral_nscl(cfg, raw, out_dir, quiet) -> int:
    tau_s, tau_c = cfg["tau_s"], cfg["tau_c"]
    grid = np.linspace(0.0, tau_s, cfg["t_points"] + 2)[1:-1]
    report = toy_residual_theorems(tau_s, tau_c, t_grid=grid)
    table = ReportTable("spectral_nscl",
                        ["check", "t", "observed", "expected", "pass"])
    for row in report.rows:
        table.add_row(row.name, "" if row.t is None else row.t,
                      row.observed, row.expected, row.passed)
    _emit(table, raw, out_dir, quiet)

    t_rows = [r for r in report.rows if r.t is not None]
    if t_rows:
        ts = [r.t for r in t_rows]
        fig = line_figure(ts, {"observed": [r.observed for r in t_rows],
                               "expected": [r.expected for r in t_rows]},
                          "labeled-node residual along the t family", "t",
                          "residual")
    else:
        names = [r.name for r in report.rows]
        fig = line_figure(range(len(names)),
                          {"observed": [r.observed for r in report.rows],
                           "expected": [r.expected for r in report.rows]},
                          "toy residual checks", "check index", "residual")
    save_figure(fig, os.path.join(out_dir, "spectral_nscl.png"))
    return 0 if report.all_passed else 1


def _sorl_graph(ratio, q):
    tau1 = 1.0 / (1.0 + (1.0 + q) * ratio)
    return build_toy_graph("sorl", tau1=tau1, tau_c=ratio * tau1,
                           tau_s=q * ratio * tau1)


def _spectral_sorl(cfg, raw, out_dir, quiet) -> int:
    ratio, q, k = cfg["ratio"], cfg["q"], cfg["k"]
    graph = _sorl_graph(ratio, q)
    partition = [[0, 1], [2, 3], [4, 5]]

    eigen = ReportTable("spectral_sorl_eigen",
                        ["variant", "max_angle", "grouped_angle", "angle_bound",
                         "lambda3", "lambda3_predicted", "lambda3_tol",
                         "true_lambda3", "true_lambda3_error", "pass"])
    ok = True
    for labeled in (True, False):
        rep = sorl_toy_eigen_check(graph, labeled=labeled)
        eigen.add_row("labeled" if labeled else "unlabeled", rep.max_angle,
                      rep.grouped_angle, rep.angle_bound, rep.lambda3,
                      rep.lambda3_predicted, rep.lambda3_tol, rep.true_lambda3,
                      rep.true_lambda3_error, rep.passed)
        ok = ok and rep.passed
    _emit(eigen, raw, out_dir, quiet)

    start, stop, count = cfg["delta_grid"]
    deltas = np.linspace(start, stop, int(count))
    sweep = ReportTable("spectral_sorl_kms", ["delta", "delta_kms", "pass"])
    values = []
    for d in deltas:
        value = delta_kms(graph, partition, float(d), k)
        values.append(value)
        # the only sweep assertion is the exact zero at delta = 0
        passed = value == 0.0 if d == 0.0 else True
        ok = ok and passed
        sweep.add_row(float(d), value, passed)
    _emit(sweep, raw, out_dir, quiet)
    save_figure(line_figure(deltas, {"delta_kms": values},
                            "clustering improvement from labeling weight",
                            "delta", "delta_kms"),
                os.path.join(out_dir, "spectral_sorl_kms.png"))

    der = kms_derivative(graph, partition, k)
    rel = (abs(der.analytic - der.finite_difference)
           / max(abs(der.finite_difference), 1e-300))
    sign_ok = der.analytic * der.finite_difference > 0
    der_ok = bool(sign_ok and rel <= 0.20)
    ok = ok and der_ok
    dtab = ReportTable("spectral_sorl_derivative", ["quantity", "value"])
    dtab.add_row("analytic", der.analytic)
    dtab.add_row("finite_difference", der.finite_difference)
    dtab.add_row("relative_gap", rel)
    dtab.add_row("eta1", der.eta1)
    dtab.add_row("eta2", der.eta2)
    dtab.add_row("pass", der_ok)
    _emit(dtab, raw, out_dir, quiet)
    return 0 if ok else 1


def _spectral_graph(cfg, raw, out_dir, quiet) -> int:
    A = np.asarray(cfg["adjacency"], dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigError("adjacency must be a square matrix")
    if not np.allclose(A, A.T, atol=1e-12):
        raise ConfigError("adjacency must be symmetric")
    degrees = A.sum(axis=1)
    if np.any(degrees <= 0):
        raise ConfigError("every node needs positive degree")
    k = cfg["k"]
    if not 1 <= k <= A.shape[0]:
        raise ConfigError("k must lie in [1, n]")
    scale = 1.0 / np.sqrt(degrees)
    split = spectral_split(scale[:, None] * A * scale[None, :], k,
                           cfg["n_labeled"])

    table = ReportTable("spectral_graph", ["quantity", "index", "value", "pass"])
    for i, s in enumerate(split.sigma):
        table.add_row("singular_value", i, float(s), True)
    ok = True
    if cfg["labels"] is not None:
        y = np.asarray(cfg["labels"], dtype=np.float64)
        if y.shape != (A.shape[0],):
            raise ConfigError("labels must list one value per node")
        # labeled nodes come first; the residual claims concern the rest
        y_unlabeled = y[cfg["n_labeled"]:]
        res = residual(split.U_star, y_unlabeled)
        bound = residual_bound(split, y_unlabeled)
        ok = res <= bound + 1e-8
        table.add_row("residual", "", res, ok)
        table.add_row("residual_bound", "", bound, True)
    _emit(table, raw, out_dir, quiet)

    fig = line_figure(range(len(split.sigma)),
                      {"sigma": [float(s) for s in split.sigma]},
                      "normalized adjacency spectrum", "index", "singular value")
    save_figure(fig, os.path.join(out_dir, "spectral_graph.png"))
    return 0 if ok else 1


def cmd_spectral(raw, out_dir, quiet) -> int:
    case = raw.get("case")
    if case == "nscl":
        cfg = _take(raw, ["seed", "case", "tau_s", "tau_c"], {"t_points": 20})
        return _spectral_nscl(cfg, raw, out_dir, quiet)
    if case == "sorl":
        cfg = _take(raw, ["seed", "case", "ratio"],
                    {"q": 2.0 / 3.0, "delta_grid": [0.0, 0.5, 11], "k": 5})
        return _spectral_sorl(cfg, raw, out_dir, quiet)
    if case == "graph":
        cfg = _take(raw, ["seed", "case", "adjacency"],
                    {"labels": None, "k": 2, "n_labeled": 0})
        return _spectral_graph(cfg, raw, out_dir, quiet)
    raise ConfigError("case must be one of: nscl, sorl, graph")


# ---------------------------------------------------------------------------
# theory


_REACT_DEFAULTS = {"mu": [0.25, 0.5, 1.0], "sigma": [0.5, 1.0, 2.0],
                   "eps": [0.0, -0.1, -0.25, -0.4], "c": [0.5, 1.0, 2.0],
                   "samples": 200_000, "se_multiple": 4.0}
_DICE_DEFAULTS = {"units": 10, "t_values": list(range(1, 10)),
                  "samples": 200_000, "rho": 0.3}


def _react_rows(table, cfg, seed):
    multiple = cfg["se_multiple"]
    draw = 0
    for mu in cfg["mu"]:
        for sigma in cfg["sigma"]:
            for eps in cfg["eps"]:
                params = EsnParams(mu, sigma, eps)
                spec = SyntheticSpec(kind="esn-samples", seed=seed + draw,
                                     mu=mu, sigma=sigma, eps=eps,
                                     count=cfg["samples"])
                draw += 1
                rect = np.maximum(gen_esn_samples(spec), 0.0)

                def _row(quantity, c, analytic, values, id_value):
                    mc = float(values.mean())
                    se = float(values.std(ddof=1) / np.sqrt(values.size))
                    n_se = abs(analytic - mc) / se if se > 0 else 0.0
                    id_match = (abs(analytic - id_value) <= 1e-12
                                if eps == 0.0 else "")
                    table.add_row(quantity, mu, sigma, eps, c, analytic, mc,
                                  se, n_se, bool(n_se <= multiple), id_match)

                _row("rect", "", esn_rect_mean(params), rect,
                     rect_gauss_mean(mu, sigma))
                for c in cfg["c"]:
                    clipped = np.minimum(rect, c)
                    _row("clip", c, esn_rect_clip_mean(params, c), clipped,
                         rect_gauss_mean(mu, sigma) - id_reduction(mu, sigma, c))
                    _row("reduction", c, ood_reduction(params, c),
                         rect - clipped, id_reduction(mu, sigma, c))


def _dice_rows(table, cfg, seed):
    m = cfg["units"]
    means = np.array([0.2 * (i + 1) for i in range(m)])
    sigmas = np.array([0.3 + 0.05 * i for i in range(m)])
    order = np.argsort(means, kind="stable")

    spec = SyntheticSpec(kind="unit-contributions", seed=seed,
                         unit_means=means.tolist(),
                         unit_sigmas=sigmas.tolist(), count=cfg["samples"])
    samples = gen_unit_contributions(spec)

    cov = np.outer(sigmas, sigmas) * cfg["rho"] ** np.abs(
        np.subtract.outer(np.arange(m), np.arange(m)))
    rng = np.random.default_rng(seed + 1)
    corr_samples = rng.multivariate_normal(means, cov, size=cfg["samples"],
                                           method="cholesky")

    for t in cfg["t_values"]:
        if not 1 <= t <= m - 1:
            raise ConfigError("every t must lie in [1, units - 1]")
        stats = ContributionStats(means, sigmas ** 2, order, t)
        red = dice_var_reduction(stats, samples)
        rel = abs(red.empirical - red.analytic) / abs(red.analytic)
        table.add_row("independent", t, red.analytic, red.empirical, rel,
                      bool(rel < 0.05))

        analytic = dice_var_reduction_correlated(cov, t)
        kept = corr_samples[:, t:]
        empirical = float(corr_samples.sum(axis=1).var(ddof=1)
                          - kept.sum(axis=1).var(ddof=1))
        rel = abs(empirical - analytic) / abs(analytic)
        table.add_row("correlated", t, analytic, empirical, rel,
                      bool(rel < 0.05))


def cmd_theory(raw, out_dir, quiet) -> int:
    cfg = _take(raw, ["seed"], {"react": {}, "dice": {}})
    seed = _seed_of(cfg)
    react_cfg = _take(cfg["react"], [], _REACT_DEFAULTS, where="react")
    dice_cfg = _take(cfg["dice"], [], _DICE_DEFAULTS, where="dice")

    react_table = ReportTable("theory_react",
                              ["quantity", "mu", "sigma", "eps", "c",
                               "analytic", "mc", "se", "n_se", "within",
                               "id_match"])
    _react_rows(react_table, react_cfg, seed)
    _emit(react_table, raw, out_dir, quiet)

    dice_table = ReportTable("theory_dice",
                             ["case", "t", "analytic", "empirical",
                              "rel_err", "within"])
    _dice_rows(dice_table, dice_cfg, seed)
    _emit(dice_table, raw, out_dir, quiet)

    mu, sigma = react_cfg["mu"][0], react_cfg["sigma"][-1]
    cs = react_cfg["c"]
    series = {f"eps={eps}": [ood_reduction(EsnParams(mu, sigma, eps), c)
                             for c in cs]
              for eps in react_cfg["eps"]}
    save_figure(line_figure(cs, series,
                            f"clipping-induced reduction (mu={mu}, sigma={sigma})",
                            "clip level c", "reduction"),
                os.path.join(out_dir, "theory_react.png"))

    by_case = {}
    for case, t, analytic, empirical, *_ in dice_table.rows:
        by_case.setdefault(f"{case} analytic", []).append(analytic)
        by_case.setdefault(f"{case} empirical", []).append(empirical)
    save_figure(line_figure(dice_cfg["t_values"], by_case,
                            "variance removed by dropping the t weakest units",
                            "t", "variance reduction"),
                os.path.join(out_dir, "theory_dice.png"))
    return 0


# ---------------------------------------------------------------------------
# opencon


_TRAIN_OPTIONAL = {"lambda_n": 0.1, "lambda_l": 0.2, "lambda_u": 1.0,
                   "tau_n": 0.7, "tau_l": 0.1, "tau_u": 0.4,
                   "percentile": 30.0, "gamma": 0.9, "epochs": 20,
                   "batch_size": 64, "learning_rate": 0.5, "jitter": 0.1,
                   "init_scale": 0.05, "d_out": None}


def _opencon_datasets(dataset, n_known):
    spec = _take(dataset, [], {"labeled": None, "unlabeled": None,
                               "synthetic": None}, where="dataset")
    paths = spec["labeled"] is not None or spec["unlabeled"] is not None
    if paths == (spec["synthetic"] is not None):
        raise ConfigError("dataset needs either labeled+unlabeled paths or "
                          "a synthetic block, not both")
    if paths:
        if spec["labeled"] is None or spec["unlabeled"] is None:
            raise ConfigError("dataset needs both labeled and unlabeled paths")
        return read_embeddings(spec["labeled"]), read_embeddings(spec["unlabeled"])

    syn = _take(spec["synthetic"],
                ["centers", "class_counts", "n_labeled", "data_seed",
                 "subset_seed"], {"sigma_gen": 0.15}, where="dataset.synthetic")
    try:
        gen_spec = SyntheticSpec(kind="sphere-mixture", seed=syn["data_seed"],
                                 centers=syn["centers"],
                                 sigma_gen=syn["sigma_gen"],
                                 class_counts=syn["class_counts"])
        es = gen_sphere_mixture(gen_spec)
    except ValueError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    known_rows = np.flatnonzero(es.labels < n_known)
    if syn["n_labeled"] > known_rows.size:
        raise ConfigError("n_labeled exceeds the known-class sample count")
    rng = np.random.default_rng(syn["subset_seed"])
    labeled_rows = rng.choice(known_rows, size=syn["n_labeled"], replace=False)
    rest = np.setdiff1d(np.arange(es.n), labeled_rows)
    return (EmbeddingSet(es.vectors[labeled_rows], es.labels[labeled_rows], True),
            EmbeddingSet(es.vectors[rest], es.labels[rest], True))


def cmd_opencon(raw, out_dir, quiet) -> int:
    cfg = _take(raw, ["seed", "n_classes", "n_known", "dataset"],
                _TRAIN_OPTIONAL)
    seed = _seed_of(cfg)
    labeled, unlabeled = _opencon_datasets(cfg["dataset"], cfg["n_known"])

    train_cfg = TrainConfig(
        d_in=labeled.d, d_out=cfg["d_out"] or labeled.d,
        n_classes=cfg["n_classes"], n_known=cfg["n_known"],
        lambda_n=cfg["lambda_n"], lambda_l=cfg["lambda_l"],
        lambda_u=cfg["lambda_u"], tau_n=cfg["tau_n"], tau_l=cfg["tau_l"],
        tau_u=cfg["tau_u"], percentile=cfg["percentile"], gamma=cfg["gamma"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], jitter=cfg["jitter"],
        init_scale=cfg["init_scale"], seed=seed)
    state = em_train(labeled, unlabeled, train_cfg)

    history = ReportTable("opencon_history", list(HISTORY_COLUMNS))
    for record in state.history:
        history.add_row(*record.csv_row())
    _emit(history, raw, out_dir, quiet)

    summary = ReportTable("opencon_summary", ["metric", "value"])
    last = state.history[-1]
    summary.add_row("novel_acc", last.novel_acc)
    summary.add_row("known_acc", last.known_acc)
    summary.add_row("all_acc", last.all_acc)
    summary.add_row("final_total_loss", last.loss_total)
    summary.add_row("final_threshold", last.threshold)
    summary.add_row("final_novel_count", last.novel_count)
    try:
        checks = em_consistency_checks(state, labeled, unlabeled, train_cfg)
        summary.add_row("mstep_optimal", checks.mstep_optimal)
        summary.add_row("alignment_gain", checks.alignment_gain)
        summary.add_row("decomposition_error", checks.decomposition_error)
        summary.add_row("bound_lhs", checks.bound_lhs)
        summary.add_row("bound_rhs", checks.bound_rhs)
        summary.add_row("bound_margin", checks.bound_margin)
        summary.add_row("gamma_hat", checks.gamma_hat)
    except ValueError as exc:
        summary.add_row("consistency_checks", f"skipped: {exc}")
    _emit(summary, raw, out_dir, quiet)

    epochs = [r.epoch for r in state.history]
    losses = {"L_n": [r.loss_n for r in state.history],
              "L_l": [r.loss_l for r in state.history],
              "L_u": [r.loss_u for r in state.history],
              "total": [r.loss_total for r in state.history]}
    save_figure(line_figure(epochs, losses, "training losses", "epoch", "loss"),
                os.path.join(out_dir, "opencon_losses.png"))
    accs = {"novel": [r.novel_acc for r in state.history],
            "known": [r.known_acc for r in state.history],
            "all": [r.all_acc for r in state.history]}
    save_figure(line_figure(epochs, accs, "pseudo-label accuracy", "epoch",
                            "accuracy"),
                os.path.join(out_dir, "opencon_accuracy.png"))
    return 0


# ---------------------------------------------------------------------------


_HANDLERS = {"gen": cmd_gen, "score": cmd_score, "eval": cmd_eval,
             "spectral": cmd_spectral, "theory": cmd_theory,
             "opencon": cmd_opencon}

_HELP = {
    "gen": "generate synthetic embedding/sample files",
    "score": "run OOD scorers over ID/OOD embedding files",
    "eval": "recompute detection metrics from persisted score tables",
    "spectral": "toy-graph theorem checks and K-means measure sweeps",
    "theory": "analytic formulas vs Monte-Carlo estimates",
    "opencon": "train the prototype EM pipeline and dump its history",
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="owlab",
        description="open-world representation learning lab: config-driven "
                    "runs with CSV/markdown reports and rendered figures")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in _HELP.items():
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--quiet", action="store_true",
                       help="suppress stdout tables")
    args = parser.parse_args(argv)

    try:
        config = _load_json(args.config)
        if not isinstance(config, dict):
            raise ConfigError("config root must be a JSON object")
        os.makedirs(args.out, exist_ok=True)
        return _HANDLERS[args.command](config, args.out, args.quiet)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
