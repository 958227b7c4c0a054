"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (printed at the end of the session) and
then asserts. Criteria 5-8 share one training sweep: a 2000-item dataset, one
frozen VQA model and the explainer trained in every mode for seeds 0, 1, 2
with the default TrainConfig. Set FAITHVQA_ACCEPTANCE_CACHE to a JSON path to
reuse a sweep across sessions.
"""
import itertools
import json
import os
import time
import traceback
import warnings

import numpy as np
import pytest

import test_cli
import test_explainer
import test_faithfulness
import test_limeaudit
import test_linker
import test_metrics
import test_nncore
import test_toyworld
import test_trainer
import test_vqa
from conftest import ACCEPTANCE
from faithvqa.experiments import AblationConfig, run_ablation
from faithvqa.limeaudit import fit_lasso_path

GRAD_TOL = 1e-5  # float64 finite-difference tolerance
EMD_TOL = 1e-6
BLEU_TOL = 1e-9
LIME_COS = 0.99
RUNTIME_S = {"gradients": 60, "emd": 60, "pipeline": 15 * 60}
KS = ("K=1", "K=2", "K=3")


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def run_checks(checks):
    """Run named callables; returns the names of those that raised."""
    failed = []
    for name, fn in checks:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fn()
        except Exception:  # noqa: BLE001 - any failure counts against the criterion
            failed.append(name)
            traceback.print_exc()
    return failed


@pytest.fixture(scope="session")
def sweep():
    cache = os.environ.get("FAITHVQA_ACCEPTANCE_CACHE")
    if cache and os.path.exists(cache):
        with open(cache) as f:
            return json.load(f)
    out = run_ablation(AblationConfig())
    out = json.loads(json.dumps(out, default=str))
    if cache:
        with open(cache, "w") as f:
            json.dump(out, f, indent=1, sort_keys=True)
    return out


def test_criterion_01_gradient_suite(tiny_ds, tiny_vqa):
    t0 = time.time()
    checks = [(f"fc[{a}]", lambda a=a: test_nncore.test_fc_gradients(a))
              for a in ("identity", "tanh", "sigmoid", "leaky_relu", "softmax")]
    checks += [
        ("gru", test_nncore.test_gru_gradients),
        ("lstm", test_nncore.test_lstm_gradients),
        ("second-order grad", test_nncore.test_grad_second_order),
        ("vqa answer logits", test_vqa.test_answer_logit_gradients_match_finite_differences),
        ("vqa parameters", test_vqa.test_every_vqa_parameter_gradient),
        ("fusion", test_explainer.test_fuse_gradient_wrt_question),
        ("source gate", test_explainer.test_source_gate_gradient),
        ("explainer parameters", test_explainer.test_every_explainer_parameter_gradient),
        ("grad-cam answer path", lambda: test_faithfulness
         .test_answer_path_inner_products_match_finite_differences(tiny_ds, tiny_vqa)),
        ("grad-cam explanation path", lambda: test_faithfulness
         .test_explanation_path_inner_products_match_finite_differences(tiny_ds, tiny_vqa)),
        ("L_f second order, 3 params",
         lambda: test_faithfulness.test_second_order_faithfulness_gradient(3)),
        ("L_f second order, 10 params",
         lambda: test_faithfulness.test_second_order_faithfulness_gradient(10)),
    ]
    failed = run_checks(checks)
    secs = time.time() - t0
    ok = not failed and secs < RUNTIME_S["gradients"]
    record(1, ok, f"{len(checks) - len(failed)}/{len(checks)} finite-difference checks within "
                  f"rel {GRAD_TOL:g}; {secs:.1f}s (limit {RUNTIME_S['gradients']}s)"
                  + (f"; failed: {failed}" if failed else ""))
    assert ok


def test_criterion_02_emd_oracle():
    t0 = time.time()
    worst = test_metrics.emd_lp_trials(100)
    bad = test_metrics.emd_axiom_violations(100)
    secs = time.time() - t0
    ok = worst < EMD_TOL and not bad and secs < RUNTIME_S["emd"]
    record(2, ok, f"max |exact - LP| = {worst:.2e} over 100 trials (tol {EMD_TOL:g}); "
                  f"axiom violations {len(bad)}/100; {secs:.1f}s")
    assert ok


def test_criterion_03_text_metric_oracles():
    from faithvqa.metrics import bleu4
    value = bleu4("a b c d e".split(), ["a b c d f".split()])
    hand = (1 / 2 * 2 / 3 * 3 / 4 * 4 / 5) ** 0.25
    failed = run_checks([("identity", test_metrics.test_identity_scores_one),
                         ("permutation", test_metrics.test_reference_permutation_invariance),
                         ("rouge", test_metrics.test_rouge_hand_example),
                         ("cider", test_metrics.test_cider_identical_is_maximal_in_corpus)])
    ok = abs(value - hand) < BLEU_TOL and not failed
    record(3, ok, f"BLEU-4 example {value:.12f} vs hand {hand:.12f} (tol {BLEU_TOL:g}); "
                  f"identity/permutation/ROUGE/CIDEr checks "
                  + ("ok" if not failed else f"failed: {failed}"))
    assert ok


def test_criterion_04_lime_planted_recovery():
    cosines, exact = [], 0
    for seed in range(20):
        masks, y, w_true, k = test_limeaudit.planted_case(seed)
        fit = fit_lasso_path(masks, y, k)
        exact += fit.support == sorted(np.flatnonzero(w_true).tolist())
        cosines.append(fit.w @ w_true / (np.linalg.norm(fit.w) * np.linalg.norm(w_true)))
    ok = exact == 20 and min(cosines) > LIME_COS
    record(4, ok, f"exact support {exact}/20 seeds; min cos {min(cosines):.6f} "
                  f"(need > {LIME_COS})")
    assert ok


def test_criterion_05_filtering_trend(sweep):
    margins = {s: r["final_epoch"]["audit"]["accept_faithful"]
               - r["final_epoch"]["audit"]["accept_distractor"]
               for s, r in sweep["runs"]["filtered"].items()}
    run = sweep["runs"]["filtered_lf"]["0"]
    pipeline = sweep["vqa"]["seconds"] + run["train_seconds"] + run["eval_seconds"]
    ok = all(m > 0 for m in margins.values()) and pipeline < RUNTIME_S["pipeline"]
    s = sweep["summary"]["filtered"]
    record(5, ok, f"final-epoch acceptance faithful {s['accept_faithful']:.3f} vs distractor "
                  f"{s['accept_distractor']:.3f} (seed-mean); margins per seed "
                  f"{ {k: round(v, 3) for k, v in margins.items()} }; one-seed pipeline "
                  f"{pipeline:.0f}s (limit {RUNTIME_S['pipeline']}s)")
    assert ok


def test_criterion_06_mean_sf_ordering(sweep):
    s = {m: sweep["summary"][m]["mean_s_f"] for m in ("random", "filtered", "filtered_lf")}
    ok = s["random"] < s["filtered"] < s["filtered_lf"]
    record(6, ok, "seed-mean test S_f random {random:.4f} / filtered {filtered:.4f} / "
                  "filtered+L_f {filtered_lf:.4f} (need strictly increasing)".format(**s))
    assert ok


def test_criterion_07_agreement_ordering(sweep):
    e = {m: sweep["summary"][m]["agreement"] for m in ("random", "filtered", "filtered_lf")}
    per_k = {k: e["random"][k] < e["filtered"][k] < e["filtered_lf"][k] for k in KS}
    ok = all(per_k.values())
    detail = "; ".join(f"{k}: {e['random'][k]:.3f} / {e['filtered'][k]:.3f} / "
                       f"{e['filtered_lf'][k]:.3f} {'ok' if per_k[k] else 'out of order'}"
                       for k in KS)
    record(7, ok, f"LIME agreement random / filtered / filtered+L_f, {detail}")
    assert ok


def test_criterion_08_low_score_fraction(sweep):
    r = sweep["summary"]["random"]["frac_low"]
    lf = sweep["summary"]["filtered_lf"]["frac_low"]
    ok = lf < r
    record(8, ok, f"fraction of test S_f in [0, 0.1]: filtered+L_f {lf:.4f} vs random {r:.4f}"
                  f"; filtered+L_f BLEU-4 {sweep['summary']['filtered_lf']['bleu4']:.3f}, "
                  f"links/explanation {sweep['summary']['filtered_lf']['links_per_explanation']:.2f}")
    assert ok


def test_criterion_09_determinism(tmp_path):
    first = test_cli.run_pipeline(tmp_path)
    second = test_cli.run_pipeline(tmp_path)
    diff = [n for n in first if first[n] != second[n]]
    ok = not diff
    record(9, ok, f"{len(first) - len(diff)}/{len(first)} artifacts byte-identical across "
                  f"reruns (gen-data through report)" + (f"; differing: {diff}" if diff else ""))
    assert ok


def test_criterion_10_invariant_suite(tiny_ds, tiny_vqa, tmp_path):
    boundary = [(f"link rule {a}", lambda a=a: test_linker.test_link_rule_boundaries(*a))
                for a in itertools.product([True, False], test_linker.BOUNDARY,
                                           test_linker.BOUNDARY)]
    checks = [
        ("scene invariants", test_toyworld.test_scene_invariants),
        ("gold explanation invariants", test_toyworld.test_gold_explanation_invariants),
        ("vqa probabilities", test_vqa.test_forward_probabilities_and_mask),
        ("teacher-forced normalization", test_explainer.test_teacher_forcing_is_causal_and_normalized),
        ("attention normalization", test_explainer.test_attention_symmetry_and_single_object),
        ("source gate bounds", test_explainer.test_source_gate_zero_weights_and_bounds),
        ("source gating", test_explainer.test_language_step_gating),
        ("frozen vqa", lambda: test_trainer.test_vqa_stays_frozen(tiny_ds, tiny_vqa)),
        ("random == unfiltered", lambda: test_trainer
         .test_random_equals_unfiltered_filtered_mode(tiny_ds, tiny_vqa)),
        ("accepted fraction vs xi", lambda: test_trainer
         .test_accepted_fraction_non_increasing_in_xi(tiny_ds, tiny_vqa)),
        ("S_f scale/permutation", test_faithfulness.test_score_scale_and_permutation_invariance),
        ("filter monotone", test_faithfulness.test_filter_monotone_in_xi),
        ("attribution nonnegative", test_faithfulness.test_attribution_vector_is_nonnegative),
        ("link rule conjunction", test_linker.test_link_rule_is_the_conjunction),
        ("agreement monotone in L", test_limeaudit.test_agreement_monotone_in_linked_set),
        ("agreement rescaling", test_limeaudit.test_agreement_invariant_to_rescaling),
        ("emd metric axioms", test_metrics.test_emd_metric_axioms),
        ("rasterize validity", lambda: test_metrics.test_rasterize_always_valid(tiny_ds)),
        ("reference permutation", test_metrics.test_reference_permutation_invariance),
    ] + boundary
    failed = run_checks(checks)
    ok = not failed
    record(10, ok, f"{len(checks) - len(failed)}/{len(checks)} invariant checks hold "
                   f"({len(boundary)} link-rule boundary cases)"
                   + (f"; failed: {failed}" if failed else ""))
    assert ok


def test_reported_measurements(sweep):
    """Desk-scale values reported without a pass/fail threshold."""
    lines = [f"vqa test accuracy {sweep['vqa']['test_accuracy']:.3f}"]
    for mode, s in sweep["summary"].items():
        lines.append(f"{mode}: BLEU-4 {s['bleu4']:.3f} ROUGE-L {s['rougeL']:.3f} "
                     f"CIDEr {s['cider']:.3f} EMD {s['emd']:.3f} links/expl "
                     f"{s['links_per_explanation']:.2f} category mention "
                     f"{s['category_mention_rate']:.3f}")
    ACCEPTANCE[99] = "measured (no threshold): " + " | ".join(lines)
    print(ACCEPTANCE[99])
