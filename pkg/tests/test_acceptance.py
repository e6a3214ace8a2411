"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. The directional
reproduction (criterion 6) is the long pole at a few minutes; everything
else finishes in seconds.
"""
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from oracles import (
    brute_force_binary,
    brute_force_multilabel,
    chi2_sf_by_quadrature,
    exact_mcnemar_fraction,
)

from contact.cli import dispatch
from contact.encoder import (
    EncoderConfig,
    backward,
    forward_batch,
    init_params,
)
from contact.evalharness import (
    ARGUMENT_CLASSES,
    ContingencyTable,
    ExperimentSpec,
    balance_subset,
    binary_metrics,
    chi2_cc_statistic,
    make_folds,
    mcnemar,
    multilabel_metrics,
    run_matrix,
    stars,
)
from contact.ioutil import sha256_file
from contact.labels import LabeledPost
from contact.model import ModelState
from contact.report import render_report, validate_report
from contact.synthgen import SynthSpec, gen_labeled, gen_pretrain_corpora
from contact.tokenizer import (
    BOS,
    EOS,
    MASK,
    N_SPECIALS,
    PAD,
    TokenSequence,
    Vocabulary,
    train_bpe,
)
from contact.training import (
    AdamW,
    MaskingPolicy,
    TrainConfig,
    _corrupt_batch,
    _mlm_batch_loss,
    apply_masking,
    finetune_stance,
    mlm_validation_loss,
    predict_proba,
    pretrain,
)

Z_999 = 3.2905267314918945  # two-sided 99.9% normal quantile


def report_pass(n, message):
    print(f"\nACCEPTANCE {n} PASS: {message}")


# --------------------------------------------------------------- criterion 1


def test_criterion_1_gradient_correctness():
    """Analytic gradients match central finite differences on toy configs."""
    t0 = time.time()
    rng = np.random.default_rng(20240501)
    n_configs = 20
    checked = 0
    worst = 0.0
    for trial in range(n_configs):
        n_heads = int(rng.choice([1, 2, 4]))
        d_model = int(n_heads * rng.integers(2, max(3, 16 // n_heads + 1)))
        d_model = min(d_model, 16)
        cfg = EncoderConfig(
            n_layers=int(rng.integers(1, 3)),
            n_heads=n_heads,
            d_model=d_model,
            d_ff=int(rng.integers(4, 14)),
            max_positions=8,
            vocab_size=int(rng.integers(9, 17)),
            dropout_rate=0.0,
            tie_mlm=bool(trial % 3 == 0),
        )
        params = init_params(cfg, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
        length = int(rng.integers(3, 6))
        ids = rng.integers(N_SPECIALS, cfg.vocab_size, size=(2, length))
        ids[:, 0] = BOS
        ids[0, -1] = PAD  # exercise the attention mask
        upstream = {
            "h": rng.normal(size=(2, length, cfg.d_model)),
            "mlm": rng.normal(size=(2, length, cfg.vocab_size)),
            "st": rng.normal(size=(2, 1)),
            "ar": rng.normal(size=(2, 8)),
        }

        def loss_value():
            tr = forward_batch(ids, params, cfg)
            total = (upstream["h"] * tr.hidden).sum()
            total += (upstream["mlm"] * (tr.hidden @ params.mlm_weight()
                                         + params["mlm.b"])).sum()
            total += (upstream["st"] * (tr.pooled @ params["head.stance.w"]
                                        + params["head.stance.b"])).sum()
            total += (upstream["ar"] * (tr.pooled @ params["head.arguments.w"]
                                        + params["head.arguments.b"])).sum()
            return float(total)

        trace = forward_batch(ids, params, cfg)
        grads = backward(trace, params, d_hidden=upstream["h"],
                         d_mlm_logits=upstream["mlm"],
                         d_head_logits=upstream["st"], head="stance")
        extra = backward(trace, params, d_head_logits=upstream["ar"],
                         head="arguments")
        for key in grads:
            grads[key] = grads[key] + extra[key]

        h = 1e-4
        for name, tensor in params.tensors.items():
            flat = tensor.reshape(-1)
            fd = np.empty_like(flat)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_value()
                flat[k] = orig - h
                down = loss_value()
                flat[k] = orig
                fd[k] = (up - down) / (2 * h)
            an = grads[name].reshape(-1)
            err = np.abs(fd - an)
            tol = 1e-3 * np.maximum(np.abs(fd), np.abs(an)) + 1e-7
            assert np.all(err <= tol), (
                f"config {trial} tensor {name}: max excess "
                f"{(err - tol).max():.2e}"
            )
            checked += flat.size
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-6)
            worst = max(worst, float((err / denom).max()))
    elapsed = time.time() - t0
    assert elapsed < 120, f"gradient check took {elapsed:.0f}s"
    report_pass(1, f"{n_configs} configs, {checked} gradient components, "
                   f"worst rel err {worst:.2e}, {elapsed:.0f}s")


# --------------------------------------------------------------- criterion 2


def test_criterion_2_masking_statistics():
    """Selection rate and branch split stay inside their 99.9% CIs."""
    t0 = time.time()
    vocab = Vocabulary(merges=[], alphabet=list(range(256)))
    n_vocab = len(vocab)
    policy = MaskingPolicy(seed=77)
    rng = np.random.default_rng(policy.seed)
    body = 98
    n_seqs = 1100  # 107,800 maskable positions
    selected = 0
    went_mask = 0
    changed = 0
    unchanged = 0
    total = 0
    gen = np.random.default_rng(5150)
    for _ in range(n_seqs):
        ids = tuple(int(x) for x in gen.integers(N_SPECIALS, n_vocab, size=body))
        seq = TokenSequence(ids=(BOS, *ids, EOS), original_length=body + 2)
        corrupted, positions, originals = apply_masking(seq, policy, vocab, rng=rng)
        total += body
        selected += len(positions)
        for pos, orig in zip(positions, originals):
            new = corrupted.ids[pos]
            if new == MASK:
                went_mask += 1
            elif new == orig:
                unchanged += 1
            else:
                changed += 1
    assert total >= 100_000

    rate = selected / total
    half = Z_999 * math.sqrt(0.15 * 0.85 / total)
    assert abs(rate - 0.15) <= half, f"selection rate {rate:.4f} outside CI"

    for count, p in ((went_mask, 0.8), (changed, 0.1), (unchanged, 0.1)):
        share = count / selected
        margin = Z_999 * math.sqrt(p * (1 - p) / selected)
        # random replacement can redraw the original, shifting ~1/|V| of mass
        slack = 1.5 / (n_vocab - N_SPECIALS)
        assert abs(share - p) <= margin + slack, (
            f"branch share {share:.4f} outside CI around {p}"
        )
    elapsed = time.time() - t0
    assert elapsed < 30
    report_pass(2, f"{total} positions, rate {rate:.4f} in 0.15 ± {half:.4f}; "
                   f"branches {went_mask}/{changed}/{unchanged}, {elapsed:.1f}s")


# --------------------------------------------------------------- criterion 3


def test_criterion_3_metric_oracle_equivalence():
    """Implementation equals the brute-force counter on 10k random cases."""
    t0 = time.time()
    rng = np.random.default_rng(333)
    cases = 10_000
    for _ in range(cases):
        n_classes = int(rng.integers(1, 4))
        classes = ["a", "b", "c"][:n_classes]
        n = int(rng.integers(1, 5))
        gold = [frozenset(c for c in classes if rng.random() < 0.4) for _ in range(n)]
        pred = [frozenset(c for c in classes if rng.random() < 0.4) for _ in range(n)]
        assert multilabel_metrics(gold, pred, classes) == brute_force_multilabel(
            gold, pred, classes
        )
        gold_b = [bool(rng.integers(2)) for _ in range(n)]
        pred_b = [bool(rng.integers(2)) for _ in range(n)]
        assert binary_metrics(gold_b, pred_b) == brute_force_binary(gold_b, pred_b)

    worked = multilabel_metrics(
        [{"a"}, {"b"}, {"a", "b"}], [{"a"}, set(), {"a"}], classes=["a", "b"]
    )
    assert worked["micro"]["f1"] == pytest.approx(2 / 3, abs=1e-12)
    assert round(worked["micro"]["f1"], 3) == 0.667
    assert worked["macro"]["f1"] == pytest.approx(0.5, abs=1e-12)
    assert worked["emr"] == pytest.approx(1 / 3, abs=1e-12)
    assert round(worked["emr"], 3) == 0.333
    assert worked["samples"]["f1"] == pytest.approx(5 / 9, abs=1e-12)
    assert round(worked["samples"]["f1"], 3) == 0.556
    elapsed = time.time() - t0
    assert elapsed < 60
    report_pass(3, f"{cases} random cases exactly equal, worked example "
                   f"verified, {elapsed:.1f}s")


# --------------------------------------------------------------- criterion 4


def test_criterion_4_mcnemar_oracle():
    t0 = time.time()
    table = ContingencyTable(n00=0, n01=2, n10=10, n11=0)

    p_exact = mcnemar(table, "exact")
    num, den = exact_mcnemar_fraction(10, 2)
    assert (num, den) == (158, 4096)
    assert abs(p_exact - 158 / 4096) <= 1e-9
    assert Fraction(p_exact).limit_denominator(10**9) == Fraction(158, 4096)

    stat = chi2_cc_statistic(table)
    assert abs(stat - 49 / 12) <= 1e-12
    p_chi2 = mcnemar(table, "chi2_cc")
    assert abs(p_chi2 - chi2_sf_by_quadrature(stat)) <= 1e-6

    assert mcnemar(ContingencyTable(5, 0, 0, 5), "exact") == 1.0
    assert mcnemar(ContingencyTable(5, 0, 0, 5), "chi2_cc") == 1.0
    elapsed = time.time() - t0
    assert elapsed < 5
    report_pass(4, f"exact p = {p_exact:.10f} (158/4096), chi2 statistic "
                   f"{stat:.12f}, chi2 p {p_chi2:.6f} vs quadrature, {elapsed:.1f}s")


# --------------------------------------------------------------- criterion 5


def test_criterion_5_split_integrity():
    spec = SynthSpec(
        n_labeled={"twitter": 2600, "facebook": 2600}, noise_rate=0.0, seed=99,
        n_pretrain_docs=0,
    )
    posts = gen_labeled(spec)
    balanced = balance_subset(posts, 1250, seed=13)
    assert len(balanced) == 5000
    folds = make_folds(balanced, 10, seed=13)

    ids = [p.id for fold in folds for p in fold]
    assert len(ids) == 5000 and len(set(ids)) == 5000
    assert sorted(ids) == sorted(p.id for p in balanced)
    for fold in folds:
        assert len(fold) == 500
        for stance in ("hesitant", "not_hesitant"):
            for platform in ("twitter", "facebook"):
                n = sum(1 for p in fold
                        if p.stance2 == stance and p.platform == platform)
                assert n == 125, (stance, platform, n)
    report_pass(5, "5000 balanced posts -> 10 disjoint exhaustive folds, "
                   "125 per (class, platform) cell in every fold")


# --------------------------------------------------------------- criterion 6


@pytest.fixture(scope="module")
def directional_world():
    """Generic-domain model G and in-domain-continued model C plus data."""
    spec = SynthSpec(
        n_pretrain_docs=3500,
        n_labeled={"twitter": 160, "facebook": 160},
        noise_rate=0.05,
        seed=11,
    )
    domain_a, domain_b = gen_pretrain_corpora(spec)
    texts_a = [p.text for p in domain_a]
    texts_b = [p.text for p in domain_b]
    labeled = gen_labeled(spec)

    vocab = train_bpe(texts_a + texts_b, vocab_size=460)
    enc_cfg = EncoderConfig(
        n_layers=2, n_heads=2, d_model=32, d_ff=64, max_positions=48,
        vocab_size=len(vocab), dropout_rate=0.1, tie_mlm=True,
    )
    policy = MaskingPolicy(select_prob=0.25, seed=101)
    base = ModelState(params=init_params(enc_cfg, seed=5), vocab=vocab)

    pretrain_cfg = TrainConfig(epochs=4, batch_size=16, learning_rate=2e-3,
                               validation_fraction=0.0, seed=21)
    params_g, _ = pretrain(base, texts_a, pretrain_cfg, policy)
    model_g = ModelState(params=params_g, vocab=vocab)

    n_hold = len(texts_b) // 5
    b_val, b_train = texts_b[:n_hold], texts_b[n_hold:]
    continue_cfg = TrainConfig(epochs=4, batch_size=16, learning_rate=2e-3,
                               validation_fraction=0.0, seed=22)
    params_c, _ = pretrain(model_g, b_train, continue_cfg, policy)
    model_c = ModelState(params=params_c, vocab=vocab)
    return model_g, model_c, b_val, labeled, policy


def test_criterion_6_directional_domain_adaptation(directional_world):
    t0 = time.time()
    model_g, model_c, b_val, labeled, policy = directional_world

    # (a) in-domain MLM validation loss drops by at least 10 percent
    loss_g = mlm_validation_loss(model_g, b_val, policy)
    loss_c = mlm_validation_loss(model_c, b_val, policy)
    improvement = (loss_g - loss_c) / loss_g
    assert improvement >= 0.10, f"MLM improvement only {improvement:.1%}"

    # (b) downstream cross-genre F1: fine-tune on twitter, test on facebook
    twitter = [p for p in labeled if p.platform == "twitter"]
    facebook = [p for p in labeled if p.platform == "facebook"]
    gold = [p.hesitant for p in facebook]
    wins = 0
    margins = []
    for seed in range(5):
        ft_cfg = TrainConfig(epochs=4, batch_size=8, learning_rate=1e-3, seed=seed)
        f1 = {}
        for name, model in (("baseline", model_g), ("adapted", model_c)):
            params = finetune_stance(model, twitter, ft_cfg)
            probs = predict_proba(params, model.vocab,
                                  [p.text for p in facebook], "stance")
            f1[name] = binary_metrics(gold, (probs >= 0.5).tolist())[2]
        wins += f1["adapted"] > f1["baseline"]
        margins.append(f1["adapted"] - f1["baseline"])
    assert wins >= 4, f"adapted model won only {wins}/5 seeds ({margins})"

    # (c) the harness emits the six-setting matrix and per-class star table
    harness_cfg = TrainConfig(epochs=4, batch_size=8, learning_rate=1e-3, seed=0)
    stance_spec = ExperimentSpec(task="stance", setting="all", folds=3, seed=7)
    stance_report = run_matrix(stance_spec, model_g, model_c, labeled,
                               train_cfg=harness_cfg)
    obj = stance_report.to_json()
    validate_report(obj)
    assert [(s["train"], s["test"]) for s in obj["settings"]] == [
        ("twitter", "twitter"), ("twitter", "facebook"),
        ("facebook", "facebook"), ("facebook", "twitter"),
        ("both", "twitter"), ("both", "facebook"),
    ]
    for s in obj["settings"]:
        expected_kind = "single" if s["train"] != s["test"] and s["train"] != "both" else "cv"
        assert s["kind"] == expected_kind
        if s["kind"] == "single":
            assert s["rows"]["adapted"]["std"] is None
        else:
            assert len(s["rows"]["adapted"]["folds"]) == 3
        assert set(s["comparison"]) == {"b", "c", "p_value", "stars"}
    text = render_report(obj)
    matrix_rows = [l for l in text.splitlines()
                   if l.startswith(("baseline", "adapted"))]
    assert len(matrix_rows) == 12  # six settings x two model variants

    hesitant = [p for p in labeled if p.hesitant]
    args_spec = ExperimentSpec(task="arguments", setting="all", folds=3, seed=7)
    args_report = run_matrix(args_spec, model_g, model_c, hesitant,
                             train_cfg=harness_cfg)
    args_obj = args_report.to_json()
    validate_report(args_obj)
    assert len(args_obj["settings"]) == 6
    for s in args_obj["settings"]:
        assert set(s["comparison"]) == set(ARGUMENT_CLASSES)
        for comp in s["comparison"].values():
            assert comp["stars"] == stars(comp["p_value"])
    args_text = render_report(args_obj)
    assert "significant improvements" in args_text

    elapsed = time.time() - t0
    assert elapsed < 900, f"directional run took {elapsed:.0f}s"
    report_pass(6, f"MLM val loss {loss_g:.3f} -> {loss_c:.3f} "
                   f"({improvement:.0%}); downstream wins {wins}/5 "
                   f"(margins {[round(m, 3) for m in margins]}); six-setting "
                   f"matrix + per-class star table emitted; {elapsed:.0f}s")


# --------------------------------------------------------------- criterion 7


def test_criterion_7_corpus_pipeline_golden(fixtures_dir, tmp_path):
    fixture = fixtures_dir / "raw_posts_200.jsonl"
    digests = []
    for tag, jobs in (("a", 1), ("b", 1), ("c", 3)):
        out = tmp_path / f"clean_{tag}.jsonl"
        rep = tmp_path / f"report_{tag}.json"
        code = dispatch(["corpus", "filter", "--in", str(fixture),
                         "--out", str(out), "--report", str(rep),
                         "--seed", "17", "--jobs", str(jobs)])
        assert code == 0
        digests.append((sha256_file(out), sha256_file(rep)))
    assert digests[0] == digests[1] == digests[2]

    docs = [json.loads(line) for line in (tmp_path / "clean_a.jsonl").open()]
    for doc in docs:
        for token in doc["text"].split():
            assert not token.startswith("@") or token == "@USER", doc["text"]

    # independent recount of the stage ladder
    import re
    import unicodedata

    from contact.corpus import compile_rules, default_rules_path
    from contact.langid import detect_language, load_default_profiles

    rules = compile_rules(default_rules_path())
    profiles = load_default_profiles()
    raw = [json.loads(line) for line in fixture.open()]
    nfc = lambda s: unicodedata.normalize("NFC", s)
    matched = [r for r in raw
               if any(p.search(nfc(r["text"])) for rule in rules for p in rule.patterns)]
    seen, unique = set(), []
    for r in matched:
        key = re.sub(r"\s+", " ", nfc(r["text"]).lower()).strip()
        if key not in seen:
            seen.add(key)
            unique.append(r)
    no_rt = [r for r in unique
             if not r.get("is_retweet_flag")
             and not nfc(r["text"]).lstrip().startswith("RT @")]
    kept = [r for r in no_rt
            if detect_language(r["text"], profiles)[0] in ("nl", "und")]
    report = json.loads((tmp_path / "report_a.json").read_text())
    assert report["counts"] == {
        "input": len(raw),
        "keyword_matched": len(matched),
        "after_dedup": len(unique),
        "after_retweet_removal": len(no_rt),
        "after_language_filter": len(kept),
    }
    assert report["counts"]["input"] == 200
    assert len(docs) == len(kept)
    report_pass(7, f"byte-identical across reruns and --jobs 1/3; "
                   f"stage ladder {list(report['counts'].values())} matches "
                   f"the independent recount; anonymization complete")


# --------------------------------------------------------------- criterion 8


def test_criterion_8_overfit_sanity(fixtures_dir):
    t0 = time.time()
    texts = [json.loads(line)["text"]
             for line in (fixtures_dir / "toy_pretrain.jsonl").open()]
    vocab = train_bpe(texts, vocab_size=170)
    cfg = EncoderConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64,
                        max_positions=32, vocab_size=len(vocab), dropout_rate=0.0)
    model = ModelState(params=init_params(cfg, seed=3), vocab=vocab)

    # single fixed batch, static corruption, 300 optimizer steps
    from contact.tokenizer import encode

    seqs = [encode(t, vocab, cfg.max_positions) for t in texts[:8]]
    policy = MaskingPolicy(seed=17)
    ids, pos_b, pos_l, targets = _corrupt_batch(
        seqs, policy, vocab, np.random.default_rng(17)
    )
    assert len(targets) > 0
    params = model.params.copy()
    opt = AdamW(params, TrainConfig(learning_rate=2e-3, epochs=1))
    steps = 0
    for step in range(300):
        loss, grads = _mlm_batch_loss(params, ids, pos_b, pos_l, targets,
                                      "train", dropout_seed=0)
        opt.step(params, grads)
        steps = step + 1
        if step % 25 == 0 or step == 299:
            logits = _mlm_batch_loss(params, ids, pos_b, pos_l, targets,
                                     "eval", 0)[0]
        del logits
    trace = forward_batch(ids, params, cfg)
    logits = trace.hidden[pos_b, pos_l] @ params.mlm_weight() + params["mlm.b"]
    recovered = (logits.argmax(axis=1) == targets).mean()
    assert recovered == 1.0, f"argmax recovery {recovered:.2%} after {steps} steps"

    # classifier heads reach training accuracy 1.0 within 300 steps
    from contact.labels import read_labeled_posts
    from contact.training import finetune_arguments

    posts = list(read_labeled_posts(fixtures_dir / "toy_labeled.jsonl"))
    ft = TrainConfig(epochs=300, batch_size=8, learning_rate=2e-3, seed=1)

    stance_params = finetune_stance(model, posts, ft)
    probs = predict_proba(stance_params, vocab, [p.text for p in posts], "stance")
    stance_acc = np.mean((probs >= 0.5) == np.array([p.hesitant for p in posts]))
    assert stance_acc == 1.0

    args_params = finetune_arguments(model, posts, ft)
    aprobs = predict_proba(args_params, vocab, [p.text for p in posts], "arguments")
    pred_sets = [
        frozenset(c for j, c in enumerate(ARGUMENT_CLASSES) if aprobs[i, j] >= 0.5)
        for i in range(len(posts))
    ]
    subset_acc = np.mean([pred_sets[i] == posts[i].arguments
                          for i in range(len(posts))])
    assert subset_acc == 1.0
    elapsed = time.time() - t0
    report_pass(8, f"MLM argmax recovery 100% within 300 steps; stance and "
                   f"argument training accuracy 1.0 within 300 steps; "
                   f"{elapsed:.0f}s")
