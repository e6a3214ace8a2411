import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contact.encoder import EncoderConfig, init_params, zero_grads
from contact.errors import DataError, NumericalError
from contact.labels import LabeledPost
from contact.model import ModelState
from contact.tokenizer import BOS, EOS, MASK, N_SPECIALS, PAD, TokenSequence, encode
from contact.training import (
    AdamW,
    MaskingPolicy,
    TrainConfig,
    TrainLog,
    _check_loss,
    apply_masking,
    finetune_arguments,
    finetune_stance,
    load_train_config,
    mlm_validation_loss,
    parse_train_config_file,
    predict_proba,
    pretrain,
)

TOY_TEXTS = [
    "de prik beschermt tegen het virus",
    "morgen haal ik mijn vaccin",
    "de lockdown duurt twee weken",
    "veel mensen twijfelen over het vaccin",
    "de dokter geeft de prik",
    "het virus verspreidt zich snel",
    "de avondklok gaat vanavond in",
    "de teststraat is morgen open",
] * 2


def seq_of(ids):
    return TokenSequence(ids=tuple(ids), original_length=len(ids))


class TestMaskingPolicy:
    def test_branch_probs_must_sum_to_one(self):
        with pytest.raises(DataError):
            MaskingPolicy(replace_mask_prob=0.8, replace_random_prob=0.3, keep_prob=0.1)

    def test_select_prob_bounds(self):
        with pytest.raises(DataError):
            MaskingPolicy(select_prob=0.0)
        with pytest.raises(DataError):
            MaskingPolicy(select_prob=1.0)


class TestApplyMasking:
    def test_specials_only_sequence_has_no_loss_positions(self, tiny_vocab):
        seq = seq_of([BOS, PAD, PAD, EOS])
        corrupted, positions, originals = apply_masking(
            seq, MaskingPolicy(seed=1), tiny_vocab
        )
        assert positions == [] and originals == []
        assert corrupted.ids == seq.ids

    def test_deterministic_under_policy_seed(self, tiny_vocab):
        seq = seq_of([BOS] + list(range(6, 26)) + [EOS])
        a = apply_masking(seq, MaskingPolicy(seed=5), tiny_vocab)
        b = apply_masking(seq, MaskingPolicy(seed=5), tiny_vocab)
        assert a == b

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=60)
    def test_specials_never_selected_and_framing_kept(self, tiny_vocab, seed):
        seq = seq_of([BOS, 6, PAD, 8, MASK, 9, EOS])
        rng = np.random.default_rng(seed)
        corrupted, positions, originals = apply_masking(
            seq, MaskingPolicy(seed=0), tiny_vocab, rng=rng
        )
        assert all(seq.ids[i] >= N_SPECIALS for i in positions)
        assert corrupted.ids[0] == BOS and corrupted.ids[-1] == EOS
        assert corrupted.ids[2] == PAD and corrupted.ids[4] == MASK
        for i, orig in zip(positions, originals):
            assert seq.ids[i] == orig
            assert N_SPECIALS <= corrupted.ids[i] or corrupted.ids[i] == MASK

    def test_keep_branch_leaves_token(self, tiny_vocab):
        # with keep_prob 1.0 every selected position keeps its token
        policy = MaskingPolicy(replace_mask_prob=0.0, replace_random_prob=0.0,
                               keep_prob=1.0, select_prob=0.99, seed=3)
        seq = seq_of([BOS] + [7] * 20 + [EOS])
        corrupted, positions, _ = apply_masking(seq, policy, tiny_vocab)
        assert positions
        assert corrupted.ids == seq.ids

    def test_random_branch_draws_non_special(self, tiny_vocab):
        policy = MaskingPolicy(replace_mask_prob=0.0, replace_random_prob=1.0,
                               keep_prob=0.0, select_prob=0.99, seed=3)
        seq = seq_of([BOS] + [7] * 50 + [EOS])
        corrupted, positions, _ = apply_masking(seq, policy, tiny_vocab)
        assert all(corrupted.ids[i] >= N_SPECIALS for i in positions)
        assert all(corrupted.ids[i] < len(tiny_vocab) for i in positions)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(DataError):
            TrainConfig(epochs=0)
        with pytest.raises(DataError):
            TrainConfig(validation_fraction=1.0)

    def test_fingerprint_stable_and_sensitive(self):
        assert TrainConfig().fingerprint() == TrainConfig().fingerprint()
        assert TrainConfig().fingerprint() != TrainConfig(seed=1).fingerprint()

    def test_parse_file(self, tmp_path):
        f = tmp_path / "train.cfg"
        f.write_text("# comment\nepochs = 7\nlearning_rate = 1e-4  # inline\n\nseed=9\n")
        cfg = load_train_config(f)
        assert (cfg.epochs, cfg.learning_rate, cfg.seed) == (7, 1e-4, 9)

    def test_parse_unknown_key(self, tmp_path):
        f = tmp_path / "train.cfg"
        f.write_text("momentum = 0.9\n")
        with pytest.raises(DataError, match="momentum"):
            parse_train_config_file(f)

    def test_parse_bad_value(self, tmp_path):
        f = tmp_path / "train.cfg"
        f.write_text("epochs = many\n")
        with pytest.raises(DataError, match="epochs"):
            parse_train_config_file(f)

    def test_overrides_beat_file(self, tmp_path):
        f = tmp_path / "train.cfg"
        f.write_text("epochs = 7\nbatch_size = 4\n")
        cfg = load_train_config(f, epochs=2)
        assert (cfg.epochs, cfg.batch_size) == (2, 4)


class TestAdamW:
    def test_zero_grad_zero_decay_is_noop(self, tiny_params):
        params = tiny_params.copy()
        opt = AdamW(params, TrainConfig(weight_decay=0.0, learning_rate=1e-3))
        before = {k: v.copy() for k, v in params.tensors.items()}
        opt.step(params, zero_grads(params))
        assert all(np.array_equal(before[k], params.tensors[k]) for k in before)

    def test_lr_zero_is_noop_even_with_decay(self, tiny_params):
        params = tiny_params.copy()
        opt = AdamW(params, TrainConfig(weight_decay=0.01, learning_rate=0.0))
        grads = {k: np.ones_like(v) for k, v in params.tensors.items()}
        opt.step(params, grads)
        assert all(np.array_equal(tiny_params.tensors[k], params.tensors[k])
                   for k in params.tensors)

    def test_clipping_reported_norm(self, tiny_params):
        params = tiny_params.copy()
        opt = AdamW(params, TrainConfig(grad_clip_norm=1.0))
        grads = {k: np.ones_like(v) for k, v in params.tensors.items()}
        total = math.sqrt(sum(v.size for v in params.tensors.values()))
        assert opt.step(params, grads) == pytest.approx(total, rel=1e-6)


@pytest.fixture()
def toy_model(tiny_vocab):
    cfg = EncoderConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32,
                        max_positions=32, vocab_size=len(tiny_vocab),
                        dropout_rate=0.0)
    return ModelState(params=init_params(cfg, seed=11), vocab=tiny_vocab)


class TestPretrain:
    def test_loss_decreases_over_first_epochs(self, fixtures_dir):
        import json

        texts = [json.loads(line)["text"]
                 for line in (fixtures_dir / "toy_pretrain.jsonl").open()]
        assert len(texts) == 20
        from contact.tokenizer import train_bpe

        vocab = train_bpe(texts, vocab_size=170)
        enc_cfg = EncoderConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32,
                                max_positions=32, vocab_size=len(vocab),
                                dropout_rate=0.0)
        model = ModelState(params=init_params(enc_cfg, seed=11), vocab=vocab)
        cfg = TrainConfig(epochs=6, batch_size=8, learning_rate=2e-3,
                          validation_fraction=0.0, seed=1)
        _, log = pretrain(model, texts, cfg, MaskingPolicy(seed=2))
        losses = log.train_losses
        assert all(a > b for a, b in zip(losses[:5], losses[1:6]))

    def test_bitwise_deterministic(self, toy_model):
        cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=1e-3,
                          validation_fraction=0.2, seed=4)
        p1, log1 = pretrain(toy_model, TOY_TEXTS, cfg, MaskingPolicy(seed=5))
        p2, log2 = pretrain(toy_model, TOY_TEXTS, cfg, MaskingPolicy(seed=5))
        assert all(np.array_equal(p1.tensors[k], p2.tensors[k]) for k in p1.tensors)
        assert log1.train_losses == log2.train_losses
        assert log1.val_losses == log2.val_losses

    def test_lr_zero_leaves_parameters(self, toy_model):
        cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=0.0,
                          validation_fraction=0.0, seed=4)
        params, _ = pretrain(toy_model, TOY_TEXTS, cfg, MaskingPolicy(seed=5))
        assert all(np.array_equal(params.tensors[k], toy_model.params.tensors[k])
                   for k in params.tensors)

    def test_initial_loss_near_log_vocab(self, toy_model):
        expected = math.log(len(toy_model.vocab))
        loss = mlm_validation_loss(toy_model, TOY_TEXTS, MaskingPolicy(seed=9))
        assert abs(loss - expected) / expected < 0.10

    def test_empty_docs_rejected(self, toy_model):
        with pytest.raises(DataError):
            pretrain(toy_model, [], TrainConfig(), MaskingPolicy())

    def test_log_records_schema(self, toy_model, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=8, validation_fraction=0.25, seed=0)
        _, log = pretrain(toy_model, TOY_TEXTS, cfg, MaskingPolicy(seed=1))
        assert [r["epoch"] for r in log.records] == [0, 1]
        for r in log.records:
            assert r["config_fingerprint"] == cfg.fingerprint()
            assert r["val_loss"] is not None
        log.write(tmp_path / "log.jsonl")
        assert (tmp_path / "log.jsonl").read_text().count("\n") == 2


class TestNumericalGuards:
    def test_check_loss_raises_with_context(self):
        with pytest.raises(NumericalError, match="step 17"):
            _check_loss(float("nan"), 17, np.array([[1, 2, 3]]))

    def test_trainlog_rejects_negative(self):
        log = TrainLog()
        with pytest.raises(NumericalError):
            log.add(epoch=0, train_loss=-1.0)


STANCE_POSTS = [
    LabeledPost(id="1", platform="twitter", text="ik weiger dat gif vaccin",
                stance2="hesitant"),
    LabeledPost(id="2", platform="twitter", text="ik vertrouw de prik volledig",
                stance2="not_hesitant"),
    LabeledPost(id="3", platform="facebook", text="nooit laat ik mij vaccineren",
                stance2="hesitant"),
    LabeledPost(id="4", platform="facebook", text="vaccin is veilig en goed",
                stance2="not_hesitant"),
]


class TestFinetuneStance:
    def test_single_example_overfits(self, toy_model):
        cfg = TrainConfig(epochs=100, batch_size=1, learning_rate=2e-3, seed=0)
        params = finetune_stance(toy_model, STANCE_POSTS[:1], cfg)
        prob = predict_proba(params, toy_model.vocab, [STANCE_POSTS[0].text], "stance")
        assert prob[0] > 0.9

    def test_constant_labels_learned(self, toy_model):
        posts = [p for p in STANCE_POSTS if p.hesitant]
        cfg = TrainConfig(epochs=60, batch_size=2, learning_rate=2e-3, seed=0)
        params = finetune_stance(toy_model, posts, cfg)
        probs = predict_proba(params, toy_model.vocab, [p.text for p in posts], "stance")
        assert np.all(probs > 0.5)

    def test_seed_fixed_double_run_identical(self, toy_model):
        cfg = TrainConfig(epochs=3, batch_size=2, learning_rate=1e-3, seed=8)
        a = finetune_stance(toy_model, STANCE_POSTS, cfg)
        b = finetune_stance(toy_model, STANCE_POSTS, cfg)
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_empty_data_rejected(self, toy_model):
        with pytest.raises(DataError):
            finetune_stance(toy_model, [], TrainConfig())

    def test_initial_bce_near_log_two(self, toy_model):
        probs = predict_proba(toy_model.params, toy_model.vocab,
                              [p.text for p in STANCE_POSTS], "stance")
        y = np.array([1.0 if p.hesitant else 0.0 for p in STANCE_POSTS])
        bce = float(np.mean(-(y * np.log(probs) + (1 - y) * np.log(1 - probs))))
        assert abs(bce - math.log(2)) / math.log(2) < 0.10


ARG_POSTS = [
    LabeledPost(id="1", platform="twitter", text="bijwerkingen en vrijheid baren zorgen",
                stance2="hesitant", arguments=frozenset({"safety", "liberty"})),
    LabeledPost(id="2", platform="twitter", text="geen argument gewoon twijfel",
                stance2="hesitant", arguments=frozenset()),
    LabeledPost(id="3", platform="facebook", text="bigpharma verdient te veel geld",
                stance2="hesitant", arguments=frozenset({"institutional_motives"})),
    LabeledPost(id="4", platform="facebook", text="microchip verhalen overal online",
                stance2="hesitant", arguments=frozenset({"conspiracy"})),
]


class TestFinetuneArguments:
    def test_target_vectors(self):
        from contact.training import _argument_targets

        y = _argument_targets(ARG_POSTS)
        assert y[0].sum() == 2 and y[1].sum() == 0
        assert y.shape == (4, 8)

    def test_unknown_label_named(self, toy_model):
        bad = LabeledPost(id="x", platform="twitter", text="t", stance2="hesitant")
        object.__setattr__(bad, "arguments", frozenset({"fearmongering"}))
        with pytest.raises(DataError, match="fearmongering"):
            finetune_arguments(toy_model, [bad], TrainConfig(epochs=1))

    def test_overfit_subset_accuracy(self, toy_model):
        cfg = TrainConfig(epochs=120, batch_size=4, learning_rate=2e-3, seed=0)
        params = finetune_arguments(toy_model, ARG_POSTS, cfg)
        probs = predict_proba(params, toy_model.vocab,
                              [p.text for p in ARG_POSTS], "arguments")
        from contact.labels import ARGUMENT_CLASSES

        pred = [frozenset(c for j, c in enumerate(ARGUMENT_CLASSES) if probs[i, j] >= 0.5)
                for i in range(len(ARG_POSTS))]
        assert pred == [p.arguments for p in ARG_POSTS]

    def test_initial_per_label_bce_near_log_two(self, toy_model):
        probs = predict_proba(toy_model.params, toy_model.vocab,
                              [p.text for p in ARG_POSTS], "arguments")
        from contact.training import _argument_targets

        y = _argument_targets(ARG_POSTS)
        bce = float(np.mean(-(y * np.log(probs) + (1 - y) * np.log(1 - probs))))
        assert abs(bce - math.log(2)) / math.log(2) < 0.10
