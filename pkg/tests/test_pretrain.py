import math
import random

import pytest
import torch

from flowclass.errors import InputError, NumericError
from flowclass.model import DTYPE, EncoderConfig, batch_ids, build_model
from flowclass.pretrain import (STRONG, WEAK, ContrastiveConfig,
                                ContrastiveTriple, cpt_loss, info_nce,
                                pretrain_loop, sample_pairs, save_loss_curve)
from flowclass.tokenizer import TokenRecord
from flowclass.train_eval import OptimizerConfig


def rec(i, label, comm):
    return TokenRecord(flow_id=i, ids=[2, 4, 5, 3, 6], rp_len=2, pl_len=1,
                       label=label, comm=comm)


def dataset(labels_comms):
    return [rec(i, lab, comm) for i, (lab, comm) in enumerate(labels_comms)]


class TestSamplePairs:
    def test_deadlock_dataset_yields_diagnostic(self):
        records = dataset([(0, ("a", 1, None))] * 6)
        cfg = ContrastiveConfig(step=3, bz=4, retry_cap=50, seed=0)
        result = sample_pairs(records, cfg)
        assert result.n_triples == 0
        assert result.skipped_slots == 3 * 4
        assert result.diagnostic is not None
        assert "50" in result.diagnostic

    def test_two_class_triples_satisfy_disjunction(self):
        records = dataset([(i % 2, (f"host{i % 3}", 443, None))
                           for i in range(20)])
        cfg = ContrastiveConfig(step=10, bz=8, seed=1)
        result = sample_pairs(records, cfg)
        assert result.n_triples == 10 * 8
        for batch in result.batches:
            for t in batch:
                p, q = records[t.anchor], records[t.negative]
                assert t.anchor == t.anchor_dup
                assert t.negative != t.anchor
                assert (p.label != q.label) or (p.label == q.label
                                                and p.comm != q.comm)
                if t.strength == STRONG:
                    assert p.label != q.label
                else:
                    assert p.label == q.label and p.comm != q.comm

    def test_single_class_two_comms_all_weak(self):
        records = dataset([(0, (f"host{i % 2}", 443, None)) for i in range(10)])
        result = sample_pairs(records, ContrastiveConfig(step=5, bz=6, seed=2))
        assert result.n_triples > 0
        assert all(t.strength == WEAK for b in result.batches for t in b)

    def test_seed_reproducibility(self):
        records = dataset([(i % 3, (f"h{i % 4}", 1, None)) for i in range(30)])
        cfg = ContrastiveConfig(step=4, bz=5, seed=9)
        a = sample_pairs(records, cfg)
        b = sample_pairs(records, cfg)
        assert a.batches == b.batches
        c = sample_pairs(records, ContrastiveConfig(step=4, bz=5, seed=10))
        assert a.batches != c.batches

    def test_requires_labels(self):
        records = dataset([(None, ("a", 1, None)), (None, ("b", 1, None))])
        with pytest.raises(InputError):
            sample_pairs(records, ContrastiveConfig(step=1, bz=1))

    def test_random_datasets_property(self):
        rng = random.Random(3)
        for _ in range(10):
            records = dataset([
                (rng.randrange(3), (f"h{rng.randrange(3)}", 443, None))
                for _ in range(rng.randint(2, 25))])
            result = sample_pairs(records,
                                  ContrastiveConfig(step=3, bz=6, seed=rng.random()
                                                    and rng.randrange(99)))
            for batch in result.batches:
                for t in batch:
                    p, q = records[t.anchor], records[t.negative]
                    assert (p.label != q.label) or p.comm != q.comm


class TestInfoNce:
    def test_equal_similarity_two_candidates_is_ln2(self):
        anchor = torch.tensor([1.0, 0.0], dtype=DTYPE)
        target = torch.tensor([1.0, 1.0], dtype=DTYPE)
        other = torch.tensor([2.0, 2.0], dtype=DTYPE)  # same cosine as target
        loss = info_nce(anchor, target, [target, other], tau=0.7)
        assert float(loss) == pytest.approx(math.log(2), abs=1e-9)

    def test_opposed_distractor_closed_form(self):
        anchor = torch.tensor([1.0, 0.0], dtype=DTYPE)
        target = torch.tensor([2.0, 0.0], dtype=DTYPE)    # sim +1
        distractor = torch.tensor([-3.0, 0.0], dtype=DTYPE)  # sim -1
        loss = info_nce(anchor, target, [target, distractor], tau=1.0)
        assert float(loss) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-9)

    def test_single_candidate_is_zero(self):
        anchor = torch.tensor([0.3, -0.7, 2.0], dtype=DTYPE)
        target = torch.tensor([1.0, 5.0, -2.0], dtype=DTYPE)
        assert float(info_nce(anchor, target, [target], tau=0.2)) == \
            pytest.approx(0.0, abs=1e-12)

    def test_monotone_in_target_similarity(self):
        anchor = torch.tensor([1.0, 0.0], dtype=DTYPE)
        distractors = [torch.tensor([0.5, 0.9], dtype=DTYPE),
                       torch.tensor([-0.2, 1.0], dtype=DTYPE)]
        losses = []
        for angle in (1.2, 0.8, 0.4, 0.1):
            target = torch.tensor([math.cos(angle), math.sin(angle)], dtype=DTYPE)
            losses.append(float(info_nce(anchor, target,
                                         [target] + distractors, tau=0.5)))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_positive_rescaling_invariance(self):
        gen = torch.Generator().manual_seed(0)
        anchor = torch.randn(8, dtype=DTYPE, generator=gen)
        target = torch.randn(8, dtype=DTYPE, generator=gen)
        cands = [target] + [torch.randn(8, dtype=DTYPE, generator=gen)
                            for _ in range(4)]
        base = float(info_nce(anchor, target, cands, tau=0.3))
        scaled = float(info_nce(anchor * 17.0, target * 0.02,
                                [cands[0] * 5.0] + [c * 3.0 for c in cands[1:]],
                                tau=0.3))
        assert scaled == pytest.approx(base, abs=1e-6)

    def test_zero_norm_vector_rejected(self):
        anchor = torch.zeros(4, dtype=DTYPE)
        target = torch.ones(4, dtype=DTYPE)
        with pytest.raises(NumericError):
            info_nce(anchor, target, [target], tau=0.5)

    def test_bad_temperature(self):
        v = torch.ones(3, dtype=DTYPE)
        with pytest.raises(ValueError):
            info_nce(v, v, [v], tau=0.0)


class TestCptLoss:
    def geometry(self):
        gen = torch.Generator().manual_seed(4)
        anchor = torch.randn(6, dtype=DTYPE, generator=gen)
        pos = torch.randn(6, dtype=DTYPE, generator=gen)
        neg = torch.randn(6, dtype=DTYPE, generator=gen)
        cands = [pos, neg] + [torch.randn(6, dtype=DTYPE, generator=gen)
                              for _ in range(3)]
        return anchor, pos, neg, cands

    def test_equal_weights_make_strength_irrelevant(self):
        anchor, pos, neg, cands = self.geometry()
        cfg = ContrastiveConfig(alpha=1.5, beta=1.5)
        strong = cpt_loss(anchor, pos, neg, STRONG, cands, cfg)
        weak = cpt_loss(anchor, pos, neg, WEAK, cands, cfg)
        assert float(strong) == pytest.approx(float(weak), abs=1e-12)

    def test_strength_difference_is_extra_negative_term(self):
        anchor, pos, neg, cands = self.geometry()
        cfg = ContrastiveConfig(alpha=2.0, beta=1.0)
        strong = float(cpt_loss(anchor, pos, neg, STRONG, cands, cfg))
        weak = float(cpt_loss(anchor, pos, neg, WEAK, cands, cfg))
        neg_term = float(info_nce(anchor, neg, cands, cfg.tau))
        assert strong - weak == pytest.approx(-neg_term, abs=1e-10)

    def test_gradient_signs_via_finite_differences(self):
        anchor, pos, neg, cands = self.geometry()
        cfg = ContrastiveConfig(alpha=2.0, beta=1.0)

        def loss_with(p, n):
            return float(cpt_loss(anchor, p, n, STRONG,
                                  [p, n] + cands[2:], cfg))

        eps = 1e-5
        toward = anchor / anchor.norm() * eps
        # moving the positive toward the anchor raises sim(x, y+): loss drops
        assert loss_with(pos + toward, neg) < loss_with(pos - toward, neg)
        # moving the negative toward the anchor raises sim(x, y-): loss rises
        assert loss_with(pos, neg + toward) > loss_with(pos, neg - toward)


def tiny_model(vocab=16, length=5, seed=0, dropout=0.1):
    cfg = EncoderConfig(vocab_size=vocab, max_len=length, d=16, heads=2,
                        d_head=8, ffn_dim=32, n_blocks=1, dropout_rate=dropout,
                        proj_dim=8)
    return build_model(cfg, seed=seed)


class TestPretrainLoop:
    def records(self):
        return dataset([(i % 2, (f"h{i % 3}", 443, None)) for i in range(12)])

    def test_zero_steps_leaves_params_untouched(self):
        model = tiny_model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        model, curve = pretrain_loop(self.records(),
                                     ContrastiveConfig(step=0, bz=4), model)
        assert curve == []
        for key, value in model.state_dict().items():
            assert torch.equal(value, before[key])

    def test_zero_dropout_makes_views_identical(self):
        model = tiny_model(dropout=0.0)
        ids = batch_ids([self.records()[0]])
        a = model.forward(ids, mode="train", seed=1, with_proj=True).proj
        b = model.forward(ids, mode="train", seed=2, with_proj=True).proj
        assert torch.equal(a, b)

    def test_deadlocked_corpus_raises(self):
        records = dataset([(0, ("a", 1, None))] * 4)
        model = tiny_model()
        cfg = ContrastiveConfig(step=2, bz=2, retry_cap=10)
        with pytest.raises(InputError, match="retries"):
            pretrain_loop(records, cfg, model)

    def test_loop_runs_and_records_curve(self):
        model = tiny_model()
        cfg = ContrastiveConfig(step=5, bz=4, seed=3)
        opt = OptimizerConfig(base_lr=1e-3, warmup_fraction=0.2, total_steps=5)
        model, curve = pretrain_loop(self.records(), cfg, model, opt)
        assert len(curve) == 5
        assert all(isinstance(v, float) for _, v in curve)

    def test_non_finite_loss_aborts_with_step(self, monkeypatch):
        model = tiny_model()
        monkeypatch.setattr("flowclass.pretrain._batch_cpt_loss",
                            lambda *a, **k: torch.tensor(float("nan"),
                                                         dtype=DTYPE))
        cfg = ContrastiveConfig(step=2, bz=2, seed=0)
        with pytest.raises(NumericError, match="step 0"):
            pretrain_loop(self.records(), cfg, model)

    def test_intra_class_similarity_improves(self, tiny_encoded):
        labeled, _, vocab = tiny_encoded
        cfg = EncoderConfig(vocab_size=vocab.size, max_len=len(labeled[0].ids),
                            d=32, heads=4, d_head=8, ffn_dim=64, n_blocks=2,
                            dropout_rate=0.1, proj_dim=16)
        model = build_model(cfg, seed=0)

        def mean_intra_class_cosine():
            with torch.no_grad():
                z = model.forward(batch_ids(labeled), mode="eval",
                                  with_proj=True).proj
            z = z / z.norm(dim=1, keepdim=True)
            sims, count = 0.0, 0
            labels = [r.label for r in labeled]
            for i in range(len(labeled)):
                for j in range(i + 1, len(labeled)):
                    if labels[i] == labels[j]:
                        sims += float(z[i] @ z[j])
                        count += 1
            return sims / count

        before = mean_intra_class_cosine()
        ccfg = ContrastiveConfig(step=200, bz=8, tau=0.1, seed=1)
        ocfg = OptimizerConfig(base_lr=5e-4, warmup_fraction=0.1,
                               total_steps=200)
        pretrain_loop(labeled, ccfg, model, ocfg)
        after = mean_intra_class_cosine()
        assert after > before

    def test_loss_curve_file_format(self, tmp_path):
        path = tmp_path / "loss.txt"
        save_loss_curve(path, [(0, 1.5), (1, -0.25)])
        assert path.read_text() == "0\t1.5\n1\t-0.25\n"


class TestTripleValidation:
    def test_bad_strength_rejected(self):
        with pytest.raises(ValueError):
            ContrastiveTriple(0, 0, 1, "medium")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ContrastiveConfig(tau=-1.0)
        with pytest.raises(ValueError):
            ContrastiveConfig(alpha=0.5, beta=1.0)
        with pytest.raises(ValueError):
            ContrastiveConfig(retry_cap=0)
