import math

import numpy as np
import pytest
import torch

from dpspg.encoders import ClassVocabulary, EncoderConfig, MiniVLM, build_vocabulary
from dpspg.errors import InvalidInput, InvalidParameter
from dpspg.numkernel import DTYPE, ParamStore, generator_for, grad_check
from dpspg.promptlabels import (
    Stage1Config,
    binary_cross_entropy,
    cross_entropy,
    load_labels,
    negative_label_loss,
    negative_probabilities,
    negative_target,
    negative_targets,
    positive_label_loss,
    save_labels,
    train_domain_labels,
)


@pytest.fixture(scope="module")
def enc():
    vlm = MiniVLM(EncoderConfig(seed=1))
    vocab = build_vocabulary(4, 32, 1)
    e = torch.randn(16, 64, generator=generator_for(0), dtype=DTYPE)
    e = e / e.norm(dim=1, keepdim=True)
    y = torch.arange(16) % 4
    return vlm, vocab, e, y


def test_negative_target_examples():
    assert negative_target(1, 3).tolist() == [1.0, 0.0, 1.0]
    assert negative_target(0, 2).tolist() == [0.0, 1.0]
    bits = negative_targets(torch.tensor([0, 3, 2, 2]), 5)
    assert bits.sum(dim=1).tolist() == [4.0] * 4
    with pytest.raises(InvalidParameter):
        negative_target(3, 3)


def test_cross_entropy_arithmetic():
    # K=2, true-class probability e/(e+1)
    loss = cross_entropy(torch.tensor([[1.0, 0.0]], dtype=DTYPE), torch.tensor([0]))
    assert abs(float(loss) - 0.31326168751822286) < 1e-12


def test_bce_examples():
    y = torch.tensor([[1.0, 0.0, 1.0]], dtype=DTYPE)
    half = torch.full((1, 3), 0.5, dtype=DTYPE)
    # per-sample sum 3 ln 2 = 2.07944, averaged over classes -> ln 2
    assert abs(3 * float(binary_cross_entropy(half, y)) - 2.0794415416798357) < 1e-12
    assert float(binary_cross_entropy(y.clone(), y)) <= 3 * 1e-6


def test_positive_loss_uniform_is_log_k(enc):
    vlm, vocab, e, y = enc
    same = ClassVocabulary(vocab.class_embeddings[:1].repeat(4, 1), vocab.positive_template,
                           vocab.negative_template, 0)
    loss = positive_label_loss(e, y, same.positive_template, same, vlm, 0.1)
    assert abs(float(loss) - math.log(4)) < 1e-12


def test_losses_reject_empty_batch(enc):
    vlm, vocab, e, y = enc
    with pytest.raises(InvalidInput):
        positive_label_loss(e[:0], y[:0], vocab.positive_template, vocab, vlm, 0.1)
    with pytest.raises(InvalidInput):
        negative_label_loss(e[:0], y[:0], vocab.negative_template, vocab, vlm, 0.1)


@pytest.mark.parametrize("polarity", ["positive", "negative"])
def test_label_loss_gradients(enc, polarity):
    vlm, vocab, e, y = enc
    ps = ParamStore()
    ps.add("v", vocab.positive_template if polarity == "positive" else vocab.negative_template)
    fn = positive_label_loss if polarity == "positive" else negative_label_loss
    assert grad_check(lambda p: fn(e, y, p["v"], vocab, vlm, 0.1), ps) <= 1e-4


def test_centered_link_is_shift_invariant():
    s = torch.tensor([[0.1, 0.4, -0.2]], dtype=DTYPE)
    assert torch.allclose(negative_probabilities(s, 0.1), negative_probabilities(s + 0.7, 0.1))
    raw = negative_probabilities(s, 0.1, centered=False)
    assert torch.allclose(raw, torch.sigmoid(s / 0.1))


@pytest.fixture(scope="module")
def trained(small_world, small_cfg):
    w = small_world
    tr, va = w.ds.indices(0, "train"), w.ds.indices(0, "val")
    cfg = small_cfg.stage1_config()
    args = (w.emb[tr], w.ds.labels[tr], w.emb[va], w.ds.labels[va], w.vocab, w.vlm, cfg)
    return train_domain_labels(*args, domain=0, seed=0), train_domain_labels(*args, domain=0, seed=0), w


def test_training_deterministic_and_improves(trained):
    a, b, w = trained
    assert torch.equal(a.positive, b.positive) and torch.equal(a.negative, b.negative)
    h = a.history
    assert h["loss_pos"][-1] < h["loss_pos"][0]
    assert h["loss_neg"][-1] < h["loss_neg"][0]
    assert a.val_accuracy >= h["val_acc"][0]
    assert a.val_accuracy >= 1 / w.ds.K
    assert float((a.positive - a.negative).norm()) > 0
    assert a.provenance == (0,)


def test_training_leaves_encoder_frozen(small_world, small_cfg):
    w = small_world
    before = {n: t.clone() for n, t in w.vlm.params.items()}
    tr = w.ds.indices(1, "train")
    train_domain_labels(w.emb[tr], w.ds.labels[tr], w.emb[tr], w.ds.labels[tr], w.vocab, w.vlm,
                        Stage1Config(epochs=2), domain=1)
    for n, t in w.vlm.params.items():
        assert torch.equal(before[n], t)


def test_negative_prompt_scores_true_class_lowest(trained):
    from dpspg.promptlabels import negative_gap

    a, _, w = trained
    tr = w.ds.indices(0, "train")
    assert negative_gap(w.emb[tr], w.ds.labels[tr], a.negative, w.vocab, w.vlm) < 0


def test_label_checkpoint_roundtrip(tmp_path, trained):
    a, _, _ = trained
    path = tmp_path / "l.dpl"
    save_labels(path, a, {"config_hash": "x"})
    assert path.read_bytes()[:4] == b"DPL1"
    b, meta = load_labels(path)
    assert torch.equal(a.positive, b.positive) and torch.equal(a.negative, b.negative)
    assert (b.domain, b.epoch_selected, b.val_accuracy) == (a.domain, a.epoch_selected, a.val_accuracy)
    assert meta["config_hash"] == "x"


def test_empty_split_is_invalid(small_world):
    w = small_world
    with pytest.raises(InvalidInput):
        train_domain_labels(w.emb[:0], np.zeros(0, int), w.emb[:3], w.ds.labels[:3], w.vocab, w.vlm)
