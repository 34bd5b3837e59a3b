import pytest
import torch

from dpspg.encoders import AlignmentConfig, EncoderConfig, MiniVLM, align_image_encoder, build_vocabulary
from dpspg.errors import InvalidParameter, InvalidShape
from dpspg.numkernel import DTYPE, ParamStore, generator_for, grad_check


@pytest.fixture(scope="module")
def vlm():
    return MiniVLM(EncoderConfig(seed=3))


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary(5, 32, 0)


def test_vocabulary_deterministic_and_shaped():
    a, b = build_vocabulary(7, 32, 4), build_vocabulary(7, 32, 4)
    assert torch.equal(a.class_embeddings, b.class_embeddings)
    assert torch.equal(a.negative_template, b.negative_template)
    assert a.class_embeddings.shape == (7, 32)
    assert torch.cdist(a.class_embeddings, a.class_embeddings).fill_diagonal_(1).min() > 0


def test_vocabulary_seeds_and_templates_differ():
    a, b = build_vocabulary(3, 16, 0), build_vocabulary(3, 16, 1)
    assert not torch.equal(a.positive_template, b.positive_template)
    assert float((a.positive_template - a.negative_template).norm()) > 0
    # only the third template slot changes
    diff = (a.positive_template - a.negative_template).norm(dim=1)
    assert [bool(v > 0) for v in diff] == [False, False, True, False]


def test_vocabulary_errors():
    with pytest.raises(InvalidParameter):
        build_vocabulary(1, 32, 0)
    with pytest.raises(InvalidParameter):
        build_vocabulary(3, 3, 0)


def test_encode_image_unit_norm_and_nonlinear(vlm):
    x = torch.randn(20, 16, generator=generator_for(0), dtype=DTYPE)
    e = vlm.encode_image(x)
    assert float((e.norm(dim=1) - 1).abs().max()) < 1e-9
    assert not torch.allclose(vlm.encode_image(2 * x), e)
    assert torch.equal(vlm.encode_image(x), e)
    with pytest.raises(InvalidShape):
        vlm.encode_image(torch.zeros(3, 15, dtype=DTYPE))


def test_encode_text_unit_norm_and_distinct(vlm, vocab):
    t = vlm.encode_text(vocab.positive_template, vocab.positive_template, vocab.class_embeddings)
    assert t.shape == (5, 64)
    assert float((t.norm(dim=1) - 1).abs().max()) < 1e-9
    assert torch.cdist(t, t).fill_diagonal_(1).min() > 0
    again = vlm.encode_text(vocab.positive_template, vocab.positive_template, vocab.class_embeddings)
    assert torch.equal(t, again)
    with pytest.raises(InvalidShape):
        vlm.encode_text(torch.zeros(3, 32, dtype=DTYPE), vocab.positive_template, vocab.class_embeddings)


def test_encode_text_batched_matches_single(vlm, vocab):
    P = torch.randn(3, 4, 32, generator=generator_for(1), dtype=DTYPE) * 0.2
    batched = vlm.encode_text(P, vocab.negative_template, vocab.class_embeddings)
    assert batched.shape == (3, 5, 64)
    single = vlm.encode_text(P[1], vocab.negative_template, vocab.class_embeddings[2])
    assert float((batched[1, 2] - single).abs().max()) < 1e-12


def test_encode_text_gradient_matches_fd(vlm, vocab):
    ps = ParamStore()
    ps.add("v", vocab.positive_template)
    w = torch.randn(64, generator=generator_for(2), dtype=DTYPE)
    err = grad_check(lambda p: (vlm.encode_text(p["v"], vocab.positive_template, vocab.class_embeddings) @ w).sum(), ps)
    assert err <= 1e-4


def test_cosine_in_range(vlm, vocab):
    e = vlm.encode_image(torch.randn(10, 16, generator=generator_for(4), dtype=DTYPE) * 3)
    t = vlm.encode_text(vocab.positive_template, vocab.positive_template, vocab.class_embeddings)
    s = e @ t.T
    assert float(s.abs().max()) <= 1 + 1e-12


def test_checkpoint_roundtrip(tmp_path, vlm, vocab):
    path = tmp_path / "enc.dpv"
    vlm.save(path, vocab, {"config_hash": "abc"})
    assert path.read_bytes()[:4] == b"DPV1"
    vlm2, vocab2, meta = MiniVLM.load(path)
    assert meta["config_hash"] == "abc"
    assert torch.equal(vocab2.class_embeddings, vocab.class_embeddings)
    for n, t in vlm.params.items():
        assert torch.equal(vlm2.params[n], t)
    x = torch.randn(3, 16, generator=generator_for(5), dtype=DTYPE)
    assert torch.equal(vlm2.encode_image(x), vlm.encode_image(x))


def test_alignment_is_deterministic_and_leaves_input_untouched(vlm, vocab):
    proto = torch.randn(5, 16, generator=generator_for(6), dtype=DTYPE) * 5
    before = vlm.params["img.w2"].clone()
    a = align_image_encoder(vlm, vocab, proto, 1.0, n_per_class=20)
    b = align_image_encoder(vlm, vocab, proto, 1.0, n_per_class=20)
    assert torch.equal(vlm.params["img.w2"], before)
    assert torch.equal(a.params["img.w2"], b.params["img.w2"])
    assert a.params.trainable() == []
    # the text side is shared, only the image head moves
    assert torch.equal(a.params["txt.proj"], vlm.params["txt.proj"])


def test_alignment_enables_zero_shot(vlm, vocab):
    proto = torch.randn(5, 16, generator=generator_for(7), dtype=DTYPE)
    proto = 7.0 * proto / proto.norm(dim=1, keepdim=True)
    al = align_image_encoder(vlm, vocab, proto, 1.0)
    y = torch.arange(5).repeat_interleave(40)
    x = proto[y] + torch.randn(200, 16, generator=generator_for(8), dtype=DTYPE)
    t = al.encode_text(vocab.positive_template, vocab.positive_template, vocab.class_embeddings)
    acc = float(((al.encode_image(x) @ t.T).argmax(1) == y).to(DTYPE).mean())
    assert acc > 0.8


def test_alignment_config_validation():
    with pytest.raises(InvalidParameter):
        AlignmentConfig(ridge=0)
    with pytest.raises(InvalidParameter):
        AlignmentConfig(negation=-1)
    with pytest.raises(InvalidParameter):
        EncoderConfig(pool="max")
