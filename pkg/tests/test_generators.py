import dataclasses

import numpy as np
import pytest
import torch

from dpspg.errors import ContaminationError, InvalidParameter, InvalidShape, InvalidState
from dpspg.generators import (
    N_LAYERS,
    GeneratorModel,
    Stage2Config,
    generator_loss,
    history_csv,
    label_targets,
    load_generator,
    save_generator,
    train_generators,
)
from dpspg.numkernel import DTYPE, generator_for, grad_check
from dpspg.pipeline import source_indices, train_lodo


def _emb(n, d=16, seed=0):
    e = torch.randn(n, d, generator=generator_for(seed), dtype=DTYPE)
    return e / e.norm(dim=1, keepdim=True)


def test_generator_loss_examples():
    z = torch.zeros(4, 8, dtype=DTYPE)
    a = torch.randn(4, 8, generator=generator_for(1), dtype=DTYPE)
    assert float(generator_loss(a, a, a, a, 0.2)) == 0.0
    # pos MSE 0.5, neg MSE 1.0
    pos = torch.full((4, 8), 0.5 ** 0.5, dtype=DTYPE)
    neg = torch.ones(4, 8, dtype=DTYPE)
    assert abs(float(generator_loss(pos, neg, z, z, 0.2)) - 0.7) < 1e-12
    assert abs(float(generator_loss(pos, neg, z, z, 0.0)) - 0.5) < 1e-12
    with pytest.raises(InvalidShape):
        generator_loss(pos, neg, z[:3], z, 0.2)


def test_generator_loss_domain_averaging():
    # domain 0 has 3 samples with error 1, domain 1 one sample with error 3
    pred = torch.tensor([[[1.0]], [[1.0]], [[1.0]], [[3.0]]], dtype=DTYPE)
    zero = torch.zeros_like(pred)
    loss = generator_loss(pred, None, zero, None, 0.0, domains=[0, 0, 0, 1])
    assert abs(float(loss) - (1 + 9) / 2) < 1e-12


def test_generate_prompt_shape_and_determinism():
    G = GeneratorModel("positive", 4, 8, 16, n_heads=2, d_ff=8, seed=3)
    e = _emb(5)
    with torch.no_grad():
        out = G(e)
        assert out.shape == (5, 4, 8)
        assert G(e[0]).shape == (4, 8)
        assert torch.equal(out, G(e))
        assert float((G(e[2]) - out[2]).abs().max()) < 1e-12
    assert sum(n.endswith("attn.wq") for n in G.params) == N_LAYERS
    with pytest.raises(InvalidShape):
        G(_emb(2, d=15))


def test_generate_prompt_gradient():
    G = GeneratorModel("negative", 4, 8, 16, n_heads=2, d_ff=8, seed=4)
    e = _emb(3, seed=2)
    assert grad_check(lambda p: (G(e) ** 2).sum(), G.params, n_coords=96) <= 1e-4


def test_noise_only_with_generator():
    G = GeneratorModel("positive", 4, 8, 16, n_heads=2, d_ff=8, seed=3, input_noise=1.0)
    e = _emb(2)
    assert torch.equal(G(e), G(e))
    assert not torch.equal(G(e), G(e, generator_for(0)))
    assert torch.equal(G(e, generator_for(0)), G(e, generator_for(0)))


def test_config_validation():
    with pytest.raises(InvalidParameter):
        Stage2Config(alpha_loss=-0.1)
    with pytest.raises(InvalidParameter):
        Stage2Config(warmup_epochs=50)
    with pytest.raises(InvalidParameter):
        GeneratorModel("neutral", 4, 8, 16)


def test_training_improves_and_is_deterministic(small_world, small_cfg, small_labels, small_pair):
    h = small_pair.history
    assert h["loss"][-1] < h["loss"][0]
    assert h["val_metric"][-1] < h["val_metric"][0]
    assert small_pair.provenance == (0, 1)
    assert len(h["eval_acc"]) == small_cfg.stage2.epochs
    again = train_lodo(small_world, small_cfg, small_labels, target=2, seed=0, variant="dual", track=False)
    for n, t in small_pair.g_pos.params.items():
        assert torch.equal(again.g_pos.params[n], t)
    for n, t in small_pair.g_neg.params.items():
        assert torch.equal(again.g_neg.params[n], t)


def test_generated_prompts_nearer_own_domain_label(default_world, default_labels, default_pair):
    w = default_world
    src = np.array([1, 2, 3])
    idx = source_indices(w.ds, 0, "val")
    with torch.no_grad():
        P = default_pair.g_pos(w.emb[idx]).reshape(len(idx), -1)
    L = torch.stack([default_labels[d].positive.reshape(-1) for d in src])
    assign = torch.cdist(P, L).argmin(1).numpy()
    assert (src[assign] == w.ds.domains[idx]).mean() >= 0.8


def test_default_training_reduces_loss_tenfold(default_pair):
    loss = default_pair.history["loss"]
    assert loss[0] / loss[-1] >= 10


def test_generated_prompts_closer_to_labels_than_at_init(default_world, default_labels, default_pair):
    w = default_world
    idx = source_indices(w.ds, 0, "val")
    L = torch.stack([default_labels[int(d)].positive for d in w.ds.domains[idx]])
    init = GeneratorModel("positive", 4, 32, 64, seed=default_pair.g_pos.seed)
    with torch.no_grad():
        after = float(((default_pair.g_pos(w.emb[idx]) - L) ** 2).sum((1, 2)).mean())
        before = float(((init(w.emb[idx]) - L) ** 2).sum((1, 2)).mean())
    assert after < before


def test_missing_label_pair_is_invalid_state(small_world, small_labels):
    w = small_world
    idx = source_indices(w.ds, 2, "train")
    with pytest.raises(InvalidState):
        train_generators(w.emb[idx], w.ds.domains[idx], w.emb[idx], w.ds.domains[idx],
                         {0: small_labels[0]}, Stage2Config(epochs=2, warmup_epochs=0))


def test_oracle_labels_rejected(small_world, small_labels):
    w = small_world
    idx = w.ds.indices(0, "train")
    tainted = dataclasses.replace(small_labels[0], oracle=True)
    with pytest.raises(ContaminationError):
        train_generators(w.emb[idx], w.ds.domains[idx], w.emb[idx], w.ds.domains[idx], {0: tainted},
                         Stage2Config(epochs=2, warmup_epochs=0))


def test_label_targets_follow_domains(small_labels):
    pos, neg = label_targets(small_labels, [1, 0, 1])
    assert torch.equal(pos[0], small_labels[1].positive)
    assert torch.equal(neg[1], small_labels[0].negative)


def test_checkpoint_roundtrip(tmp_path, small_pair):
    path = tmp_path / "g.dpg"
    save_generator(path, small_pair.g_neg, {"provenance": [0, 1]})
    assert path.read_bytes()[:4] == b"DPG1"
    G, meta = load_generator(path)
    assert G.polarity == "negative" and meta["provenance"] == [0, 1]
    e = _emb(3, d=G.d_feat)
    with torch.no_grad():
        assert torch.equal(G(e), small_pair.g_neg(e))


def test_history_csv(small_pair):
    lines = history_csv(small_pair.history).splitlines()
    assert lines[0] == "epoch,loss,val_metric,eval_acc"
    assert len(lines) == 1 + len(small_pair.history["loss"])
