import numpy as np
import pytest

import mshed as ms


def tiny_model(seed=0):
    d = ms.ArchDescriptor.hybrid(4, [2])
    d.d_model = 16
    d.d_inner = 24
    d.ssm_state = 4
    d.n_heads = 2
    d.mlp_widths = [0, 0, 32, 0]
    return ms.Model.build(d, seed)


def test_forward_shape_and_determinism():
    m = tiny_model()
    tokens = ms.encode("the mill wheel turns")
    logits = m.forward(tokens)
    assert logits.shape == (len(tokens), 96)
    assert np.array_equal(logits, tiny_model().forward(tokens))


def test_charset_round_trip_and_errors():
    assert ms.decode(ms.encode("Hello, world!\n")) == "Hello, world!\n"
    with pytest.raises(ms.InputError):
        ms.encode("tab\there")


def test_prune_and_compact_agree():
    corpus = ms.Corpus.bundled()
    cal = corpus.calibration_windows(32, 2)
    m = tiny_model(1)
    actions, trace, truncated = ms.prune(m, "mamba_block&mha:2 + mlp_channel:1:16", cal)
    assert len(actions) == 3 and not truncated
    for it in range(3):
        scores = [r["score"] for r in trace if r["iteration"] == it]
        chosen = [r["score"] for r in trace if r["iteration"] == it and r["selected"]]
        assert chosen == [min(scores)]
    assert ms.perplexity(m, cal) == pytest.approx(actions[-1]["score"], rel=1e-6)
    tokens = cal[0]
    assert np.abs(m.forward(tokens) - m.compact().forward(tokens)).max() <= 1e-6
    assert 0 < m.prune_ratio() < 1


def test_removing_twice_is_a_state_error():
    m = tiny_model()
    m.remove("ssm", 0)
    with pytest.raises(ms.StateError):
        m.remove("ssm", 0)


def test_training_lowers_loss_and_checkpoint_round_trips(tmp_path):
    corpus = ms.Corpus.bundled()
    m = tiny_model(2)
    cfg = ms.TrainConfig()
    cfg.steps, cfg.batch_size, cfg.seq_len, cfg.warmup = 30, 2, 24, 2
    losses = ms.train(m, corpus, cfg)
    assert len(losses) == 30
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    path = str(tmp_path / "m.ckpt")
    m.save(path)
    back = ms.Model.load(path)
    tokens = ms.encode("a lighthouse")
    assert np.array_equal(back.forward(tokens), m.forward(tokens))
    assert len(back.generate(tokens, 5)) == 5


def test_cli_pipeline_and_config_errors(tmp_path):
    config = "[model]\nn_blocks = 2\nd_model = 16\nd_inner = 16\nssm_state = 4\n[train]\nsteps = 3\nbatch_size = 1\nseq_len = 16\n"
    log = ms.run("train", config, str(tmp_path))
    assert "validation PPL" in log
    assert (tmp_path / "model.ckpt").exists()
    with pytest.raises(ms.ConfigError):
        ms.run("train", "[train]\nstepz = 1\n", str(tmp_path))
