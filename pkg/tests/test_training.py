import json
import warnings

import numpy as np
import pytest
import torch

from panelcap import tensor_core as tc
from panelcap.captioner import caption_ce_loss, sample_decode, sequence_logprob
from panelcap.datagen import in_memory_split
from panelcap.pipeline import ModelConfig, PanelCapModel, gt_structured, images_tensor
from panelcap.training import (StageConfig, StageOrderError, batch_det_loss, check_prerequisites, clone_model,
                               init_state, load_model, load_stage_start, run_stage, save_stage, scst_loss,
                               stage_loss, teacher_force_hidden)

TINY = ModelConfig(d=16, n_heads=2, n_queries=8, caption_layers=1, decoder_layers=1)


@pytest.fixture(scope="module")
def records():
    return in_memory_split(12, 123, split="train")


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return PanelCapModel(config=TINY)


def params(model, component):
    return {k: v.detach().clone() for k, v in model.component_parameters(component).items()}


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


# -- SCST ------------------------------------------------------------------------

def test_scst_arithmetic_and_zero_advantage():
    assert scst_loss([-2.0, -3.0], 0.8, 0.5) == pytest.approx(1.5)
    assert scst_loss([], 1.0, 0.0) == 0.0
    lp = torch.tensor([-2.0, -3.0], requires_grad=True)
    loss = scst_loss(lp, 0.4, 0.4)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(lp.grad, torch.zeros(2))


def test_positive_advantage_step_raises_sample_likelihood():
    model = tiny_model(1)
    images = torch.rand(2, 128, 128)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        samples = sample_decode(model.captioner, model.vision(images), 0.8, 0.7, gen, 20)
    toks = [s.tokens for s in samples]

    def total_logp():
        return sequence_logprob(model.captioner, model.vision(images), toks, 0.8, 0.7).sum()

    before = total_logp().item()
    loss = scst_loss(total_logp(), 1.0, 0.2)
    model.zero_grad()
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p -= 1e-3 * p.grad
    assert total_logp().item() > before


def test_scst_gradient_unbiased_under_constant_reward():
    """E[grad log q] = 0, so a constant reward must give mean gradient ~ 0."""
    model = tiny_model(2)
    images = torch.rand(4, 128, 128)
    gen = torch.Generator().manual_seed(1)
    plist = [p for p in model.captioner.parameters()]
    dirs = torch.Generator().manual_seed(2)
    probes = [[torch.randn(p.shape, generator=dirs) for p in plist] for _ in range(3)]
    with torch.no_grad():
        feats = model.vision(images)
    vals = []
    for _ in range(200):
        with torch.no_grad():
            s = sample_decode(model.captioner, feats, 0.8, 0.7, gen, 12)
        lp = sequence_logprob(model.captioner, feats, [g.tokens for g in s], 0.8, 0.7)
        loss = scst_loss(lp, 1.0, 0.0) / len(s)  # advantage 1 for every sample
        grads = torch.autograd.grad(loss, plist, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, plist)]
        vals.append([float(sum((g * d).sum() for g, d in zip(grads, probe))) for probe in probes])
    vals = np.array(vals)
    mean, se = vals.mean(0), vals.std(0, ddof=1) / np.sqrt(len(vals))
    assert np.all(np.abs(mean) <= 3 * se), (mean, se)
    assert np.all(se > 0)


# -- stage semantics ------------------------------------------------------------------

def test_stage1_freezes_detector_and_fusion(records):
    model = tiny_model()
    det, fus, cap = params(model, "detector"), params(model, "fusion"), params(model, "captioner")
    run_stage(StageConfig(1, steps=3, batch_size=4, warmup=0), model, records)
    assert same(det, params(model, "detector")) and same(fus, params(model, "fusion"))
    assert not same(cap, params(model, "captioner"))


def test_stage2_freezes_captioner(records):
    model = tiny_model()
    cap, det = params(model, "captioner"), params(model, "detector")
    run_stage(StageConfig(2, steps=3, batch_size=4, warmup=0), model, records)
    assert same(cap, params(model, "captioner"))
    assert not same(det, params(model, "detector"))


def test_stage4_without_rl_equals_stage3_bitwise(records):
    a, b = tiny_model(5), tiny_model(5)
    sa = run_stage(StageConfig(3, steps=3, batch_size=4), a, records)
    sb = run_stage(StageConfig(4, steps=3, batch_size=4, lambda_rl=0.0), b, records)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb), ka
    assert [h["loss"] for h in sa.history] == [h["loss"] for h in sb.history]


def test_stage3_objective_is_weighted_sum(records):
    model = tiny_model(6)
    batch = records[:3]
    state = init_state(model, StageConfig(3))
    loss, terms = stage_loss(StageConfig(3, lambda_cap=0.2, lambda_det=1.0), state, batch)
    images = images_tensor(batch)
    logits, tgt, ifaces = model.teacher_forced(images, [gt_structured(r) for r in batch])
    l_cap = caption_ce_loss(logits, tgt)
    l_det, _ = batch_det_loss(model, images, ifaces, batch)
    assert loss.item() == pytest.approx(0.2 * l_cap.item() + 1.0 * l_det.item(), rel=1e-6)
    assert terms["l_cap"] == pytest.approx(l_cap.item(), rel=1e-6)


def test_stage4_runs_rl_and_logs(records, tmp_path):
    model = tiny_model(7)
    log = tmp_path / "m.jsonl"
    st = run_stage(StageConfig(4, steps=2, batch_size=3), model, records, log_path=log)
    rows = [json.loads(l) for l in log.read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2]
    assert {"l_cap", "l_det", "l_rl", "reward_sample", "reward_greedy", "loss"} <= set(rows[0])
    assert st.step == 2


def test_training_is_deterministic(records):
    a = run_stage(StageConfig(3, steps=3, batch_size=4), tiny_model(8), records)
    b = run_stage(StageConfig(3, steps=3, batch_size=4), tiny_model(8), records)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]


def test_gradient_accumulation_averages_micro_batches(records):
    a = run_stage(StageConfig(1, steps=2, batch_size=4, grad_accum=2), tiny_model(9), records)
    assert len(a.history) == 2 and np.isfinite(a.history[-1]["loss"])


def test_teacher_forced_interface_always_has_det(records):
    model = tiny_model()
    feats = teacher_force_hidden(model, images_tensor(records[:4]), records[:4])
    for (h_det, h_cap), rec in zip(feats, records[:4]):
        n_words = sum(1 + len(p["caption"].split()) for p in rec.panels)  # label + words per line
        assert h_det.shape == (1, TINY.d) and h_cap.shape == (n_words, TINY.d)
        assert h_det.abs().sum().item() > 0


# -- config and checkpoints -------------------------------------------------------------

def test_stage_config_keys():
    cfg = StageConfig.from_mapping(4, {"lambda-text-ce": 0.3, "rl-w-clip": 0.0, "top-p": 0.9, "seed": 7})
    assert (cfg.lambda_cap, cfg.beta, cfg.top_p, cfg.seed) == (0.3, 0.0, 0.9, 7)
    assert cfg.freeze == frozenset()
    assert StageConfig(1).freeze == {"detector", "fusion"} and StageConfig(2).freeze == {"captioner"}
    with pytest.warns(UserWarning, match="lora-rank"):
        StageConfig.from_mapping(1, {"lora-rank": 16})
    with pytest.raises(KeyError):
        StageConfig.from_mapping(1, {"lambda-bogus": 1})
    with pytest.raises(ValueError):
        StageConfig(5)
    with pytest.raises(ValueError):
        StageConfig(3, lambda_det=-1)
    defaults = StageConfig(4)
    assert (defaults.lambda_cap, defaults.lambda_det, defaults.lambda_rl) == (0.2, 1.0, 1.0)
    assert (defaults.alpha, defaults.beta, defaults.top_p, defaults.temperature) == (1.0, 0.5, 0.8, 0.7)
    assert defaults.seed == 42 and defaults.max_new_tokens_rl == 8192
    assert StageConfig(1).digest() != StageConfig(1, lr=0.1).digest()


def test_stage_order_enforced(tmp_path):
    check_prerequisites(tmp_path, 1)
    for stage in (2, 3, 4):
        with pytest.raises(StageOrderError, match="stage"):
            check_prerequisites(tmp_path, stage)


def test_checkpoint_roundtrip_and_stage_chain(records, tmp_path):
    model = tiny_model(10)
    cfg1 = StageConfig(1, steps=2, batch_size=4)
    st = run_stage(cfg1, model, records)
    path = save_stage(tmp_path, cfg1, st)
    back = load_model(path)
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    raw = tc.load_checkpoint(path)
    moments = [k for k in raw if k.startswith("optim/")]
    assert moments and all(k.endswith(("exp_avg", "exp_avg_sq")) for k in moments)
    name = next(n for n, p in model.named_parameters() if p.requires_grad)
    exp_avg = st.optimizer.state[dict(model.named_parameters())[name]]["exp_avg"]
    assert np.array_equal(raw[f"optim/{name}/exp_avg"], exp_avg.numpy())
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["1"]["config_hash"] == cfg1.digest()

    with pytest.raises(StageOrderError):
        load_stage_start(tmp_path, 3)
    m2 = load_stage_start(tmp_path, 2)
    cfg2 = StageConfig(2, steps=2, batch_size=4)
    save_stage(tmp_path, cfg2, run_stage(cfg2, m2, records))
    m3 = load_stage_start(tmp_path, 3)
    assert same(params(m3, "captioner"), params(model, "captioner"))
    assert same(params(m3, "detector"), params(m2, "detector"))


def test_clone_is_independent():
    m = tiny_model()
    c = clone_model(m)
    with torch.no_grad():
        next(c.parameters()).add_(1.0)
    assert not torch.equal(next(c.parameters()), next(m.parameters()))
