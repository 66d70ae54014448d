import torch

from vilaco.config import ReasoningConfig
from vilaco.reasoning import (ForgeryAwareAggregator, ReasoningModule,
                              SoftAttentionPool, TextGuidedAttention)


def test_cross_attention_shapes_and_residual():
    attn = TextGuidedAttention(8, heads=2)
    visual = torch.randn(2, 16, 8)
    text = torch.randn(2, 8)
    out = attn(visual, text)
    assert out.shape == (2, 16, 8)
    with torch.no_grad():
        attn.out_proj.weight.zero_()
        attn.out_proj.bias.zero_()
    assert torch.equal(attn(visual, text), visual)


def test_soft_pool_uniform_at_init():
    pool = SoftAttentionPool(8)
    feats = torch.randn(3, 16, 8)
    pooled = pool(feats)
    # zero score vector -> uniform attention -> plain mean
    assert torch.allclose(pooled, feats.mean(1), atol=1e-6)


def test_soft_pool_weights_sum_to_one():
    pool = SoftAttentionPool(8)
    with torch.no_grad():
        pool.score.copy_(torch.randn(8))
    feats = torch.randn(3, 16, 8)
    w = pool.attention_weights(feats)
    assert w.shape == (3, 16)
    assert torch.allclose(w.sum(-1), torch.ones(3), atol=1e-6)


def test_soft_pool_concentrates_on_dominant_feature():
    pool = SoftAttentionPool(4)
    with torch.no_grad():
        pool.score.copy_(torch.tensor([10.0, 0, 0, 0]))
    feats = torch.zeros(1, 3, 4)
    feats[0, 1, 0] = 5.0  # token 1 scores far above the rest
    w = pool.attention_weights(feats).detach()
    assert float(w[0, 1]) > 0.99


def test_aggregator_shapes():
    agg = ForgeryAwareAggregator(8, ffn_mult=2)
    ctx = torch.randn(3, 8)
    text = torch.randn(2, 8)
    out = agg(ctx, text)
    assert out.shape == (3, 2, 8)


def test_reasoning_module_end_to_end():
    module = ReasoningModule(8, ReasoningConfig(heads=2, ffn_mult=2))
    visual = torch.randn(2, 16, 8)
    text = torch.randn(2, 8)
    enhanced, tamper = module(visual, text)
    assert enhanced.shape == (2, 16, 8)
    assert tamper.shape == (2, 2, 8)
    enhanced.sum().backward()
    grads = [p.grad for p in module.parameters() if p.grad is not None]
    assert grads
