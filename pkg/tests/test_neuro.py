import copy
import math

import numpy as np
import pytest
import torch
from torch import nn

from mintent import mintrvae
from mintent.intentnet import ClassifierConfig, IntentClassifier
from mintent.neuro import (
    GRU,
    LSTM,
    Adam,
    AdamState,
    GRUCell,
    Linear,
    LSTMCell,
    MultiHeadSelfAttention,
    NumericalError,
    PositionalEmbedding,
    SequenceBatchNorm,
    TransformerBlock,
    adam_step,
    bce,
    bce_with_logits,
    check_finite,
    cross_entropy,
    gaussian_kl,
    huber,
    kl_div,
    load_module_arrays,
    module_arrays,
    mse,
    named_decay_flags,
    numerical_gradient,
    relative_error,
)

N_CONFIGS = 20
GRAD_TOL = 1e-3


def _zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


# forward identities ------------------------------------------------------------


def test_softmax_of_equal_logits():
    np.testing.assert_allclose(torch.softmax(torch.zeros(7), -1).numpy(), np.full(7, 1 / 7), atol=1e-7)


def test_sigmoid_at_zero():
    assert torch.sigmoid(torch.tensor(0.0)).item() == 0.5


def test_gru_zero_params_halves_hidden():
    cell = _zero_(GRUCell(3, 4))
    h = torch.randn(2, 4)
    torch.testing.assert_close(cell(torch.randn(2, 3), h), 0.5 * h)
    assert torch.all(cell(torch.zeros(1, 3), torch.zeros(1, 4)) == 0)


def test_gru_gate_convention_matches_scalar_reference():
    torch.manual_seed(0)
    cell = GRUCell(2, 3).double()
    x, h = torch.randn(2, dtype=torch.float64), torch.randn(3, dtype=torch.float64)
    Wz, Wr = cell.weight_zr[:3], cell.weight_zr[3:]
    bz, br = cell.bias_zr[:3], cell.bias_zr[3:]
    xh = torch.cat([x, h])
    z = torch.sigmoid(Wz @ xh + bz)
    r = torch.sigmoid(Wr @ xh + br)
    n = torch.tanh(cell.weight_h @ torch.cat([x, r * h]) + cell.bias_h)
    torch.testing.assert_close(cell(x, h), (1 - z) * h + z * n)


def test_lstm_zero_params():
    cell = _zero_(LSTMCell(3, 4))
    h, c = torch.randn(2, 4), torch.randn(2, 4)
    h2, c2 = cell(torch.randn(2, 3), h, c)
    torch.testing.assert_close(c2, 0.5 * c)
    torch.testing.assert_close(h2, 0.5 * torch.tanh(0.5 * c))
    h0, c0 = cell(torch.zeros(1, 3), torch.zeros(1, 4), torch.zeros(1, 4))
    assert torch.all(h0 == 0) and torch.all(c0 == 0)


def test_attention_over_single_position():
    attn = MultiHeadSelfAttention(8, 4, dropout=0.0)
    _, w = attn(torch.randn(3, 1, 8), return_weights=True)
    assert torch.all(w == 1.0)


def test_block_with_zero_output_projections_is_identity():
    block = TransformerBlock(8, 4, dropout=0.0)
    for lin in (block.attn.out, block.mlp_out):
        _zero_(lin)
    x = torch.randn(2, 5, 8)
    torch.testing.assert_close(block(x), x)


def test_head_count_must_divide_width():
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(10, 4)


def test_positional_table_length_enforced():
    pos = PositionalEmbedding(15, 4)
    assert torch.all(pos(torch.zeros(1, 15, 4)) == 0)
    with pytest.raises(ValueError, match="exceeds"):
        pos(torch.zeros(1, 16, 4))


def test_dropout_identity_in_eval():
    drop = nn.Dropout(0.1).eval()
    x = torch.randn(10, 10)
    assert torch.equal(drop(x), x)


def test_batchnorm_normalises_batch():
    bn = SequenceBatchNorm(3)
    x = 5 + 2 * torch.randn(4000, 3, dtype=torch.float64).float()
    y = bn(x)
    torch.testing.assert_close(y.mean(0), torch.zeros(3), atol=1e-5, rtol=0)
    torch.testing.assert_close(y.var(0, unbiased=False), torch.ones(3), atol=1e-3, rtol=0)


def test_batchnorm_needs_two_samples_in_train_mode():
    bn = SequenceBatchNorm(3)
    with pytest.raises(ValueError):
        bn(torch.randn(1, 1, 3))
    bn.eval()
    assert bn(torch.randn(1, 1, 3)).shape == (1, 1, 3)


def test_batchnorm_running_stats_follow_momentum_recursion():
    torch.manual_seed(1)
    bn = SequenceBatchNorm(2, momentum=0.1)
    mean, var = np.zeros(2), np.ones(2)
    for _ in range(7):
        x = torch.randn(3, 5, 2, dtype=torch.float64).float()
        bn(x)
        flat = x.reshape(-1, 2).double().numpy()
        mean = 0.9 * mean + 0.1 * flat.mean(0)
        var = 0.9 * var + 0.1 * flat.var(0, ddof=1)
    np.testing.assert_allclose(bn.bn.running_mean.numpy(), mean, rtol=1e-5)
    np.testing.assert_allclose(bn.bn.running_var.numpy(), var, rtol=1e-5)


def test_sequence_batchnorm_flattens_batch_and_time():
    bn = SequenceBatchNorm(4)
    x = torch.randn(3, 6, 4)
    ref = nn.BatchNorm1d(4)(x.reshape(-1, 4)).reshape(3, 6, 4)
    torch.testing.assert_close(bn(x), ref)


# losses ------------------------------------------------------------------------


def test_huber_branches():
    assert huber(torch.tensor([0.3, 0.4])).item() == pytest.approx(0.125)
    assert huber(torch.tensor([2.0, 0.0])).item() == pytest.approx(1.5)


def test_kl_identity_and_nonnegativity():
    p = torch.softmax(torch.randn(20, 7), -1)
    assert kl_div(p, p).item() == pytest.approx(0.0, abs=1e-6)
    q = torch.softmax(torch.randn(20, 7), -1)
    assert kl_div(p, q).item() >= 0


def test_bce_at_half():
    assert bce(torch.tensor(0.5), torch.tensor(1.0)).item() == pytest.approx(math.log(2))


def test_bce_clamps_saturated_probabilities():
    assert math.isfinite(bce(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0])).item())


def test_bce_with_logits_matches_bce():
    z = torch.randn(50, dtype=torch.float64)
    y = (torch.rand(50) > 0.5).double()
    torch.testing.assert_close(bce_with_logits(z, y), bce(torch.sigmoid(z), y))


def test_cross_entropy_matches_log_softmax():
    logits = torch.randn(6, 4)
    target = torch.tensor([0, 1, 2, 3, 0, 1])
    ref = -torch.log_softmax(logits, -1)[torch.arange(6), target].mean()
    torch.testing.assert_close(cross_entropy(logits, target), ref)


def test_gaussian_kl_at_prior_is_zero():
    assert torch.all(gaussian_kl(torch.zeros(32), torch.ones(32)) == 0)


def test_check_finite_trips():
    with pytest.raises(NumericalError, match="logits"):
        check_finite(torch.tensor([1.0, float("nan")]), "logits")


# optimizer -------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = torch.tensor([1.0], dtype=torch.float64)
    adam_step([p], [torch.tensor([1.0], dtype=torch.float64)], AdamState(weight_decay=0.0))
    assert p.item() == pytest.approx(1.0 - 1e-3, abs=1e-9)


def test_adam_zero_gradient_is_fixed_point():
    p = torch.tensor([0.7, -0.2])
    adam_step([p], [torch.zeros(2)], AdamState(weight_decay=0.0))
    assert torch.equal(p, torch.tensor([0.7, -0.2]))


def test_adam_matches_scalar_reference_over_100_steps():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=100)
    lr, b1, b2, eps, wd = 1e-3, 0.9, 0.999, 1e-8, 1e-2
    p = torch.tensor([0.5], dtype=torch.float64)
    state = AdamState(lr, b1, b2, eps, wd)
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        adam_step([p], [torch.tensor([g], dtype=torch.float64)], state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x * (1 - lr * wd)
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p.item() == pytest.approx(x, abs=1e-12)


def test_decay_skips_biases_and_norm_scales():
    model = nn.Sequential(Linear(3, 4), nn.LayerNorm(4), GRUCell(4, 2))
    flags = {name: exempt for name, _, exempt in named_decay_flags(model)}
    assert flags["0.weight"] is False and flags["0.bias"] is True
    assert flags["1.weight"] is True and flags["1.bias"] is True
    assert flags["2.weight_zr"] is False and flags["2.bias_h"] is True


def test_decoupled_decay_does_not_touch_exempt_parameters():
    model = Linear(2, 2)
    before = model.bias.detach().clone()
    opt = Adam(model, lr=0.1, weight_decay=0.5)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    w = model.weight.detach().clone()
    opt.step()
    assert torch.equal(model.bias, before)
    torch.testing.assert_close(model.weight, w * (1 - 0.1 * 0.5))


def test_linear_init_bounds():
    torch.manual_seed(0)
    lin = Linear(16, 8)
    assert lin.weight.abs().max() <= 0.25
    assert torch.all(lin.bias == 0)


def test_module_arrays_round_trip():
    torch.manual_seed(0)
    a, b = TransformerBlock(8, 4), TransformerBlock(8, 4)
    load_module_arrays(b, module_arrays(a))
    for (_, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y)
    with pytest.raises(KeyError):
        load_module_arrays(b, {})


# gradient suite ------------------------------------------------------------------


def grad_check(module, inputs, fn, seed, h=1e-3, entries=6):
    """Relative error between float32 autograd gradients and float64 central differences.

    ``fn(module, inputs)`` returns a scalar. Gradients are taken w.r.t. every
    parameter of ``module`` and every input that requires grad; a random
    subset of entries per tensor is checked.
    """
    leaves = [p for p in module.parameters()] + [x for x in inputs if x.requires_grad]
    analytic = torch.autograd.grad(fn(module, inputs), leaves, allow_unused=True)
    shadow = copy.deepcopy(module).double()
    shadow_inputs = [x.detach().double().requires_grad_(x.requires_grad) if x.is_floating_point() else x for x in inputs]
    shadow_leaves = [p for p in shadow.parameters()] + [x for x in shadow_inputs if x.requires_grad]
    rng = np.random.default_rng(seed)
    a_all, n_all = [], []
    with torch.no_grad():
        for g, leaf in zip(analytic, shadow_leaves):
            idx = rng.choice(leaf.numel(), min(entries, leaf.numel()), replace=False)
            num = numerical_gradient(lambda: fn(shadow, shadow_inputs), leaf, h, idx).reshape(-1)[idx]
            g = torch.zeros(leaf.numel()) if g is None else g.reshape(-1)
            a_all.append(g[idx].double())
            n_all.append(num)
    return relative_error(torch.cat(a_all), torch.cat(n_all))


class _Fn(nn.Module):
    """Parameter-free wrapper so losses go through the same checker."""

    def forward(self, *args):
        raise NotImplementedError


def _randn(g, *shape, grad=True):
    return torch.randn(*shape, generator=g).requires_grad_(grad)


def _dims(g, lo, hi, n=1):
    return [int(torch.randint(lo, hi + 1, (1,), generator=g)) for _ in range(n)]


def case_linear(g):
    i, o, b = _dims(g, 1, 9, 3)
    return Linear(i, o), [_randn(g, b, i)], lambda m, x: (m(x[0]) ** 2).sum()


def case_batchnorm(g):
    c, b, t = _dims(g, 1, 6, 3)
    m = SequenceBatchNorm(c)
    with torch.no_grad():
        m.bn.weight.uniform_(0.5, 1.5, generator=g)
        m.bn.bias.normal_(generator=g)
    w = torch.randn(b + 1, t, c, generator=g)
    return m, [_randn(g, b + 1, t, c)], lambda m, x: (m(x[0]) * w.to(x[0].dtype)).sum()


def case_gru_cell(g):
    i, hdim, b = _dims(g, 1, 8, 3)
    return GRUCell(i, hdim), [_randn(g, b, i), _randn(g, b, hdim)], lambda m, x: (m(x[0], x[1]) ** 2).sum()


def case_lstm_cell(g):
    i, hdim, b = _dims(g, 1, 8, 3)
    return LSTMCell(i, hdim), [_randn(g, b, i), _randn(g, b, hdim), _randn(g, b, hdim)], lambda m, x: sum((y**2).sum() for y in m(x[0], x[1], x[2]))


def case_gru(g):
    i, hdim, b, t = _dims(g, 1, 6, 4)
    return GRU(i, hdim), [_randn(g, b, t, i)], lambda m, x: (m(x[0])[0] ** 2).sum()


def case_lstm(g):
    i, hdim, b, t = _dims(g, 1, 6, 4)
    return LSTM(i, hdim), [_randn(g, b, t, i)], lambda m, x: (m(x[0])[0] ** 2).sum()


def case_attention(g):
    heads = _dims(g, 1, 4)[0]
    d = heads * _dims(g, 1, 3)[0]
    b, t = _dims(g, 1, 4, 2)
    return MultiHeadSelfAttention(d, heads, dropout=0.0), [_randn(g, b, t, d)], lambda m, x: (m(x[0]) ** 2).sum()


def case_transformer_block(g):
    heads = _dims(g, 1, 4)[0]
    d = heads * _dims(g, 1, 3)[0]
    b, t = _dims(g, 1, 4, 2)
    m = TransformerBlock(d, heads, dropout=0.0)
    with torch.no_grad():
        for ln in (m.ln1, m.ln2):
            ln.weight.uniform_(0.5, 1.5, generator=g)
            ln.bias.normal_(generator=g)
    return m, [_randn(g, b, t, d)], lambda m, x: (m(x[0]) ** 2).sum()


def case_positional(g):
    t, d = _dims(g, 1, 8, 2)
    m = PositionalEmbedding(t + 2, d)
    with torch.no_grad():
        m.table.normal_(generator=g)
    return m, [_randn(g, 2, t, d)], lambda m, x: (m(x[0]) ** 3).sum()


def case_cross_entropy(g):
    b, c = _dims(g, 1, 8, 2)
    target = torch.randint(0, c + 1, (b,), generator=g)
    return _Fn(), [_randn(g, b, c + 1), target], lambda m, x: cross_entropy(x[0], x[1])


def case_bce(g):
    b = _dims(g, 1, 20)[0]
    p = torch.rand(b, generator=g) * 0.9 + 0.05
    y = (torch.rand(b, generator=g) > 0.5).float()
    return _Fn(), [p.requires_grad_(), y], lambda m, x: bce(x[0], x[1])


def case_bce_with_logits(g):
    b = _dims(g, 1, 20)[0]
    y = (torch.rand(b, generator=g) > 0.5).float()
    w = torch.rand(b, generator=g) + 0.1
    return _Fn(), [_randn(g, b), y, w], lambda m, x: bce_with_logits(x[0], x[1], x[2])


def case_mse(g):
    b, c = _dims(g, 1, 8, 2)
    return _Fn(), [_randn(g, b, c), _randn(g, b, c)], lambda m, x: mse(x[0], x[1])


def case_huber(g):
    b, k = _dims(g, 1, 10, 2)
    r = torch.randn(b, k, generator=g) * 1.5
    norm = r.norm(dim=-1, keepdim=True)
    r = torch.where((norm - 1).abs() < 0.05, r * 1.2, r)  # keep clear of the branch point
    return _Fn(), [r.requires_grad_()], lambda m, x: huber(x[0]).sum()


def case_kl_div(g):
    b = _dims(g, 1, 8)[0]
    p = torch.softmax(torch.randn(b, 7, generator=g), -1)
    return _Fn(), [p, _randn(g, b, 7)], lambda m, x: kl_div(x[0], torch.softmax(x[1], -1))


def case_gaussian_kl(g):
    d = _dims(g, 1, 32)[0]
    sigma = (torch.rand(d, generator=g) + 0.3).requires_grad_()
    return _Fn(), [_randn(g, d), sigma], lambda m, x: gaussian_kl(x[0], x[1]).sum()


def case_pose_loss(g):
    b, s = _dims(g, 1, 4, 2)
    target = torch.randn(b, s, 51, generator=g)
    target[..., 2::3] = torch.rand(b, s, 17, generator=g)
    return _Fn(), [_randn(g, b, s, 51) * 0.5, target], lambda m, x: mintrvae.pose_loss(x[0], x[1])


def case_emotion_loss(g):
    b, s = _dims(g, 1, 4, 2)
    target = torch.softmax(torch.randn(b, s, 7, generator=g), -1)
    return _Fn(), [_randn(g, b, s, 7), target], lambda m, x: mintrvae.emotion_loss(torch.softmax(x[0], -1), x[1])


def case_intent_loss(g):
    b = _dims(g, 1, 20)[0]
    y = (torch.rand(b, generator=g) > 0.5).float()
    return _Fn(), [_randn(g, b), y], lambda m, x: mintrvae.intent_loss(torch.sigmoid(x[0]), x[1])


def case_kl_regularizer(g):
    b, d = _dims(g, 1, 6, 2)
    mu = torch.randn(b, d, generator=g) * 1.5
    sigma = torch.rand(b, d, generator=g) + 0.4
    kl = gaussian_kl(mu, sigma).mean(0)
    near = (kl - 0.1).abs() < 0.02
    mu[:, near] += 1.0  # keep clear of the free-bits floor
    return _Fn(), [mu.requires_grad_(), sigma.requires_grad_()], lambda m, x: mintrvae.kl_regularizer(x[0], x[1], 0.1)


def case_rvae_objective(g):
    hidden = _dims(g, 4, 10, 4)
    cfg = mintrvae.RVAEConfig(
        encoder_mlp=(hidden[0], hidden[1]), latent_dim=hidden[2], encoder_hidden=hidden[3], decoder_hidden=hidden[3], dropout=0.0
    )
    model = mintrvae.MintRVAE(cfg)
    b, t = _dims(g, 2, 4)[0], _dims(g, 3, 6)[0]
    x = torch.randn(b, t, 59, generator=g)
    x[..., 2:51:3] = torch.rand(b, t, 17, generator=g)
    x[..., 51:58] = torch.softmax(x[..., 51:58], -1)
    x[..., 58] = (torch.rand(b, t, generator=g) > 0.5).float()
    eps = torch.randn(b, cfg.latent_dim, generator=g)
    truth = torch.ones(b, t - 2, dtype=torch.bool)
    epoch = float(torch.randint(0, 6000, (1,), generator=g))

    def fn(m, inp):
        rec = m.reconstruct(inp[0], eps=inp[1].to(inp[0].dtype), use_truth=truth)
        return mintrvae.total_loss(mintrvae.loss_components(rec, inp[0], cfg), epoch, cfg)

    return model, [x, eps], fn


def case_classifier(g):
    backbone = ("gru", "lstm", "transformer")[int(torch.randint(0, 3, (1,), generator=g))]
    feature_set = ("pose_only", "emotion_only", "fused")[int(torch.randint(0, 3, (1,), generator=g))]
    cfg = ClassifierConfig(backbone=backbone, feature_set=feature_set, hidden=8, window=5, dropout=0.0)
    model = IntentClassifier(cfg)
    with torch.no_grad():
        if backbone == "transformer":
            model.pos.table.normal_(generator=g)
    y = (torch.rand(2, 5, generator=g) > 0.5).float()
    return model, [_randn(g, 2, 5, cfg.input_dim), y], lambda m, x: bce_with_logits(m(x[0]), x[1])


SMOOTH_CASES = {
    "linear": case_linear,
    "batchnorm": case_batchnorm,
    "gru_cell": case_gru_cell,
    "lstm_cell": case_lstm_cell,
    "gru": case_gru,
    "lstm": case_lstm,
    "attention": case_attention,
    "positional": case_positional,
    "cross_entropy": case_cross_entropy,
    "bce": case_bce,
    "bce_with_logits": case_bce_with_logits,
    "mse": case_mse,
    "huber": case_huber,
    "kl_div": case_kl_div,
    "gaussian_kl": case_gaussian_kl,
    "pose_loss": case_pose_loss,
    "emotion_loss": case_emotion_loss,
    "intent_loss": case_intent_loss,
    "kl_regularizer": case_kl_regularizer,
}
# ReLU kinks: a smaller step keeps the difference quotient on one side of them
PIECEWISE_CASES = {
    "transformer_block": case_transformer_block,
    "rvae_objective": case_rvae_objective,
    "classifier": case_classifier,
}


@pytest.mark.parametrize("seed", range(N_CONFIGS))
@pytest.mark.parametrize("name", sorted(SMOOTH_CASES))
def test_gradient_smooth(name, seed):
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(1000 + seed)
    module, inputs, fn = SMOOTH_CASES[name](g)
    assert grad_check(module, inputs, fn, seed, h=1e-3) <= GRAD_TOL


@pytest.mark.parametrize("seed", range(N_CONFIGS))
@pytest.mark.parametrize("name", sorted(PIECEWISE_CASES))
def test_gradient_piecewise(name, seed):
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(2000 + seed)
    module, inputs, fn = PIECEWISE_CASES[name](g)
    assert grad_check(module, inputs, fn, seed, h=1e-5) <= GRAD_TOL


def test_free_bits_floor_blocks_gradient():
    mu = torch.zeros(4, 8, requires_grad=True)
    sigma = torch.ones(4, 8, requires_grad=True)
    mintrvae.kl_regularizer(mu, sigma, 0.1).backward()
    assert torch.all(mu.grad == 0) and torch.all(sigma.grad == 0)


def test_total_loss_gradient_is_weighted_sum_of_components():
    torch.manual_seed(0)
    cfg = mintrvae.RVAEConfig(encoder_mlp=(8, 8), latent_dim=4, encoder_hidden=6, decoder_hidden=6, dropout=0.0)
    model = mintrvae.MintRVAE(cfg)
    x = torch.rand(3, 5, 59)
    x[..., 51:58] = torch.softmax(x[..., 51:58], -1)
    eps = torch.randn(3, 4)
    truth = torch.ones(3, 3, dtype=torch.bool)
    params = list(model.parameters())

    def comps():
        rec = model.reconstruct(x, eps=eps, use_truth=truth)
        return mintrvae.loss_components(rec, x, cfg)

    epoch = 1234
    total = torch.autograd.grad(mintrvae.total_loss(comps(), epoch, cfg), params, allow_unused=True)
    weights = [cfg.lambda_pose, cfg.lambda_emotion, cfg.lambda_intent, mintrvae.kl_weight(epoch)]
    parts = []
    for name in ("pose", "emotion", "intent", "kl"):
        parts.append(torch.autograd.grad(getattr(comps(), name), params, allow_unused=True))
    for i, g in enumerate(total):
        expect = sum(w * (p[i] if p[i] is not None else 0) for w, p in zip(weights, parts))
        if g is None:
            continue
        torch.testing.assert_close(g, expect, rtol=1e-4, atol=1e-6)
