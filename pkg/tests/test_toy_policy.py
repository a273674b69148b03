import math

import numpy as np
import pytest

from expertfuse.lora import LoraAdapter, default_targets
from expertfuse.tensor_core import NamedTensorMap, SeededRng
from expertfuse.toy_policy import PolicyConfig, PolicyError, ToyTransformer, attach_lora, softmax


def fd_check(f, params, grads, names=None, per_tensor=4, h=1e-5, seed=0):
    """Worst relative error between analytic grads and central differences."""
    r = np.random.default_rng(seed)
    worst = 0.0
    for n in names or list(params):
        flat = params[n].reshape(-1)
        for i in r.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            idx = np.unravel_index(i, params[n].shape)
            x = params[n].copy()
            x[idx] += h
            fp = f(params.replace(**{n: x}))
            x[idx] -= 2 * h
            fm = f(params.replace(**{n: x}))
            fd = (fp - fm) / (2 * h)
            an = grads[n][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


@pytest.fixture(scope="module")
def tiny():
    return ToyTransformer(PolicyConfig(vocab_size=13, max_seq_len=10, d_model=8, n_layers=1, n_heads=2))


def test_init_base(tiny):
    a, b = tiny.init_base(3), tiny.init_base(3)
    assert a.fingerprint == b.fingerprint
    assert list(a) == sorted(PolicyConfig(13, 10, 8, 1, 2).layout())
    for n in a:
        if n.endswith(".gain"):
            assert np.all(a[n] == 1.0)
        if n.endswith(".bias"):
            assert np.all(a[n] == 0.0)
    toks = np.arange(10) % 13
    assert np.all(np.isfinite(tiny.forward(a, toks).logits))


def test_config_validation():
    with pytest.raises(PolicyError):
        PolicyConfig(d_model=30, n_heads=4)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_causality(heads):
    m = ToyTransformer(PolicyConfig(vocab_size=11, max_seq_len=12, d_model=8, n_layers=2, n_heads=heads))
    th = m.init_base(heads)
    toks = np.array([1, 5, 2, 9, 3, 3, 7, 0])
    base = m.forward(th, toks).logits
    for t in range(len(toks)):
        pert = toks.copy()
        pert[t] = (pert[t] + 4) % 11
        out = m.forward(th, pert).logits
        assert np.array_equal(out[:t], base[:t])


def test_shapes_and_normalisation(tiny):
    th = tiny.init_base(0)
    assert tiny.forward(th, [4]).logits.shape == (1, 13)
    p = softmax(tiny.forward(th, [1, 2, 3]).logits)
    assert np.all(np.abs(p.sum(-1) - 1.0) < 1e-6)


def test_input_errors(tiny):
    th = tiny.init_base(0)
    with pytest.raises(PolicyError):
        tiny.forward(th, [13])
    with pytest.raises(PolicyError):
        tiny.forward(th, [0] * 11)


def test_uniform_logits_sequence_logprob(tiny):
    th = tiny.init_base(0)
    zero = NamedTensorMap({n: np.zeros_like(v) for n, v in th.items()})
    total, per = tiny.sequence_logprob(zero, [1, 2], [3, 4, 5])
    assert abs(total - 3 * math.log(1 / 13)) < 1e-12
    assert abs(sum(per) - total) < 1e-9


def test_per_token_logprob_matches_softmax(tiny):
    th = tiny.init_base(4)
    prompt, cont = [1, 2], [7, 3, 0]
    total, per = tiny.sequence_logprob(th, prompt, cont)
    p = softmax(tiny.forward(th, prompt + cont).logits)
    for t, tok in enumerate(cont):
        assert abs(math.exp(per[t]) - p[len(prompt) + t - 1, tok]) < 1e-12
    assert all(x <= 0 for x in per)
    with pytest.raises(PolicyError):
        tiny.sequence_logprob(th, prompt, [])


def test_full_gradient_matches_fd():
    m = ToyTransformer(PolicyConfig(vocab_size=11, max_seq_len=8, d_model=8, n_layers=1, n_heads=2))
    th = m.init_base(1)
    r = np.random.default_rng(0)
    toks = r.integers(0, 11, size=(2, 6))
    R = r.normal(size=(2, 6, 11))

    def f(p):
        return float(np.sum(m.forward(p, toks).logits * R))

    g = m.backward(m.forward(th, toks, cache=True), R)
    assert set(g) == set(th)
    assert fd_check(f, th, g) < 1e-4


def test_zero_upstream_gives_zero_grads(tiny):
    th = tiny.init_base(2)
    tr = tiny.forward(th, [1, 2, 3], cache=True)
    g = tiny.backward(tr, np.zeros_like(tr.logits))
    assert all(not np.any(v) for v in g.values())


def test_backward_requires_cache(tiny):
    th = tiny.init_base(2)
    tr = tiny.forward(th, [1, 2, 3])
    with pytest.raises(PolicyError):
        tiny.backward(tr, np.ones_like(tr.logits))


def test_lora_zero_init_is_bitwise_noop(tiny):
    th = tiny.init_base(5)
    ad = LoraAdapter.init(th, 2, 4.0, SeededRng(1))
    toks = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    assert tiny.forward(attach_lora(th, ad), toks).logits.tobytes() == tiny.forward(th, toks).logits.tobytes()


def test_lora_gradients_only_adapter_and_match_fd(tiny):
    th = tiny.init_base(5)
    r = np.random.default_rng(3)
    ad = LoraAdapter.init(th, 2, 4.0, SeededRng(1), default_targets(th, include_embeddings=True))
    ad = ad.with_tensors({k: v + 0.3 * r.normal(size=v.shape) for k, v in ad.tensors().items()})
    toks = r.integers(0, 13, size=(2, 5))
    R = r.normal(size=(2, 5, 13))
    g = tiny.backward(tiny.forward(attach_lora(th, ad), toks, cache=True), R)
    assert set(g) == set(ad.tensors())

    def f(T):
        return float(np.sum(tiny.forward(attach_lora(th, ad.with_tensors(T)), toks).logits * R))

    assert fd_check(f, ad.tensors(), g) < 1e-4


def test_attached_equals_materialised(tiny):
    th = tiny.init_base(5)
    r = np.random.default_rng(8)
    ad = LoraAdapter.init(th, 2, 4.0, SeededRng(1))
    ad = ad.with_tensors({k: v + r.normal(size=v.shape) for k, v in ad.tensors().items()})
    toks = r.integers(0, 13, size=(3, 7))
    a = tiny.forward(attach_lora(th, ad), toks).logits
    b = tiny.forward(ad.materialize(th), toks).logits
    assert np.max(np.abs(a - b)) < 1e-6


def test_greedy_is_deterministic_and_argmax(tiny):
    th = tiny.init_base(6)
    y = tiny.sample(th, [1, 2], 5, greedy=True)
    assert y == tiny.sample(th, [1, 2], 5, greedy=True)
    seq = [1, 2]
    for tok in y:
        assert tok == int(np.argmax(tiny.forward(th, seq).logits[-1]))
        seq.append(tok)


def test_sampling_same_seed_same_output(tiny):
    th = tiny.init_base(6)
    a = tiny.sample_batch(th, [[1, 2], [3, 4]], 6, 1.0, SeededRng(9))
    b = tiny.sample_batch(th, [[1, 2], [3, 4]], 6, 1.0, SeededRng(9))
    assert a == b
    with pytest.raises(PolicyError):
        tiny.sample(th, [1], 3, temperature=0.0, rng=SeededRng(1))


def test_stop_after_answer_label(tiny):
    th = tiny.init_base(6)
    y = tiny.sample(th, [1], 8, greedy=True, stop_token=tiny.sample(th, [1], 1, greedy=True)[0])
    assert len(y) == 2


def test_next_token_frequencies_match_softmax():
    m = ToyTransformer(PolicyConfig(vocab_size=5, max_seq_len=4, d_model=8, n_layers=1, n_heads=2))
    th = m.init_base(2)
    th = th.replace(**{"head.weight": th["head.weight"] * 2.0})
    p = softmax(m.forward(th, [1, 3]).logits[-1])
    n = 100_000
    draws = m.sample_batch(th, np.tile([1, 3], (n, 1)), 1, 1.0, SeededRng(17))
    counts = np.bincount([d[0] for d in draws], minlength=5)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9)
