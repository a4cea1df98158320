import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from fedcustom import autodiff as ad
from fedcustom.autodiff import Tensor
from fedcustom.backbone import (IGNORE, BackboneConfig, KVPrefix, ParameterSet, forward,
                                greedy_decode, init_backbone, lm_loss, make_batch, set_trainable)
from fedcustom.customization import AdapterSet
from fedcustom.errors import (ConfigurationError, DimensionError, InputError, LengthError)

TOY = BackboneConfig(n_layers=1, n_heads=2, model_dim=8, ff_dim=16, vocab_size=13, max_seq_len=12)
SMALL = BackboneConfig(n_layers=2, n_heads=2, model_dim=8, ff_dim=16, vocab_size=11, max_seq_len=10)


def toy_params(cfg=TOY, seed=0):
    rng = np.random.default_rng(seed)
    return oracles.randomize(init_backbone(cfg, rng), rng)


def rand_prefix(cfg, p, rng, requires_grad=False):
    shape = (cfg.n_layers, cfg.n_heads, p, cfg.head_dim)
    return KVPrefix(Tensor(rng.normal(size=shape), requires_grad),
                    Tensor(rng.normal(size=shape), requires_grad), cfg)


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        BackboneConfig(n_heads=3, model_dim=64)
    assert BackboneConfig().head_dim == 16


def test_forward_matches_reference_without_prefix():
    ps = toy_params()
    toks = [1, 5, 2, 7, 3]
    np.testing.assert_allclose(forward(ps, toks, TOY).data,
                               oracles.forward(ps.values(), toks, 1, 2), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_prefix_equals_concatenated_kv_oracle(seed):
    rng = np.random.default_rng(seed)
    ps = toy_params(seed=seed)
    pre = rand_prefix(TOY, 3, rng)
    toks = rng.integers(0, TOY.vocab_size, size=6)
    got = forward(ps, toks, TOY, prefix=pre).data
    want = oracles.forward(ps.values(), toks, 1, 2, pre.keys.data, pre.values.data)
    assert np.max(np.abs(got - want)) < 1e-10


def test_zero_length_prefix_rejected():
    z = Tensor(np.zeros((1, 2, 1, 4)))
    with pytest.raises((ConfigurationError, DimensionError)):
        KVPrefix(Tensor(np.zeros((1, 2, 0, 4))), Tensor(np.zeros((1, 2, 0, 4))), TOY)
    with pytest.raises(ConfigurationError):
        KVPrefix(z, z, SMALL)


def test_zero_prefix_still_changes_output():
    ps = toy_params()
    z = Tensor(np.zeros((1, 2, 3, 4)))
    toks = [1, 2, 3, 4]
    diff = np.abs(forward(ps, toks, TOY, prefix=KVPrefix(z, z, TOY)).data - forward(ps, toks, TOY).data)
    assert diff.max() > 0


def test_forward_errors():
    ps = toy_params()
    with pytest.raises(InputError):
        forward(ps, [1, 13], TOY)
    with pytest.raises(LengthError):
        forward(ps, [1] * 13, TOY)


def test_batched_forward_matches_single():
    ps = toy_params(SMALL, 3)
    rng = np.random.default_rng(3)
    toks = rng.integers(0, SMALL.vocab_size, size=(3, 7))
    pre = rand_prefix(SMALL, 2, rng)
    batched = forward(ps, toks, SMALL, prefix=pre).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], forward(ps, toks[b], SMALL, prefix=pre).data,
                                   rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(1, 7), st.booleans())
def test_causality(seed, t, with_prefix):
    rng = np.random.default_rng(seed)
    ps = toy_params(SMALL, seed % 7)
    pre = rand_prefix(SMALL, 2, rng) if with_prefix else None
    toks = rng.integers(0, SMALL.vocab_size, size=8)
    base = forward(ps, toks, SMALL, prefix=pre).data
    toks2 = toks.copy()
    toks2[t] = (toks2[t] + 1) % SMALL.vocab_size
    other = forward(ps, toks2, SMALL, prefix=pre).data
    np.testing.assert_array_equal(base[:t], other[:t])
    assert np.any(base[t:] != other[t:])


def test_prefix_reachability_every_layer():
    rng = np.random.default_rng(8)
    ps = toy_params(SMALL, 8)
    pre = rand_prefix(SMALL, 3, rng, requires_grad=True)
    out = forward(ps, rng.integers(0, SMALL.vocab_size, size=5), SMALL, prefix=pre)
    ad.tsum(out).backward()
    for layer in range(SMALL.n_layers):
        assert np.any(pre.keys.grad[layer] != 0)
        assert np.any(pre.values.grad[layer] != 0)


# --- loss ---------------------------------------------------------------------------

def test_make_batch_masks_mr_positions():
    seqs = [(np.array([5, 6, 2, 7, 8, 3]), 2), (np.array([5, 2, 3]), 1)]
    b = make_batch(seqs, pad_id=0)
    np.testing.assert_array_equal(b.inputs, [[5, 6, 2, 7, 8], [5, 2, 0, 0, 0]])
    np.testing.assert_array_equal(b.targets, [[IGNORE, IGNORE, 7, 8, 3], [IGNORE, 3, IGNORE, IGNORE, IGNORE]])
    assert b.n_targets == 4
    with pytest.raises(InputError):
        make_batch([], 0)


def test_loss_zero_when_eos_certain():
    ps = toy_params()
    ps["head.w"].data[...] = 0.0
    ps["head.b"].data[...] = 0.0
    ps["head.b"].data[3] = 1e3
    b = make_batch([(np.array([5, 6, 2, 3]), 2)], 0)
    assert lm_loss(ps, b, TOY).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_matches_logsumexp_oracle():
    ps = toy_params(seed=4)
    seqs = [(np.array([5, 6, 2, 7, 8, 3]), 2), (np.array([9, 2, 4, 3]), 1)]
    b = make_batch(seqs, 0)
    terms = []
    for s, sep in seqs:
        logits = oracles.forward(ps.values(), s[:-1], 1, 2)
        for pos in range(sep, len(s) - 1):
            row = logits[pos]
            m = row.max()
            terms.append(m + math.log(np.exp(row - m).sum()) - row[s[pos + 1]])
    assert lm_loss(ps, b, TOY).item() == pytest.approx(np.mean(terms), abs=1e-12)


def test_loss_ignores_mr_targets():
    # the mask alone decides which positions count: rewriting MR-position
    # targets to arbitrary ids and re-applying the mask changes nothing
    ps = toy_params(seed=5)
    b = make_batch([(np.array([5, 6, 7, 2, 8, 3]), 3)], 0)
    logits = forward(ps, b.inputs, TOY)
    t2 = b.targets.copy()
    mr = b.targets == IGNORE
    t2[mr] = 4
    base = ad.cross_entropy(logits, b.targets).item()
    assert ad.cross_entropy(logits, np.where(mr, IGNORE, t2)).item() == base
    assert ad.cross_entropy(logits, t2).item() != base


# --- decoding ------------------------------------------------------------------------

def test_decode_forced_eos_gives_empty_text():
    ps = toy_params()
    ps["head.w"].data[...] = 0.0
    ps["head.b"].data[...] = 0.0
    ps["head.b"].data[3] = 10.0
    assert greedy_decode(ps, [5, 6, 2], TOY, eos_id=3) == []


def test_decode_matches_stepwise_argmax_and_is_deterministic():
    ps = toy_params(seed=6)
    prompt = [5, 6, 2]
    got = greedy_decode(ps, prompt, TOY, eos_id=3, max_new=6)
    seq = list(prompt)
    want = []
    for _ in range(6):
        nxt = int(np.argmax(oracles.forward(ps.values(), seq, 1, 2)[-1]))
        if nxt == 3:
            break
        want.append(nxt)
        seq.append(nxt)
    assert got == want
    assert greedy_decode(ps, prompt, TOY, eos_id=3, max_new=6) == got


def test_batched_decode_matches_individual():
    ps = toy_params(SMALL, 2)
    prompts = [[4, 5, 2], [6, 2], [7, 8, 9, 2]]
    batched = greedy_decode(ps, prompts, SMALL, eos_id=3, max_new=5)
    assert batched == [greedy_decode(ps, p, SMALL, eos_id=3, max_new=5) for p in prompts]


@pytest.mark.parametrize("seed", range(4))
def test_cached_decode_matches_full_recompute(seed):
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(n_layers=2, n_heads=2, model_dim=8, ff_dim=16, vocab_size=11,
                         max_seq_len=14, adapter_bottleneck=3)
    ps = toy_params(cfg, seed)
    ps["head.b"].data[3] -= 2.0  # keep EOS rare so sequences run long
    pre = rand_prefix(cfg, 2, rng)
    ad_params = oracles.randomize(AdapterSet.init_params(cfg, 3, rng), rng)
    adapters = AdapterSet(ad_params, cfg)
    prompts = [list(rng.integers(4, 11, size=n)) + [2] for n in (1, 4, 2, 6)]
    for kw in ({}, {"prefix": pre}, {"adapters": adapters}, {"prefix": pre, "adapters": adapters}):
        full = greedy_decode(ps, prompts, cfg, eos_id=3, forward_fn=lambda t: forward(
            ps, t, cfg, kw.get("prefix"), kw.get("adapters")), **kw)
        assert greedy_decode(ps, prompts, cfg, eos_id=3, **kw) == full


def test_decode_respects_max_seq_len():
    ps = toy_params()
    ps["head.b"].data[3] = -1e3  # never emit EOS
    out = greedy_decode(ps, [5, 2], TOY, eos_id=3)
    assert len(out) == TOY.max_seq_len - 2


# --- trainable partition and checkpoints --------------------------------------------

def test_full_partition_counts_everything():
    ps = init_backbone(BackboneConfig(vocab_size=50), np.random.default_rng(0))
    view = set_trainable(ps, {"backbone", "head"})
    assert view.count == ps.count()
    assert len(view.frozen) == 0


def test_frozen_backbone_gets_no_gradient():
    rng = np.random.default_rng(1)
    ps = toy_params()
    view = set_trainable(ps, set())
    assert view.count == 0
    pre = rand_prefix(TOY, 2, rng, requires_grad=True)
    lm_loss(ps, make_batch([(np.array([5, 6, 2, 7, 3]), 2)], 0), TOY, prefix=pre).backward()
    assert all(t.grad is None or not t.grad.any() for t in ps.entries.values())
    assert np.any(pre.keys.grad != 0)
    with pytest.raises(ConfigurationError):
        set_trainable(ps, set(), require_nonempty=True)
    with pytest.raises(ConfigurationError):
        set_trainable(ps, {"bogus"})


def test_adapter_partition_count_closed_form():
    cfg = BackboneConfig(vocab_size=50)
    b = 16
    ps = init_backbone(cfg, np.random.default_rng(0)).merged(
        AdapterSet.init_params(cfg, b, np.random.default_rng(1)))
    view = set_trainable(ps, {"adapter"})
    d, L = cfg.model_dim, cfg.n_layers
    assert view.count == 2 * L * (d * b + b * d + d + b)
    assert view.count == AdapterSet.param_count(cfg, b)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ps = toy_params(SMALL, 9)
    ps.add("prefix.extra", Tensor(np.array([np.pi, -0.0, 1e-308, np.nextafter(1, 2)])), "prefix")
    path = tmp_path / "p.ckpt"
    ps.save(path, {"config_hash": "abc", "seed": 3})
    back, header = ParameterSet.load(path)
    assert header["config_hash"] == "abc" and header["seed"] == 3
    assert back.names() == ps.names()
    assert back.groups == ps.groups
    for k in ps.names():
        assert back[k].data.tobytes() == ps[k].data.tobytes()
        assert back[k].shape == ps[k].shape
    assert back.to_bytes({"config_hash": "abc", "seed": 3}) == ps.to_bytes({"config_hash": "abc", "seed": 3})


def test_parameter_names_unique():
    ps = toy_params()
    with pytest.raises(ConfigurationError):
        ps.add("tok_emb", Tensor(np.zeros(2)), "backbone")
