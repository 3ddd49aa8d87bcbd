import numpy as np
import numpy.testing as npt
import pytest

from gcgvt import tensorgrad as tg
from gcgvt.attention import GuidancePacket, guided_attention, guided_block, head_weights
from gcgvt.geoembed import ConfigurationError

from .oracles import cross_attention_loops, gate_ref, gelu_ref, random_attention_params

D, H, N = 8, 4, 5
CATS = (3, 2, 4, 1)


def tensors(p):
    return {k: tg.Tensor(v) for k, v in p.items()}


def setup(seed=0, n=N, batch=()):
    rng = np.random.default_rng(seed)
    p = random_attention_params(rng, D, CATS)
    x = rng.normal(size=batch + (n, D))
    g = rng.normal(size=batch + (n, D))
    raw = [rng.uniform(0, 1, batch + (k,)) for k in CATS]
    return p, x, g, raw


def run(p, x, g, raw=None, gates=None):
    raw_t = None if raw is None else [tg.Tensor(r) for r in raw]
    return guided_attention(tg.Tensor(x), tg.Tensor(g), tensors(p), H, raw_categories=raw_t, gates=gates)


@pytest.mark.parametrize("seed", range(3))
def test_unit_gates_equal_plain_cross_attention(seed):
    p, x, g, _ = setup(seed)
    out, _ = run(p, x, g, gates=np.ones(H))
    npt.assert_allclose(out.data, cross_attention_loops(x, g, p, H), rtol=0, atol=1e-12)


def test_zero_gates_leave_output_bias():
    p, x, g, _ = setup(1)
    out, _ = run(p, x, g, gates=np.zeros(H))
    npt.assert_array_equal(out.data, np.broadcast_to(p["wo.bias"], (N, D)))


def test_single_token_returns_projected_value():
    p, x, g, _ = setup(2, n=1)
    out, diag = run(p, x, g, gates=np.ones(H))
    v = x @ p["wv.weight"] + p["wv.bias"]
    npt.assert_allclose(out.data, v @ p["wo.weight"] + p["wo.bias"], atol=1e-12)
    npt.assert_array_equal(diag.attention, np.ones((H, 1, 1)))


@pytest.mark.parametrize("seed", range(3))
def test_learned_gates_match_scalar_loop_oracle(seed):
    p, x, g, raw = setup(seed)
    out, diag = run(p, x, g, raw)
    gates = [gate_ref(raw[i], p, i) for i in range(H)]
    npt.assert_allclose(diag.gates, gates, rtol=1e-12)
    npt.assert_allclose(out.data, cross_attention_loops(x, g, p, H, gates), rtol=1e-10, atol=1e-10)


def test_batched_matches_per_sample():
    p, x, g, raw = setup(3, batch=(3,))
    out, diag = run(p, x, g, raw)
    for b in range(3):
        single, sdiag = run(p, x[b], g[b], [r[b] for r in raw])
        npt.assert_allclose(out.data[b], single.data, atol=1e-13)
        npt.assert_allclose(diag.attention[b], sdiag.attention, atol=1e-15)


def test_attention_rows_sum_to_one():
    p, x, g, raw = setup(4, n=7, batch=(2,))
    _, diag = run(p, x, g, raw)
    assert diag.attention.shape == (2, H, 7, 7)
    npt.assert_allclose(diag.attention.sum(-1), 1.0, atol=1e-12)
    assert (diag.attention >= 0).all()


@pytest.mark.parametrize("i", range(H))
def test_gate_depends_only_on_its_category(i):
    p, _, _, raw = setup(5)
    raw_t = [tg.Tensor(r, requires_grad=True) for r in raw]
    gates = head_weights(raw_t, tensors(p))
    pick = np.zeros(H)
    pick[i] = 1.0
    tg.backward(tg.sum(tg.mul(gates, tg.Tensor(pick))))
    for j, r in enumerate(raw_t):
        if j == i:
            assert np.any(r.grad != 0)
        else:
            assert r.grad is None or np.all(r.grad == 0.0)


def test_permuting_input_tokens_is_invariant():
    p, x, g, raw = setup(6)
    base, _ = run(p, x, g, raw)
    perm = np.random.default_rng(0).permutation(N)
    out, _ = run(p, x[perm], g, raw)
    npt.assert_allclose(out.data, base.data, atol=1e-12)


def test_self_attention_when_guidance_is_input():
    p, x, _, _ = setup(7)
    out, _ = run(p, x, x)
    npt.assert_allclose(out.data, cross_attention_loops(x, x, p, H), atol=1e-12)


def test_configuration_errors():
    p, x, g, raw = setup(8)
    with pytest.raises(ConfigurationError):
        run(p, x, g, raw[:3])
    with pytest.raises(ConfigurationError):
        guided_attention(tg.Tensor(x), tg.Tensor(g), tensors(p), 3)
    with pytest.raises(tg.ShapeError):
        run(p, x, g[:3])


# --- full block -----------------------------------------------------------------------

def block_params(rng, mlp_dim=6):
    p = random_attention_params(rng, D, CATS, prefix="attn.")
    for name in ("norm1", "norm_guidance", "norm2"):
        p[f"{name}.gain"] = rng.normal(1, 0.1, D)
        p[f"{name}.bias"] = rng.normal(0, 0.1, D)
    p["mlp.fc1.weight"] = rng.normal(0, 0.3, (D, mlp_dim))
    p["mlp.fc1.bias"] = rng.normal(0, 0.3, mlp_dim)
    p["mlp.fc2.weight"] = rng.normal(0, 0.3, (mlp_dim, D))
    p["mlp.fc2.bias"] = rng.normal(0, 0.3, D)
    return p


def test_block_with_zero_output_maps_is_identity():
    rng = np.random.default_rng(0)
    p = block_params(rng)
    for k in ("attn.wo.weight", "attn.wo.bias", "mlp.fc2.weight", "mlp.fc2.bias"):
        p[k] = np.zeros_like(p[k])
    x = rng.normal(size=(2, N, D))
    packet = GuidancePacket(tg.Tensor(rng.normal(size=(2, N, D))),
                            [tg.Tensor(rng.uniform(size=(2, k))) for k in CATS])
    out, _ = guided_block(tg.Tensor(x), packet, tensors(p), H)
    npt.assert_array_equal(out.data, x)


@pytest.mark.parametrize("name", ["x", "guidance", "raw1", "attn.wq.weight", "attn.score.2.fc1.weight",
                                  "norm_guidance.gain", "norm1.bias", "mlp.fc1.weight"])
def test_block_gradients(name):
    rng = np.random.default_rng(1)
    p = block_params(rng)
    x = rng.normal(size=(2, N, D))
    g = rng.normal(size=(2, N, D))
    raw = [rng.uniform(size=(2, k)) for k in CATS]
    w = rng.normal(size=(2, N, D))

    def loss(inputs):
        pt = tensors(p)
        pt.update({k: v for k, v in inputs.items() if k in p})
        xt = inputs.get("x", tg.Tensor(x))
        gt = inputs.get("guidance", tg.Tensor(g))
        rt = [inputs.get(f"raw{i}", tg.Tensor(r)) for i, r in enumerate(raw)]
        out, _ = guided_block(xt, GuidancePacket(gt, rt), pt, H)
        return tg.sum(tg.mul(out, tg.Tensor(w)))

    base = {"x": x, "guidance": g, **{f"raw{i}": r for i, r in enumerate(raw)}, **p}[name]
    err = tg.fd_check(lambda t: loss({name: t}), tg.Tensor(base), h=1e-5)
    assert err < 1e-4


def test_block_without_packet_is_self_attention():
    rng = np.random.default_rng(2)
    p = block_params(rng)
    x = rng.normal(size=(N, D))
    pt = tensors(p)
    out, diag = guided_block(tg.Tensor(x), None, pt, H)
    normed = tg.layer_norm(tg.Tensor(x), pt["norm1.gain"], pt["norm1.bias"])
    attn = {k[5:]: v for k, v in p.items() if k.startswith("attn.")}
    mid = x + cross_attention_loops(normed.data, normed.data, attn, H)
    npt.assert_array_equal(diag.gates, np.ones(H))
    ln2 = tg.layer_norm(tg.Tensor(mid), pt["norm2.gain"], pt["norm2.bias"]).data
    ref = mid + gelu_ref(ln2 @ p["mlp.fc1.weight"] + p["mlp.fc1.bias"]) @ p["mlp.fc2.weight"] + p["mlp.fc2.bias"]
    npt.assert_allclose(out.data, ref, atol=1e-11)


def test_disabled_gates_are_one():
    rng = np.random.default_rng(3)
    p = block_params(rng)
    packet = GuidancePacket(tg.Tensor(rng.normal(size=(N, D))), [tg.Tensor(rng.uniform(size=k)) for k in CATS])
    _, diag = guided_block(tg.Tensor(rng.normal(size=(N, D))), packet, tensors(p), H,
                           head_weights_enabled=False)
    npt.assert_array_equal(diag.gates, np.ones(H))
