import json

import numpy as np
import pytest

import energy_attn as ea


def test_softmax_and_logsumexp():
    x = np.array([0.5, -1.0, 2.0])
    p = ea.softmax(x)
    assert p.sum() == pytest.approx(1.0)
    assert ea.logsumexp(x) == pytest.approx(np.log(np.exp(x).sum()))


def test_boltzmann_weights_match_numpy():
    rng = np.random.default_rng(0)
    d, n, t = 4, 6, 0.7
    w = rng.normal(size=(d, d))
    z = rng.normal(size=d)
    tokens = rng.normal(size=(n, d))
    spec = ea.energy_spec("elastic", w, temperature=t)
    e = 0.5 * ((z[None, :] - tokens @ w.T) ** 2).sum(axis=1)
    np.testing.assert_allclose(ea.pair_energies(spec, z, tokens), e, rtol=1e-12)
    p = np.exp(-e / t) / np.exp(-e / t).sum()
    np.testing.assert_allclose(ea.boltzmann_weights(spec, z, tokens), p, rtol=1e-12)
    lse = np.log(np.exp(-e / t).sum())
    assert ea.global_energy(spec, z, tokens) == pytest.approx(-t * lse, rel=1e-12)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 3)) / np.sqrt(3)
    spec = ea.energy_spec("inner", w, temperature=1.3)
    z = rng.normal(size=3)
    tokens = rng.normal(size=(5, 3))
    g = ea.grad_z(spec, z, tokens)
    fd = np.array([
        (ea.global_energy(spec, z + h, tokens) - ea.global_energy(spec, z - h, tokens)) / 2e-6
        for h in np.eye(3) * 1e-6
    ])
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_tied_attention_is_one_gradient_step():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 4)) * 0.4
    z = rng.normal(size=4)
    tokens = rng.normal(size=(7, 4))
    eta, t = 0.3, 1.4
    spec = ea.energy_spec("inner", w, temperature=t)
    out = ea.softmax_attention(ea.tied_single_head(w, eta, t), z, tokens)
    step = z - eta * ea.grad_z(spec, z, tokens, temperature_scaled=True)
    np.testing.assert_allclose(out, step, atol=1e-12)


def test_attention_variants_shapes():
    rng = np.random.default_rng(3)
    d, h, dh = 8, 2, 4
    maps = lambda: [rng.normal(size=(dh, d)) / np.sqrt(d) for _ in range(h)]
    w_o = [rng.normal(size=(d, dh)) / np.sqrt(dh) for _ in range(h)]
    params = ea.attention_params(maps(), maps(), maps(), w_o)
    z = rng.normal(size=d)
    tokens = rng.normal(size=(10, d))
    for fn in (ea.mha, ea.mha2nd1st, ea.light_mha2nd1st):
        assert fn(params, z, tokens).shape == (d,)
    z1, mom = ea.momen_mha(params, z, tokens, np.zeros(d))
    np.testing.assert_allclose(z1, ea.mha(params, z, tokens), atol=1e-14)
    with pytest.raises(ValueError):
        ea.mha(params, z, rng.normal(size=(10, d + 1)))


def test_descend_and_verify():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(6, 6)) / np.sqrt(6)
    spec = ea.energy_spec("elastic", w)
    res = ea.descend(spec, "vanilla", rng.normal(size=6), rng.normal(size=(12, 6)), eta=0.01, steps=50, tol=1e-300)
    assert res["iterations"] == 50
    assert all(b <= a + 1e-12 for a, b in zip(res["energy"], res["energy"][1:]))
    for report in ea.verify("thm1", seed=7, instances=10):
        assert report["pass"]


def test_cli_roundtrip():
    code, out, err = ea.run_cli(["verify", "thm2", "--instances", "5"])
    assert code == 0, err
    doc = json.loads(out)
    assert doc["schema_version"] == 1
    assert [r["claim"] for r in doc["results"]] == ["thm2", "thm2.gated"]
    assert ea.run_cli(["verify", "thm1", "--instances", "0"])[0] == 2
