"""The batched runner must agree with the per-sequence reference exactly
(values and gradients), including variable-length padding and frozen rows."""

import numpy as np
import pytest

from actlab import autodiff as ad
from actlab.act import ActConfig, run_sequence
from actlab.cells import init_params
from actlab.engine import run_batch
from actlab.losses import joint_softmax_cross_entropy


def random_case(kind, seed, batch=5, t_max=4, input_size=3, hidden=6, out=4):
    rng = np.random.default_rng(seed)
    params = init_params(kind, input_size, hidden, out, seed=seed + 1)
    lengths = rng.integers(1, t_max + 1, size=batch)
    lengths[0] = t_max                      # keep at least one full-length row
    inputs = rng.normal(size=(batch, t_max, input_size))
    targets = rng.integers(0, out, size=(batch, t_max, 1))
    mask = rng.random((batch, t_max)) < 0.8
    mask &= np.arange(t_max)[None, :] < lengths[:, None]
    return params, inputs, lengths, targets, mask


def reference_objective(params, cfg, inputs, lengths, targets, mask, tau):
    """Per-example tapes, averaged by hand: the ground-truth objective."""
    batch = inputs.shape[0]
    total = 0.0
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    outputs = []
    ponders = []
    for e in range(batch):
        t_e = int(lengths[e])
        res = run_sequence(params.kind, params, cfg, inputs[e, :t_e])
        loss = None
        for t, y in enumerate(res.outputs):
            dist = ad.softmax(y, axis=1)
            term = joint_softmax_cross_entropy([dist], targets[e, t:t + 1, 0],
                                               mask[e, t:t + 1])
            loss = term if loss is None else ad.add(loss, term)
        if res.ponder_var is not None:
            loss = ad.add(loss, ad.scale(res.ponder_var, tau))
        total += float(loss.data) + tau * res.ponder_const
        res.tape.backward(loss)
        for name, var in res.param_vars.items():
            grads[name] += res.tape.grad(var)
        outputs.append(np.vstack([y.data for y in res.outputs]))
        ponders.append([tr.ponder for tr in res.traces])
    total /= batch
    for name in grads:
        grads[name] /= batch
    return total, grads, outputs, ponders


def batched_objective(params, cfg, inputs, lengths, targets, mask, tau):
    batch = inputs.shape[0]
    res = run_batch(params.kind, params, cfg, inputs, lengths)
    loss = None
    for t, y in enumerate(res.outputs):
        dist = ad.softmax(y, axis=1)
        term = joint_softmax_cross_entropy([dist], targets[:, t, :], mask[:, t])
        loss = term if loss is None else ad.add(loss, term)
    if res.ponder_var is not None:
        loss = ad.add(loss, ad.scale(res.ponder_var, tau))
    loss = ad.scale(loss, 1.0 / batch)
    total = float(loss.data) + tau * res.ponder_const / batch
    res.tape.backward(loss)
    grads = {name: res.tape.grad(var) for name, var in res.param_vars.items()}
    return total, grads, res


@pytest.mark.parametrize("kind", ["rnn", "lstm"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_batch_matches_per_sequence(kind, seed):
    params, inputs, lengths, targets, mask = random_case(kind, seed)
    cfg = ActConfig(max_steps=7, time_penalty=1e-2)
    tau = cfg.time_penalty

    ref_total, ref_grads, ref_outputs, ref_ponders = reference_objective(
        params, cfg, inputs, lengths, targets, mask, tau)
    got_total, got_grads, res = batched_objective(
        params, cfg, inputs, lengths, targets, mask, tau)

    # Values: outputs on live steps, ponder diagnostics, loss.
    for e in range(inputs.shape[0]):
        t_e = int(lengths[e])
        got_y = np.stack([res.outputs[t].data[e] for t in range(t_e)])
        np.testing.assert_allclose(got_y, ref_outputs[e], atol=1e-12, rtol=0)
        np.testing.assert_allclose(res.ponders[e, :t_e], ref_ponders[e],
                                   atol=1e-12, rtol=0)
        assert not res.active[e, t_e:].any()
        assert np.all(res.ponders[e, t_e:] == 0.0)
    assert abs(got_total - ref_total) < 1e-12
    assert abs(res.batch_ponder_sum - sum(sum(p) for p in ref_ponders)) < 1e-12

    # Gradients, the part the masks could silently break.
    for name in ref_grads:
        scale = max(1.0, np.abs(ref_grads[name]).max())
        np.testing.assert_allclose(got_grads[name] / scale,
                                   ref_grads[name] / scale, atol=1e-12, rtol=0)


def test_forced_cap_one_batch():
    params, inputs, lengths, targets, mask = random_case("lstm", 9)
    res = run_batch("lstm", params, ActConfig(max_steps=1), inputs, lengths)
    assert np.all(res.steps[res.active] == 1)
    assert np.all(res.remainders[res.active] == 1.0)
    assert np.all(res.halted_by_cap[res.active])
    assert res.ponder_var is None
    assert res.batch_ponder_sum == 2.0 * lengths.sum()


def test_inputs_shape_contract():
    params = init_params("rnn", 3, 4, 2, seed=0)
    with pytest.raises(Exception, match="batch, T, input_size"):
        run_batch("rnn", params, ActConfig(), np.zeros((3, 3)))
