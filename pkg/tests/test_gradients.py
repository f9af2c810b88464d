"""Finite-difference verification of every analytic gradient.

The oracle here is a test-local central-difference routine; it never calls the
analytic gradient code it is checking.
"""

import numpy as np
import pytest

from metatext.model import (
    CLASSIFIER_BLOCKS,
    PREDICTOR_BLOCKS,
    PRIMARY_BLOCKS,
    MaskedBatch,
    ModelConfig,
    ModelParams,
    NumericalError,
    aux_loss,
    grad_primary,
    grad_total,
    primary_loss,
    total_loss,
)

FD_STEP = 1e-6
FD_TOL = 1e-5
# Central differences on an O(1) loss carry ~1e-10 of float64 rounding noise,
# so entries below this scale are compared in absolute terms (< 1e-9 here).
FD_FLOOR = 1e-4

GRAD_CFG = ModelConfig(vocab_size=10, d_emb=4, d_h=3, n_way=3)


def central_diff(loss_fn, params, step=FD_STEP):
    layout = params.layout()
    flat = params.to_flat()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (loss_fn(ModelParams.from_flat(up, layout))
                   - loss_fn(ModelParams.from_flat(down, layout))) / (2 * step)
    return grad


def max_rel_err(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_FLOOR)
    return float((np.abs(analytic - numeric) / scale).max())


def random_instance(seed):
    rng = np.random.default_rng(seed)
    params = GRAD_CFG.init_params(rng)
    batch = [(rng.integers(3, GRAD_CFG.vocab_size, size=int(rng.integers(2, 7))),
              int(rng.integers(GRAD_CFG.n_way))) for _ in range(4)]
    masked = MaskedBatch.build([s for s, _ in batch], rng, mask_prob=0.5,
                               vocab_size=GRAD_CFG.vocab_size)
    assert masked.num_targets > 0
    return params, batch, masked


@pytest.mark.parametrize("seed", range(6))
def test_primary_gradient_matches_finite_differences(seed):
    params, batch, _ = random_instance(seed)
    g = grad_primary(params, batch)
    fd = central_diff(lambda p: primary_loss(p, batch)[0], params)
    assert max_rel_err(g.values, fd) < FD_TOL


@pytest.mark.parametrize("seed", range(6))
def test_aux_gradient_matches_finite_differences(seed):
    params, batch, masked = random_instance(seed + 100)
    g = grad_total(params, batch, masked, 1.0)
    fd = central_diff(lambda p: aux_loss(p, masked), params)
    assert max_rel_err(g.values, fd) < FD_TOL


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("weight", [1e-3, 0.3])
def test_total_gradient_matches_finite_differences(seed, weight):
    params, batch, masked = random_instance(seed + 200)
    g = grad_total(params, batch, masked, weight)
    fd = central_diff(lambda p: total_loss(p, batch, masked, weight), params)
    assert max_rel_err(g.values, fd) < FD_TOL


def test_total_gradient_zero_aux_weight_has_zero_predictor_blocks():
    params, batch, masked = random_instance(0)
    g = grad_total(params, batch, masked, 0.0)
    assert np.all(g.subset(PREDICTOR_BLOCKS) == 0.0)
    assert np.any(g.subset(PRIMARY_BLOCKS) != 0.0)


def test_primary_gradient_predictor_blocks_exactly_zero():
    for seed in range(5):
        params, batch, _ = random_instance(seed + 300)
        g = grad_primary(params, batch)
        assert np.all(g.subset(PREDICTOR_BLOCKS) == 0.0)


def test_aux_gradient_classifier_blocks_exactly_zero():
    params, batch, masked = random_instance(1)
    g = grad_total(params, batch, masked, 1.0)
    assert np.all(g.subset(CLASSIFIER_BLOCKS) == 0.0)


def test_primary_equals_total_at_zero_weight():
    params, batch, masked = random_instance(2)
    g_pri = grad_primary(params, batch)
    g_tot = grad_total(params, batch, masked, 0.0)
    assert np.abs(g_pri.values - g_tot.values).max() < 1e-12


def test_duplicated_batch_leaves_mean_gradient_unchanged():
    params, batch, _ = random_instance(3)
    g_once = grad_primary(params, batch)
    g_twice = grad_primary(params, batch + batch)
    assert np.abs(g_once.values - g_twice.values).max() < 1e-12


def test_gradient_ignores_skipped_sequences():
    # a masked batch where one sequence produced no targets contributes nothing
    params, batch, _ = random_instance(4)
    seqs = [s for s, _ in batch]
    rng = np.random.default_rng(0)
    masked = MaskedBatch.build(seqs, rng, mask_prob=1.0, vocab_size=10)
    keep = [t for t in masked.targets if t[0] != 0]
    without_first = MaskedBatch(sequences=masked.sequences,
                                targets=keep, n_skipped=1)
    g = grad_total(params, batch, without_first, 1.0)
    fd = central_diff(lambda p: aux_loss(p, without_first), params)
    assert max_rel_err(g.values, fd) < FD_TOL


def test_nonfinite_gradient_raises_with_block_name():
    params, batch, _ = random_instance(5)
    params.E[3, :] = np.nan
    with pytest.raises(NumericalError, match="block"):
        grad_primary(params, batch)
