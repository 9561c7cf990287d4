import numpy as np
import pytest

from peakloc.peaknet import (
    ArchSpec,
    ModelWeights,
    WeightsFormatError,
    backward,
    conv2d_valid,
    forward,
    init_weights,
    load_weights,
    loss_mse,
    nonlocal_block,
    nonlocal_forward,
    relu,
    relu_grad_mask,
    save_weights,
    tensor_names,
    tensor_shapes,
)

TINY = ArchSpec(patch_size=7, conv_channels=(4, 2), fc_sizes=(8, 2),
                attention_enabled=True, attention_bottleneck=2)
TINY_NO_ATTN = ArchSpec(patch_size=7, conv_channels=(4, 2), fc_sizes=(8, 2),
                        attention_enabled=False, attention_bottleneck=2)


def randomize(w: ModelWeights, rng) -> ModelWeights:
    """Random weights including nonzero biases, for gradient checks."""
    return ModelWeights(
        w.arch, {k: rng.normal(0.0, 0.5, v.shape) for k, v in w.tensors.items()}
    )


def numeric_grad(w, batch, target, name, idx, h=1e-5):
    wp = w.copy()
    wp.tensors[name][idx] += h
    lp, _ = loss_mse(forward(wp, batch)[0], target)
    wm = w.copy()
    wm.tensors[name][idx] -= h
    lm, _ = loss_mse(forward(wm, batch)[0], target)
    return (lp - lm) / (2 * h)


def check_gradients(arch, seed, n_samples=6, rel_tol=1e-4):
    """Compare analytic gradients against central differences on a random
    subset of positions in every tensor.

    Two-branch comparison: pairs below a 1e-6 absolute gate count as
    numerically zero (central differences of structurally-zero gradients
    read pure roundoff of order eps * loss / h; the softmax is invariant to
    per-row shifts, so e.g. the phi projection bias gradient is exactly
    zero); everything above the gate must agree to rel_tol.
    """
    rng = np.random.default_rng(seed)
    w = randomize(init_weights(arch, seed), rng)
    batch = rng.random((3, arch.patch_size, arch.patch_size))
    target = rng.random((3, 2))
    pred, cache = forward(w, batch)
    _, grad_pred = loss_mse(pred, target)
    grads = backward(w, cache, grad_pred)
    worst = 0.0
    for name in tensor_names(arch):
        flat_size = w.tensors[name].size
        picks = rng.choice(flat_size, size=min(n_samples, flat_size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, w.tensors[name].shape)
            fd = numeric_grad(w, batch, target, name, idx)
            an = grads[name][idx]
            if max(abs(an), abs(fd)) < 1e-6:
                continue
            rel = abs(an - fd) / max(abs(an), abs(fd))
            worst = max(worst, rel)
            assert rel < rel_tol, f"{name}{idx}: analytic {an} vs fd {fd} (rel {rel})"
    return worst


class TestArchSpec:
    def test_default_shape_algebra(self):
        arch = ArchSpec()
        assert arch.final_map_size == 11 - 2 * 3
        assert arch.flat_size == 5 * 5 * 8

    def test_too_many_convs_rejected(self):
        with pytest.raises(ValueError, match="3x3"):
            ArchSpec(patch_size=7, conv_channels=(8, 8, 8))

    def test_last_fc_must_be_two(self):
        with pytest.raises(ValueError, match="last fc"):
            ArchSpec(fc_sizes=(16, 3))

    def test_bottleneck_bounded_by_first_conv(self):
        with pytest.raises(ValueError, match="bottleneck"):
            ArchSpec(conv_channels=(16, 8), attention_bottleneck=32)


class TestConv:
    def test_paper_shape_11_to_9x9x64(self):
        rng = np.random.default_rng(0)
        x = rng.random((11, 11, 1))
        k = rng.random((3, 3, 1, 64))
        out = conv2d_valid(x, k, np.zeros(64))
        assert out.shape == (9, 9, 64)

    def test_identity_kernel_reproduces_interior(self):
        rng = np.random.default_rng(1)
        x = rng.random((8, 9, 1))
        k = np.zeros((3, 3, 1, 1))
        k[1, 1, 0, 0] = 1.0
        out = conv2d_valid(x, k, np.zeros(1))
        assert np.allclose(out[..., 0], x[1:-1, 1:-1, 0])

    def test_zero_input_gives_bias(self):
        k = np.random.default_rng(2).random((3, 3, 2, 3))
        bias = np.array([1.0, -2.0, 0.5])
        out = conv2d_valid(np.zeros((5, 5, 2)), k, bias)
        assert np.allclose(out, np.broadcast_to(bias, (3, 3, 3)))

    def test_small_input_rejected(self):
        with pytest.raises(ValueError):
            conv2d_valid(np.zeros((2, 5, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1))

    def test_both_channel_paths_match_direct_sum(self):
        # the implementation picks im2col for few channels and an offset
        # loop otherwise; both must equal the sliding-dot-product definition
        rng = np.random.default_rng(21)
        for c_in in (1, 3, 8, 16):
            x = rng.random((2, 6, 7, c_in))
            k = rng.random((3, 3, c_in, 5))
            b = rng.random(5)
            want = np.empty((2, 4, 5, 5))
            for i in range(4):
                for j in range(5):
                    window = x[:, i : i + 3, j : j + 3, :]
                    want[:, i, j, :] = b + np.tensordot(window, k, axes=3)
            got = conv2d_valid(x, k, b)
            assert np.allclose(got, want, atol=1e-12), f"c_in={c_in}"


class TestRelu:
    def test_values(self):
        assert relu(np.array(-1.0)) == 0.0
        assert relu(np.array(3.5)) == 3.5

    def test_subgradient_at_zero_is_zero(self):
        mask = relu_grad_mask(np.array([-1.0, 0.0, 2.0]))
        assert np.array_equal(mask, [0.0, 0.0, 1.0])


class TestNonlocalBlock:
    def test_shape_preserved(self):
        rng = np.random.default_rng(3)
        arch = ArchSpec(conv_channels=(64, 32, 8))
        w = randomize(init_weights(arch, 0), rng)
        x = rng.random((2, 9, 9, 64))
        assert nonlocal_block(x, w).shape == x.shape

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        w = randomize(init_weights(TINY, 0), rng)
        x = rng.random((2, 5, 5, 4))
        _, cache = nonlocal_forward(x, w)
        sums = cache.attn.sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-9)

    def test_zero_out_projection_is_identity(self):
        rng = np.random.default_rng(5)
        w = randomize(init_weights(TINY, 0), rng)
        w.tensors["attn.out_w"][:] = 0.0
        w.tensors["attn.out_b"][:] = 0.0
        x = rng.random((3, 5, 5, 4))
        assert np.allclose(nonlocal_block(x, w), x)

    def test_fresh_init_starts_as_identity(self):
        w = init_weights(TINY, 7)
        x = np.random.default_rng(6).random((1, 5, 5, 4))
        assert np.allclose(nonlocal_block(x, w), x)


class TestForward:
    def test_output_shape(self):
        w = init_weights(TINY, 0)
        out, _ = forward(w, np.random.default_rng(0).random((5, 7, 7)))
        assert out.shape == (5, 2)

    def test_zero_weights_zero_output(self):
        arch = TINY
        w = ModelWeights(arch, {k: np.zeros(s) for k, s in tensor_shapes(arch).items()})
        out, _ = forward(w, np.random.default_rng(1).random((4, 7, 7)))
        assert np.array_equal(out, np.zeros((4, 2)))

    def test_batch_independence(self):
        rng = np.random.default_rng(7)
        w = randomize(init_weights(TINY, 0), rng)
        batch = rng.random((6, 7, 7))
        full, _ = forward(w, batch)
        for i in range(6):
            single, _ = forward(w, batch[i : i + 1])
            assert np.allclose(single[0], full[i], atol=1e-12)

    def test_wrong_patch_size_rejected(self):
        w = init_weights(TINY, 0)
        with pytest.raises(ValueError, match="patch size"):
            forward(w, np.zeros((1, 11, 11)))

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        w = randomize(init_weights(TINY, 0), rng)
        batch = rng.random((3, 7, 7))
        a, _ = forward(w, batch)
        b, _ = forward(w, batch)
        assert np.array_equal(a, b)


class TestLoss:
    def test_zero_at_target(self):
        pred = np.array([[1.0, 2.0]])
        loss, grad = loss_mse(pred, pred.copy())
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros((1, 2)))

    def test_hand_example(self):
        loss, grad = loss_mse(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]))
        assert loss == 1.0
        assert np.array_equal(grad, [[2.0, 0.0]])

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(9)
        pred = rng.random((5, 2))
        target = rng.random((5, 2))
        l1, _ = loss_mse(pred, target)
        l2, _ = loss_mse(target + 2 * (pred - target), target)
        assert l2 == pytest.approx(4 * l1)


class TestBackward:
    def test_gradcheck_with_attention(self):
        worst = check_gradients(TINY, seed=0)
        assert worst < 1e-4

    def test_gradcheck_without_attention(self):
        worst = check_gradients(TINY_NO_ATTN, seed=1)
        assert worst < 1e-4

    def test_zero_grad_pred_gives_zero_grads(self):
        rng = np.random.default_rng(10)
        w = randomize(init_weights(TINY, 0), rng)
        batch = rng.random((2, 7, 7))
        _, cache = forward(w, batch)
        grads = backward(w, cache, np.zeros((2, 2)))
        assert all(not g.any() for g in grads.values())

    def test_dead_unit_gets_zero_gradient(self):
        # drive one conv0 output channel permanently negative: its kernel
        # and bias receive no gradient
        rng = np.random.default_rng(11)
        w = randomize(init_weights(TINY_NO_ATTN, 0), rng)
        w.tensors["conv0.kernel"][..., 0] = 0.0
        w.tensors["conv0.bias"][0] = -100.0
        batch = rng.random((3, 7, 7))
        pred, cache = forward(w, batch)
        _, grad_pred = loss_mse(pred, rng.random((3, 2)))
        grads = backward(w, cache, grad_pred)
        assert not grads["conv0.kernel"][..., 0].any()
        assert grads["conv0.bias"][0] == 0.0

    def test_mismatched_cache_rejected(self):
        rng = np.random.default_rng(12)
        w = randomize(init_weights(TINY, 0), rng)
        _, cache = forward(w, rng.random((2, 7, 7)))
        with pytest.raises(ValueError, match="grad_pred"):
            backward(w, cache, np.zeros((5, 2)))


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        w = randomize(init_weights(TINY, 0), rng)
        path = tmp_path / "m.bnnw"
        save_weights(w, path)
        back = load_weights(path)
        assert back.arch == TINY
        for name in tensor_names(TINY):
            assert np.array_equal(back[name], w[name])

    def test_arch_mismatch_named(self, tmp_path):
        w = init_weights(TINY, 0)
        path = tmp_path / "m.bnnw"
        save_weights(w, path)
        with pytest.raises(WeightsFormatError, match="patch_size"):
            load_weights(path, expect=ArchSpec(patch_size=11, conv_channels=(4, 2),
                                               fc_sizes=(8, 2), attention_bottleneck=2))

    def test_loaded_weights_reject_wrong_patch(self, tmp_path):
        w = init_weights(TINY, 0)
        path = tmp_path / "m.bnnw"
        save_weights(w, path)
        back = load_weights(path)
        with pytest.raises(ValueError, match="patch size"):
            forward(back, np.zeros((1, 11, 11)))

    def test_truncated_file_names_tensor(self, tmp_path):
        w = init_weights(TINY, 0)
        path = tmp_path / "m.bnnw"
        save_weights(w, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 9])
        with pytest.raises(WeightsFormatError, match="tensor fc1"):
            load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bnnw"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(WeightsFormatError, match="magic"):
            load_weights(path)

    def test_checksum_ignores_nothing(self):
        a = init_weights(TINY, 0)
        b = init_weights(TINY, 0)
        assert a.checksum() == b.checksum()
        b.tensors["fc0.weight"][0, 0] += 1e-9
        assert a.checksum() != b.checksum()
