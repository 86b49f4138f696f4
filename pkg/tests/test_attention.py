import math

import numpy as np
import numpy.testing as npt
import pytest

from deskbert.attention import (AttentionSpec, RopeParams, attend,
                                attention_pair_count, rope_apply,
                                sequence_positions)
from deskbert.errors import BatchError, ConfigError, InputError
from deskbert.tensor import Tensor, grad_check, sum_all

from conftest import rng


def _spec(heads=2, window=None, theta=10_000.0, head_dim=8):
    return AttentionSpec(heads, window, RopeParams(theta, head_dim))


class TestRope:
    def test_position_zero_is_identity(self, f64):
        x = Tensor(rng(0).standard_normal((4, 2, 8)))
        out = rope_apply(x, np.zeros(4, dtype=int), RopeParams(10_000.0, 8))
        npt.assert_array_equal(out.data, x.data)

    def test_rotation_preserves_dot(self, f64):
        # same position on q and k: rotations are orthogonal
        g = rng(1)
        q = g.standard_normal((1, 1, 8))
        k = g.standard_normal((1, 1, 8))
        params = RopeParams(10_000.0, 8)
        for p in (0, 3, 17, 120):
            pos = np.array([p])
            qr = rope_apply(Tensor(q), pos, params).data
            kr = rope_apply(Tensor(k), pos, params).data
            npt.assert_allclose(float((qr * kr).sum()), float((q * k).sum()),
                                atol=1e-9)

    @pytest.mark.parametrize("theta", [10_000.0, 160_000.0])
    @pytest.mark.parametrize("head_dim", [4, 8])
    def test_relative_position_only(self, theta, head_dim, f64):
        """Brute force over the position grid: q.k depends only on p1 - p2."""
        g = rng(2)
        q = g.standard_normal(head_dim)
        k = g.standard_normal(head_dim)
        params = RopeParams(theta, head_dim)
        span = 32
        positions = np.arange(span)
        qr = rope_apply(Tensor(np.tile(q, (span, 1, 1))), positions, params).data[:, 0]
        kr = rope_apply(Tensor(np.tile(k, (span, 1, 1))), positions, params).data[:, 0]
        dots = qr @ kr.T  # dots[p1, p2]
        for delta in range(-span + 1, span):
            diag = np.diagonal(dots, offset=-delta)
            assert diag.max() - diag.min() < 1e-6, f"delta {delta}"

    def test_gradient(self, f64):
        g = rng(3)
        pos = np.array([0, 2, 5, 9])
        params = RopeParams(10_000.0, 8)
        err = grad_check(lambda t: rope_apply(t, pos, params),
                         [Tensor(g.standard_normal((4, 2, 8)))])
        assert err < 1e-4

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ConfigError):
            RopeParams(10_000.0, 7)

    def test_bad_positions(self, f64):
        x = Tensor(np.ones((3, 1, 4)))
        with pytest.raises(InputError):
            rope_apply(x, np.array([0, -1, 2]), RopeParams(10_000.0, 4))


class TestSequencePositions:
    def test_restart_at_boundaries(self):
        pos = sequence_positions(np.array([0, 3, 4, 7]))
        npt.assert_array_equal(pos, [0, 1, 2, 0, 0, 1, 2])


class TestAttend:
    def test_window_saturation_equals_global(self, f64):
        g = rng(4)
        q, k, v = (Tensor(g.standard_normal((6, 2, 8))) for _ in range(3))
        cu = [0, 6]
        out_w = attend(q, k, v, cu, _spec(window=12)).data
        out_g = attend(q, k, v, cu, _spec(window=None)).data
        npt.assert_array_equal(out_w, out_g)

    def test_single_token_returns_value_row(self, f64):
        g = rng(5)
        q, k = (Tensor(g.standard_normal((1, 2, 8))) for _ in range(2))
        v = Tensor(g.standard_normal((1, 2, 8)))
        out = attend(q, k, v, [0, 1], _spec()).data
        npt.assert_allclose(out, v.data, atol=1e-12)

    def test_allowed_pairs_match_bruteforce(self, f64):
        """Uniform probabilities + basis values expose the attended set."""
        n, half = 10, 2
        q = Tensor(np.zeros((n, 1, 16)))
        k = Tensor(np.zeros((n, 1, 16)))
        v = Tensor(np.eye(n, 16).reshape(n, 1, 16))
        out = attend(q, k, v, [0, n], _spec(heads=1, window=2 * half, head_dim=16)).data
        expected_pairs = {(i, j) for i in range(n) for j in range(n)
                          if abs(i - j) <= half}
        for i in range(n):
            allowed = {j for j in range(n) if (i, j) in expected_pairs}
            row = out[i, 0, :n]
            nonzero = {j for j in range(n) if row[j] > 1e-12}
            assert nonzero == allowed
            npt.assert_allclose(row[sorted(allowed)], 1.0 / len(allowed), atol=1e-9)

    def test_no_cross_sequence_leakage(self, f64):
        g = rng(6)
        q = g.standard_normal((9, 2, 8))
        k = g.standard_normal((9, 2, 8))
        v = g.standard_normal((9, 2, 8))
        cu = [0, 4, 9]
        spec = _spec(window=4)
        base = attend(Tensor(q), Tensor(k), Tensor(v), cu, spec).data
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        q2[:4] += 3.0
        k2[:4] -= 1.5
        v2[:4] *= -2.0
        perturbed = attend(Tensor(q2), Tensor(k2), Tensor(v2), cu, spec).data
        npt.assert_array_equal(perturbed[4:], base[4:])

    def test_packed_equals_per_sequence_oracle(self, f64):
        g = rng(7)
        lens = [5, 3, 8]
        total = sum(lens)
        q = g.standard_normal((total, 2, 8))
        k = g.standard_normal((total, 2, 8))
        v = g.standard_normal((total, 2, 8))
        cu = np.concatenate(([0], np.cumsum(lens)))
        for spec in (_spec(window=None), _spec(window=4)):
            packed = attend(Tensor(q), Tensor(k), Tensor(v), cu, spec).data
            pieces = []
            for s, e in zip(cu[:-1], cu[1:]):
                piece = attend(Tensor(q[s:e]), Tensor(k[s:e]), Tensor(v[s:e]),
                               [0, e - s], spec).data
                pieces.append(piece)
            npt.assert_allclose(packed, np.concatenate(pieces), atol=1e-6)

    @pytest.mark.parametrize("window", [None, 4])
    def test_gradients(self, window, f64):
        g = rng(8)
        cu = np.array([0, 3, 7])
        spec = _spec(window=window)
        tensors = [Tensor(g.standard_normal((7, 2, 8))) for _ in range(3)]
        err = grad_check(lambda q, k, v: attend(q, k, v, cu, spec), tensors)
        assert err < 1e-4

    def test_malformed_cu_seqlens(self, f64):
        q = Tensor(np.zeros((4, 1, 4)))
        spec = _spec(heads=1, head_dim=4)
        for bad in ([1, 4], [0, 3], [0, 2, 2, 4], [0, 3, 2, 4]):
            with pytest.raises(BatchError):
                attend(q, q, q, bad, spec)

    def test_odd_window_rejected(self):
        with pytest.raises(ConfigError):
            _spec(window=3)


class TestPairCount:
    def test_global_square(self):
        assert attention_pair_count([8192]) == 8192 ** 2 == 67_108_864

    def test_saturation(self):
        for n in (1, 5, 17):
            assert attention_pair_count([n], window=2 * n) == n * n

    def test_bruteforce_oracle(self):
        n, window = 10, 4
        half = window // 2
        expected = sum(1 for i in range(n) for j in range(n) if abs(i - j) <= half)
        # row spans 3+4+5*6+4+3; also n*(2h+1) - h*(h+1) edge deficit
        assert expected == 44
        assert attention_pair_count([n], window=window) == expected

    def test_matches_bruteforce_on_random_cases(self):
        g = rng(9)
        for _ in range(20):
            lens = g.integers(1, 30, size=g.integers(1, 4)).tolist()
            window = int(g.integers(1, 12)) * 2
            half = window // 2
            expected = sum(1 for n in lens for i in range(n) for j in range(n)
                           if abs(i - j) <= half)
            assert attention_pair_count(lens, window=window) == expected

    def test_global_is_sum_of_squares(self):
        lens = [3, 7, 2]
        assert attention_pair_count(lens) == sum(n * n for n in lens)

    def test_positive_lengths_required(self):
        with pytest.raises(InputError):
            attention_pair_count([4, 0])
