import math

import numpy as np
import pytest
import torch

from patchcast.layers import (
    AttentionMask,
    BLOCK_DIAGONAL_SPACE,
    CAUSAL_TIME,
    RotaryParams,
    apply_rotary_xpos,
    attention_with_allowed,
    masked_attention,
    rmsnorm,
    swiglu_ffn,
)

torch.set_num_threads(1)


def rand(shape, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=dtype)


class TestRmsNorm:
    def test_hand_example(self):
        x = torch.tensor([2.0, 2.0, 2.0, 2.0])
        out = rmsnorm(x, torch.ones(4), eps=0.0)
        torch.testing.assert_close(out, torch.ones(4))

    def test_zero_input(self):
        out = rmsnorm(torch.zeros(6), torch.full((6,), 3.0), eps=1e-5)
        torch.testing.assert_close(out, torch.zeros(6))

    def test_scale_invariance(self):
        x = rand((8,), seed=1)
        a = rmsnorm(x, torch.ones(8, dtype=torch.float64), eps=0.0)
        b = rmsnorm(7.3 * x, torch.ones(8, dtype=torch.float64), eps=0.0)
        torch.testing.assert_close(a, b, rtol=1e-6, atol=1e-9)

    def test_gradcheck(self):
        x = rand((3, 5), seed=2).requires_grad_(True)
        gain = rand((5,), seed=3).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda x_, g_: rmsnorm(x_, g_, 1e-6).sum(), (x, gain), rtol=1e-3
        )


class TestSwiGLU:
    def test_formula_oracle(self):
        d, f = 2, 2
        x = rand((d,), seed=4)
        wg, wv, wo = rand((f, d), seed=5), rand((f, d), seed=6), rand((d, f), seed=7)
        got = swiglu_ffn(x, wg, wv, wo)
        gate = wg @ x
        swish = gate * torch.sigmoid(gate)
        want = wo @ (swish * (wv @ x))
        torch.testing.assert_close(got, want, rtol=1e-6, atol=1e-9)

    def test_zero_gate_annihilates(self):
        x = rand((4,), seed=8)
        out = swiglu_ffn(x, torch.zeros(6, 4, dtype=torch.float64), rand((6, 4), seed=9), rand((4, 6), seed=10))
        torch.testing.assert_close(out, torch.zeros(4, dtype=torch.float64))

    def test_zero_input(self):
        out = swiglu_ffn(
            torch.zeros(4, dtype=torch.float64),
            rand((6, 4), seed=11),
            rand((6, 4), seed=12),
            rand((4, 6), seed=13),
        )
        torch.testing.assert_close(out, torch.zeros(4, dtype=torch.float64))

    def test_gradcheck(self):
        x = rand((2, 3), seed=14).requires_grad_(True)
        wg = rand((4, 3), seed=15).requires_grad_(True)
        wv = rand((4, 3), seed=16).requires_grad_(True)
        wo = rand((3, 4), seed=17).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda *a: swiglu_ffn(*a).pow(2).sum(), (x, wg, wv, wo), rtol=1e-3
        )


class TestRotaryXpos:
    def params(self, decay=0.999):
        return RotaryParams(head_dim=8, xpos_decay=decay)

    def test_position_zero_identity(self):
        q = rand((1, 1, 8), seed=18)
        k = rand((1, 1, 8), seed=19)
        q2, k2 = apply_rotary_xpos(q, k, self.params(), torch.tensor([0]))
        torch.testing.assert_close(q2, q)
        torch.testing.assert_close(k2, k)

    def test_shift_invariance_of_scores(self):
        s = 6
        q = rand((2, s, 8), seed=20)
        k = rand((2, s, 8), seed=21)
        params = self.params()
        for shift in (0, 3, 100):
            positions = torch.arange(s) + shift
            q2, k2 = apply_rotary_xpos(q, k, params, positions)
            scores = q2 @ k2.transpose(-2, -1)
            if shift == 0:
                base = scores
            else:
                torch.testing.assert_close(scores, base, rtol=1e-5, atol=1e-8)

    def test_zeta_one_is_plain_rotary(self):
        s = 4
        q = rand((1, s, 8), seed=22)
        k = rand((1, s, 8), seed=23)
        positions = torch.arange(s)
        q_plain, k_plain = apply_rotary_xpos(q, k, self.params(decay=1.0), positions)
        # plain rotary preserves vector norms exactly
        torch.testing.assert_close(
            q_plain.norm(dim=-1), q.norm(dim=-1), rtol=1e-6, atol=1e-9
        )
        q_x, k_x = apply_rotary_xpos(q, k, self.params(decay=0.9), positions)
        assert not torch.allclose(q_x, q_plain)
        # xpos scaling cancels between q and k at equal positions
        torch.testing.assert_close(
            (q_x * k_x).sum(-1), (q_plain * k_plain).sum(-1), rtol=1e-6, atol=1e-9
        )

    def test_relative_rotation_angle(self):
        # two unit vectors on the first rotation plane: score is cos(dm * theta0)
        q = torch.zeros(1, 2, 8, dtype=torch.float64)
        k = torch.zeros(1, 2, 8, dtype=torch.float64)
        q[..., 0] = 1.0
        k[..., 0] = 1.0
        q2, k2 = apply_rotary_xpos(q, k, self.params(decay=1.0), torch.arange(2))
        got = (q2[0, 1] * k2[0, 0]).sum()
        assert got.item() == pytest.approx(math.cos(1.0), abs=1e-9)

    def test_gradcheck(self):
        q = rand((1, 3, 4), seed=24).requires_grad_(True)
        k = rand((1, 3, 4), seed=25).requires_grad_(True)
        params = RotaryParams(head_dim=4, xpos_decay=0.99)
        assert torch.autograd.gradcheck(
            lambda q_, k_: torch.stack(
                apply_rotary_xpos(q_, k_, params, torch.arange(3))
            ).sum(),
            (q, k),
            rtol=1e-3,
        )


class TestMaskedAttention:
    def test_single_position_returns_v(self):
        q, k = rand((2, 1, 4), seed=26), rand((2, 1, 4), seed=27)
        v = rand((2, 1, 4), seed=28)
        out = masked_attention(q, k, v, AttentionMask(kind=CAUSAL_TIME, length=1))
        torch.testing.assert_close(out, v)

    def test_causal_future_perturbation_is_invisible(self):
        s = 5
        q, k, v = (rand((1, s, 4), seed=i) for i in (29, 30, 31))
        mask = AttentionMask(kind=CAUSAL_TIME, length=s)
        base = masked_attention(q, k, v, mask)
        v2 = v.clone()
        v2[0, 4] += 100.0
        out = masked_attention(q, k, v2, mask)
        torch.testing.assert_close(out[:, :4], base[:, :4])
        assert (out[:, :4] - base[:, :4]).abs().max().item() == 0.0

    def test_block_mask_equals_per_group_attention(self):
        ids = torch.tensor([0, 0, 1])
        q, k, v = (rand((2, 3, 4), seed=i) for i in (32, 33, 34))
        full_allowed = torch.ones(3, 3, dtype=torch.bool)
        joint = masked_attention(
            q, k, v, AttentionMask(kind=BLOCK_DIAGONAL_SPACE, length=3, id_values=ids)
        )
        part_a = attention_with_allowed(q[:, :2], k[:, :2], v[:, :2], full_allowed[:2, :2])
        part_b = attention_with_allowed(q[:, 2:], k[:, 2:], v[:, 2:], full_allowed[:1, :1])
        torch.testing.assert_close(joint[:, :2], part_a, rtol=1e-6, atol=1e-9)
        torch.testing.assert_close(joint[:, 2:], part_b, rtol=1e-6, atol=1e-9)

    def test_rows_sum_to_one_via_constant_v(self):
        s = 6
        q, k = rand((1, s, 4), seed=35), rand((1, s, 4), seed=36)
        v = torch.ones(1, s, 4, dtype=torch.float64)
        out = masked_attention(q, k, v, AttentionMask(kind=CAUSAL_TIME, length=s))
        torch.testing.assert_close(out, v, rtol=1e-9, atol=1e-9)

    def test_zero_allowed_keys_outputs_zero(self):
        ids = torch.tensor([0, -1])
        q, k, v = (rand((1, 2, 4), seed=i) for i in (37, 38, 39))
        out = masked_attention(
            q, k, v, AttentionMask(kind=BLOCK_DIAGONAL_SPACE, length=2, id_values=ids)
        )
        torch.testing.assert_close(out[0, 1], torch.zeros(4, dtype=torch.float64))

    def test_space_permutation_equivariance(self):
        ids = torch.tensor([0, 1, 1, 0])
        q, k, v = (rand((1, 4, 4), seed=i) for i in (40, 41, 42))
        out = masked_attention(
            q, k, v, AttentionMask(kind=BLOCK_DIAGONAL_SPACE, length=4, id_values=ids)
        )
        perm = torch.tensor([2, 0, 3, 1])
        out_p = masked_attention(
            q[:, perm],
            k[:, perm],
            v[:, perm],
            AttentionMask(kind=BLOCK_DIAGONAL_SPACE, length=4, id_values=ids[perm]),
        )
        torch.testing.assert_close(out_p, out[:, perm], rtol=1e-6, atol=1e-9)

    def test_gradcheck(self):
        q = rand((1, 3, 4), seed=43).requires_grad_(True)
        k = rand((1, 3, 4), seed=44).requires_grad_(True)
        v = rand((1, 3, 4), seed=45).requires_grad_(True)
        mask = AttentionMask(kind=CAUSAL_TIME, length=3)
        assert torch.autograd.gradcheck(
            lambda *a: masked_attention(*a, mask).pow(2).sum(), (q, k, v), rtol=1e-3
        )


class TestFiniteDifferenceGradients:
    """Central finite differences as an oracle independent of autograd."""

    @staticmethod
    def fd_grad(fn, x, step=1e-4):
        g = torch.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = fn(x).item()
            flat[i] = orig - step
            lo = fn(x).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        return g

    @pytest.mark.parametrize(
        "name",
        ["rmsnorm", "swiglu", "attention"],
    )
    def test_matches_autograd(self, name):
        if name == "rmsnorm":
            gain = rand((5,), seed=50)
            fn = lambda x: rmsnorm(x, gain, 1e-6).pow(2).sum()
            x = rand((5,), seed=51)
        elif name == "swiglu":
            wg, wv, wo = rand((4, 3), seed=52), rand((4, 3), seed=53), rand((3, 4), seed=54)
            fn = lambda x: swiglu_ffn(x, wg, wv, wo).pow(2).sum()
            x = rand((3,), seed=55)
        else:
            k, v = rand((1, 3, 4), seed=56), rand((1, 3, 4), seed=57)
            mask = AttentionMask(kind=CAUSAL_TIME, length=3)
            fn = lambda x: masked_attention(x, k, v, mask).pow(2).sum()
            x = rand((1, 3, 4), seed=58)
        x_ad = x.clone().requires_grad_(True)
        fn(x_ad).backward()
        fd = self.fd_grad(fn, x.clone())
        np.testing.assert_allclose(
            x_ad.grad.numpy(), fd.numpy(), rtol=1e-3, atol=1e-6
        )
