import re

import numpy as np
import pytest

from viflab.errors import ValidationError
from viflab.model import forward
from viflab.relay import (
    RelayBlock,
    RelayBlockConfig,
    RelayMessage,
    contextualize,
    inject_relay,
    merge_messages,
)
from viflab.tokens import TokenSequence, TokenType

S, V, R, I, O = (TokenType.SYSTEM, TokenType.VISION, TokenType.RELAY,
                 TokenType.INSTRUCTION, TokenType.OUTPUT)


def random_sequence(rng, d=64, max_each=6):
    ns, nv, ni = (int(rng.integers(1, max_each + 1)) for _ in range(3))
    no = int(rng.integers(0, 3))
    tags = (S,) * ns + (V,) * nv + (I,) * ni + (O,) * no
    n = len(tags)
    grid = np.full((n, 2), -1)
    grid[ns:ns + nv] = np.stack([np.arange(nv) // 8, np.arange(nv) % 8], 1)
    return TokenSequence(rng.standard_normal((n, d)), tags, np.arange(n), grid, np.full(n, -1))


def random_message(rng, n, d=64, agent=0):
    return RelayMessage(rng.standard_normal((n, d)), rng.integers(0, 64, n),
                        rng.integers(0, 8, (n, 2)), agent)


def naive_block(block, x):
    """Per-row reference for the relay block."""
    w, H = block.weights, block.config.heads
    T, d = x.shape
    dh = d // H

    def ln(z):
        return (z - z.mean(-1, keepdims=True)) / np.sqrt(z.var(-1, keepdims=True) + 1e-5)

    h = ln(x)
    q, k, v = h @ w["wq"], h @ w["wk"], h @ w["wv"]
    ctx = np.zeros_like(x)
    for hd in range(H):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(T):
            s = np.array([q[i, sl] @ k[j, sl] for j in range(T)]) / np.sqrt(dh)
            e = np.exp(s - s.max())
            ctx[i, sl] = (e / e.sum()) @ v[:, sl]
    y = x + ctx @ w["wo"]
    z = ln(y) @ w["w1"]
    g = 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z ** 3)))
    return y + g @ w["w2"]


class TestContextualize:
    def test_length_law(self, block, rng):
        for n in (0, 1, 5, 8):
            msg = contextualize(rng.standard_normal((n, 64)), rng.standard_normal((3, 64)), block)
            assert msg.n == n and msg.dim == 64

    def test_matches_naive_block(self, block, rng):
        r, ins = rng.standard_normal((4, 64)), rng.standard_normal((6, 64))
        msg = contextualize(r, ins, block)
        np.testing.assert_allclose(msg.embeddings, naive_block(block, np.vstack([r, ins]))[:4], atol=1e-10)

    def test_bidirectional(self, block, rng):
        r, ins = rng.standard_normal((3, 64)), rng.standard_normal((4, 64))
        a = contextualize(r, ins, block).embeddings
        ins2 = ins.copy()
        ins2[-1] += rng.standard_normal(64)
        b = contextualize(r, ins2, block).embeddings
        # even the first relay row sees the last instruction row
        assert not np.allclose(a[0], b[0])

    def test_instruction_order_irrelevant(self, block, rng):
        r, ins = rng.standard_normal((3, 64)), rng.standard_normal((5, 64))
        a = contextualize(r, ins, block).embeddings
        b = contextualize(r, ins[::-1], block).embeddings
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_carries_metadata(self, block, rng):
        msg = contextualize(rng.standard_normal((2, 64)), rng.standard_normal((1, 64)), block,
                            source_positions=[10, 12], grid=[[0, 6], [1, 0]], source_agent=3)
        assert msg.source_positions.tolist() == [10, 12]
        assert msg.grid.tolist() == [[0, 6], [1, 0]] and msg.source_agent == 3

    def test_dim_mismatch(self, block, rng):
        with pytest.raises(ValidationError):
            contextualize(rng.standard_normal((2, 32)), rng.standard_normal((1, 64)), block)

    def test_block_config_deterministic(self):
        a = RelayBlock.init(RelayBlockConfig(rng_seed=4))
        b = RelayBlock.init(RelayBlockConfig(rng_seed=4))
        assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)


class TestInject:
    def test_tag_pattern_law(self, rng):
        for _ in range(100):
            seq = random_sequence(rng)
            n = int(rng.integers(0, 9))
            out = inject_relay(seq, random_message(rng, n))
            assert len(out) == len(seq) + n
            # oracle: insert n R's after the last V of the tag string
            cut = seq.tag_str.rindex("V") + 1
            assert out.tag_str == seq.tag_str[:cut] + "R" * n + seq.tag_str[cut:]
            assert re.fullmatch(r"S+V+R*I+O*", out.tag_str)

    def test_positions_reused_and_others_kept(self, rng):
        seq = random_sequence(rng)
        msg = random_message(rng, 3)
        out = inject_relay(seq, msg)
        rel = out.indices(R)
        assert out.positions[rel].tolist() == msg.source_positions.tolist()
        keep = np.array([t is not R for t in out.tags])
        assert out.positions[keep].tolist() == seq.positions.tolist()
        np.testing.assert_array_equal(out.embeddings[rel], msg.embeddings)

    def test_empty_is_identity(self, model, prompt):
        out = inject_relay(prompt, RelayMessage.empty(64))
        assert out is prompt
        np.testing.assert_array_equal(forward(model, out).logits, forward(model, prompt).logits)

    def test_double_injection_rejected(self, rng):
        out = inject_relay(random_sequence(rng), random_message(rng, 2))
        with pytest.raises(ValidationError):
            inject_relay(out, random_message(rng, 1))

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValidationError):
            inject_relay(random_sequence(rng), random_message(rng, 2, d=32))


class TestMerge:
    def test_single_within_cap_unchanged(self, rng):
        m = random_message(rng, 4, agent=2)
        assert merge_messages([m], 8) is m

    def test_round_robin(self, rng):
        a, b = random_message(rng, 5, agent=1), random_message(rng, 2, agent=0)
        out = merge_messages([a, b], 5)
        assert out.n == 5 and out.source_agent == -1
        # agent 0 first (2 rows), then agent 1 gets the remaining 3
        np.testing.assert_array_equal(out.embeddings, np.vstack([b.embeddings, a.embeddings[:3]]))

    def test_cap_zero(self, rng):
        assert merge_messages([random_message(rng, 3)], 0).n == 0

    def test_under_cap_concatenates(self, rng):
        ms = [random_message(rng, 2, agent=i) for i in (2, 0, 1)]
        out = merge_messages(ms, 16)
        assert out.n == 6
        np.testing.assert_array_equal(out.embeddings[:2], ms[1].embeddings)

    def test_inconsistent_dims(self, rng):
        with pytest.raises(ValidationError):
            merge_messages([random_message(rng, 1), random_message(rng, 1, d=8)], 4)


class TestFrame:
    def test_round_trip(self, rng):
        m = random_message(rng, 5, d=16, agent=7)
        raw = m.to_bytes()
        assert len(raw) == 12 + 5 * 16 * 4 + 5 * 4 + 5 * 8
        back = RelayMessage.from_bytes(raw)
        np.testing.assert_array_equal(back.embeddings, m.embeddings.astype(np.float32))
        assert back.source_positions.tolist() == m.source_positions.tolist()
        assert back.grid.tolist() == m.grid.tolist() and back.source_agent == 7

    def test_empty_round_trip(self):
        back = RelayMessage.from_bytes(RelayMessage.empty(8, 2).to_bytes())
        assert back.n == 0 and back.dim == 8 and back.source_agent == 2

    def test_truncated(self, rng):
        with pytest.raises(ValidationError):
            RelayMessage.from_bytes(random_message(rng, 2, d=4).to_bytes()[:-1])
