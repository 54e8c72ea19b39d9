import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_oracle
from voxfuse.core import Tensor, check_gradients
from voxfuse.errors import ContractError, ShapeError
from voxfuse.semantic import (
    NUSCENES_CLASSES,
    GatedCrossAttention,
    LoRAAdapter,
    PromptSpec,
    Region,
    StubTextEncoder,
    TableTextEncoder,
    build_instance_prompt,
    encode_text,
    encode_tokens,
    gated_cross_attention,
    lora_project,
)
from voxfuse.voxel import GridSpec, VoxelGrid

SPEC = GridSpec(nx=2, ny=3, nz=2, channels=3)


class TestPrompts:
    def test_generic_at_frame_zero(self):
        p = build_instance_prompt(["car"], "USA", t=0)
        assert p.template == "generic" and p.class_names == NUSCENES_CLASSES
        assert "the USA" in p.text()

    def test_restricted_later(self):
        p = build_instance_prompt({"pedestrian", "car"}, "Singapore", t=1)
        assert set(p.class_names) == {"car", "pedestrian"}
        assert p.template == "instance" and p.region is Region.SINGAPORE

    def test_deterministic(self):
        a = build_instance_prompt(["truck", "bus"], "USA", 3)
        b = build_instance_prompt(["bus", "truck"], "USA", 7)
        assert a.text() == b.text()

    def test_empty_set_falls_back(self):
        assert build_instance_prompt([], "USA", 2).template == "generic"

    def test_needs_a_class(self):
        with pytest.raises(ContractError):
            PromptSpec(())

    def test_region_parse(self):
        assert Region.parse("usa") is Region.USA and Region.parse("Mars") is Region.OTHER


class TestEncoder:
    enc = StubTextEncoder()

    def test_same_text_same_vector(self):
        a = encode_text("a car in the rain", self.enc).vector.data
        b = encode_text("a car in the rain", self.enc).vector.data
        assert a.tobytes() == b.tobytes()

    def test_pure_over_many_calls(self):
        ref = encode_text(PromptSpec(("car",)), self.enc).vector.data.tobytes()
        assert all(encode_text(PromptSpec(("car",)), self.enc).vector.data.tobytes() == ref
                   for _ in range(1000))

    @settings(max_examples=100, deadline=None)
    @given(st.text(min_size=0, max_size=40))
    def test_unit_norm(self, text):
        v = encode_text(text, self.enc).vector.data
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-9 and v.shape == (512,)

    def test_one_token_changes_direction(self):
        a = encode_text("a driving scene containing car", self.enc).vector.data
        b = encode_text("a driving scene containing bus", self.enc).vector.data
        assert float(a @ b) < 0.999

    def test_table_encoder(self, tmp_path):
        path = tmp_path / "emb.json"
        path.write_text(json.dumps({"hello": [3.0, 4.0]}))
        enc = TableTextEncoder.load(path)
        assert np.allclose(encode_text("hello", enc).vector.data, [0.6, 0.8])
        with pytest.raises(KeyError):
            encode_text("missing", enc)
        with pytest.raises(ContractError):
            TableTextEncoder({"a": [1.0], "b": [1.0, 2.0]})

    def test_tokens_one_per_class(self):
        toks = encode_tokens(PromptSpec(("car", "pedestrian"), "USA"), self.enc)
        assert toks.shape == (2, 512)


class TestLoRA:
    def test_zero_b_is_frozen_projection(self):
        rng = np.random.default_rng(0)
        ad = LoRAAdapter(5, 3, rank=2, rng=rng)
        x = rng.standard_normal(5)
        assert np.array_equal(lora_project(Tensor(x), ad).data, ad.weight.data @ x)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_zero_b_property(self, seed):
        rng = np.random.default_rng(seed)
        ad = LoRAAdapter(4, 4, rank=3, rng=rng, base=rng.standard_normal((4, 4)))
        x = rng.standard_normal((3, 4))
        assert np.array_equal(ad(Tensor(x)).data, x @ ad.weight.data.T)

    def test_rank_one_hand_instance(self):
        ad = LoRAAdapter(2, 2, rank=1, alpha=2.0, base=np.array([[1.0, 2.0], [0.0, 1.0]]))
        ad.A.data[...] = [[1.0, -1.0]]
        ad.B.data[...] = [[0.5], [2.0]]
        # W x = [1 + 6, 3] = [7, 3]; A x = 1 - 3 = -2; scale 2 -> 2 * [-1, -4]
        y = ad(Tensor(np.array([1.0, 3.0]))).data
        assert np.array_equal(y, [5.0, -5.0])

    def test_frozen_weight_gets_no_grad(self):
        ad = LoRAAdapter(3, 3, rank=1, rng=np.random.default_rng(1))
        ad(Tensor(np.ones(3))).sum().backward()
        assert ad.weight.grad is None and ad.A.grad is not None and ad.B.grad is not None
        assert all(p is not ad.weight for p in ad.parameters())

    def test_rank_bounds(self):
        with pytest.raises(ShapeError):
            LoRAAdapter(3, 2, rank=3)
        with pytest.raises(ShapeError):
            LoRAAdapter(3, 2, rank=0)


def make_attention(seed=0, lora=True):
    rng = np.random.default_rng(seed)
    ad = LoRAAdapter(4, 4, rank=2, rng=rng) if lora else None
    if ad is not None:
        ad.B.data[...] = rng.standard_normal(ad.B.shape)
    return GatedCrossAttention(3, 4, key_dim=2, lora=ad, rng=rng), rng


class TestAttention:
    def test_gate_closed_is_identity(self):
        mod, rng = make_attention()
        mod.gate.linear.weight.data[...] = 0.0
        mod.gate.linear.bias.data[...] = -1e4
        v = VoxelGrid(SPEC, Tensor(rng.standard_normal((3, 2, 3, 2))))
        toks = Tensor(rng.standard_normal((2, 4)))
        out = gated_cross_attention(v, toks, toks, mod)
        assert np.abs(out.features.data - v.features.data).max() < 1e-6

    def test_single_token_open_gate(self):
        mod, rng = make_attention(1, lora=False)
        mod.gate.linear.weight.data[...] = 0.0
        mod.gate.linear.bias.data[...] = 1e4
        v = VoxelGrid(SPEC, Tensor(rng.standard_normal((3, 2, 3, 2))))
        tok = rng.standard_normal((1, 4))
        out = mod(v, Tensor(tok), Tensor(tok)).features.data
        value = mod.v_proj(Tensor(tok[0])).data
        assert np.allclose(out, v.features.data + value[:, None, None, None], atol=1e-12)

    def test_hand_instance_matches_oracle(self):
        spec = GridSpec(nx=2, ny=1, nz=1, channels=2)
        ad = LoRAAdapter(3, 3, rank=1, alpha=1.0, base=np.eye(3))
        ad.A.data[...] = [[0.5, -1.0, 0.25]]
        ad.B.data[...] = [[1.0], [0.0], [-2.0]]
        mod = GatedCrossAttention(2, 3, key_dim=2, lora=ad)
        mod.q_proj.weight.data[...] = [[1.0, 0.5], [-0.5, 2.0]]
        mod.q_proj.bias.data[...] = [0.1, -0.2]
        mod.k_proj.weight.data[...] = [[1.0, 0.0, 1.0], [0.0, 2.0, -1.0]]
        mod.k_proj.bias.data[...] = [0.0, 0.3]
        mod.v_proj.weight.data[...] = [[0.5, 1.0, 0.0], [1.0, -1.0, 2.0]]
        mod.v_proj.bias.data[...] = [0.2, 0.0]
        mod.gate.linear.weight.data[...] = [[1.5, -0.5]]
        mod.gate.linear.bias.data[...] = [0.25]
        voxels = [[1.0, -2.0], [0.5, 3.0]]
        tokens = [[1.0, 0.0, 2.0], [-1.0, 1.0, 0.5]]
        feats = np.array(voxels).T.reshape(2, 2, 1, 1)
        out = mod(VoxelGrid(spec, Tensor(feats)), Tensor(tokens), Tensor(tokens)).features.data
        expect = attention_oracle(
            voxels, tokens,
            mod.q_proj.weight.data.tolist(), mod.q_proj.bias.data.tolist(),
            mod.k_proj.weight.data.tolist(), mod.k_proj.bias.data.tolist(),
            mod.v_proj.weight.data.tolist(), mod.v_proj.bias.data.tolist(),
            mod.gate.linear.weight.data.tolist(), mod.gate.linear.bias.data.tolist(),
            lora=(ad.weight.data.tolist(), ad.A.data.tolist(), ad.B.data.tolist(), ad.scale),
        )
        got = out.reshape(2, 2).T
        assert np.abs(got - np.array(expect)).max() <= 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_residual_bound_and_row_sums(self, seed):
        mod, rng = make_attention(seed % 1000)
        v = VoxelGrid(SPEC, Tensor(rng.standard_normal((3, 2, 3, 2)) * 3))
        toks = Tensor(rng.standard_normal((3, 4)))
        res = mod.attend(v, toks, toks)
        assert np.allclose(res.attention.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((res.gate.data > 0) & (res.gate.data < 1))
        v_text = mod.v_proj(mod.lora(toks)).data
        attn_term = res.attention.data @ v_text
        delta = np.abs(res.grid.features.data - v.features.data).max()
        assert delta <= res.gate.data.max() * np.abs(attn_term).max() + 1e-12

    def test_gradcheck_full_op(self):
        mod, rng = make_attention(3)
        v = Tensor(rng.standard_normal((3, 2, 3, 2)), requires_grad=True)
        toks = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        w = rng.standard_normal((3, 2, 3, 2))
        err = check_gradients(lambda: (mod(VoxelGrid(SPEC, v), toks, toks).features * w).sum(),
                              [v, toks, *mod.parameters()])
        assert err <= 1e-4

    def test_errors(self):
        mod, rng = make_attention()
        v = VoxelGrid(SPEC, Tensor(np.zeros((3, 2, 3, 2))))
        with pytest.raises(ShapeError):
            mod(v, Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))
        with pytest.raises(ShapeError):
            mod(VoxelGrid(SPEC.with_channels(2), Tensor(np.zeros((2, 2, 3, 2)))),
                Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))))

    def test_per_channel_gate_option(self):
        rng = np.random.default_rng(0)
        mod = GatedCrossAttention(3, 4, key_dim=2, per_channel_gate=True, rng=rng)
        v = VoxelGrid(SPEC, Tensor(rng.standard_normal((3, 2, 3, 2))))
        res = mod.attend(v, Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))))
        assert res.gate.shape == (12, 3)
