import numpy as np
import pytest

from dtir import tensor as tc
from dtir.engine.settings import FineTuneConfig
from dtir.errors import ContractError, ShapeError
from dtir.model import (ModelSpec, TimePrompt, build_model, forward, gate_params_of, gate_weights,
                        shallow_mask, timestep_embedding)
from dtir.tensor import Tensor

SMALL = ModelSpec(in_channels=1, base_channels=4, depth=2, embed_dim=8, n_experts=3, adapter_dim=2)


@pytest.fixture(scope="module")
def params():
    return build_model(SMALL, seed=0)


def _x(seed, b=2, c=1, hw=8):
    return np.random.default_rng(seed).uniform(-1, 1, size=(b, c, hw, hw)).astype(np.float32)


class TestBuild:
    def test_layer_range(self):
        ps = build_model(ModelSpec(base_channels=8, depth=2), 0)
        assert max(m.layer_index for m in ps.meta.values()) == 3 == ps.max_layer_index

    def test_deterministic(self):
        a, b = build_model(SMALL, 5), build_model(SMALL, 5)
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()
        c = build_model(SMALL, 6)
        assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a if "w" in k and a[k].data.any())

    def test_groups(self, params):
        groups = {m.group for m in params.meta.values()}
        assert groups == {"backbone", "adapter", "gate", "embedding"}
        assert all(params.meta[n].layer_index >= SMALL.depth for n in params.names("adapter"))

    @pytest.mark.parametrize("kw", [{"depth": 1}, {"n_experts": 0}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ContractError):
            ModelSpec(**kw)

    def test_copy_and_state_round_trip(self, params):
        cp = params.copy()
        cp["head.w"].data += 1.0
        assert not np.array_equal(cp["head.w"].data, params["head.w"].data)
        cp.load_state(params.state())
        np.testing.assert_array_equal(cp["head.w"].data, params["head.w"].data)
        with pytest.raises(ContractError):
            cp.load_state({"head.w": params["head.w"].data})


class TestForward:
    def test_shape_and_finite(self, params):
        out = forward(params, _x(0), [3, 40])
        assert out.shape == (2, 1, 8, 8) and np.isfinite(out.data).all()

    def test_adapters_inert_at_init(self, params):
        x = _x(1)
        a = forward(params, x, [5, 5], use_moe=True).data
        b = forward(params, x, [5, 5], use_moe=False).data
        np.testing.assert_array_equal(a, b)

    def test_batch_independence(self, params):
        x = _x(2, b=1)
        one = forward(params, x, [7]).data
        two = forward(params, np.concatenate([x, x]), [7, 7]).data
        np.testing.assert_allclose(two[0], one[0], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(two[1], one[0], rtol=1e-5, atol=1e-6)

    def test_timestep_conditions_output(self, params):
        x = _x(3, b=1)
        assert not np.allclose(forward(params, x, [1]).data, forward(params, x, [45]).data)

    def test_indivisible_size(self, params):
        with pytest.raises(ShapeError):
            forward(params, _x(0, hw=6), [1, 1])

    def test_every_backbone_entry_gets_gradient(self, params):
        params.zero_grad()
        loss = tc.mean(tc.square(forward(params, _x(4), [2, 30], use_moe=False)))
        tc.backward(loss)
        zero = [n for n in params.names("backbone") + params.names("embedding")
                if not np.any(params[n].grad)]
        assert zero == []
        params.zero_grad()


class TestGate:
    def test_single_expert(self):
        g = {"w": Tensor(np.random.default_rng(0).normal(size=(8, 1))), "b": Tensor(np.zeros(1))}
        np.testing.assert_allclose(gate_weights(TimePrompt.at(3, 8), g).data, [1.0])

    def test_zero_params_uniform(self, params):
        w = gate_weights(TimePrompt.at(17, SMALL.embed_dim), gate_params_of(params, 0)).data
        np.testing.assert_allclose(w, 1 / 3, rtol=1e-6)

    def test_dominant_logit(self):
        # zero weights plus bias logits [10, 0, ...] isolate the softmax itself
        g = {"w": Tensor(np.zeros((8, 5))), "b": Tensor(np.array([10.0, 0, 0, 0, 0]))}
        w = gate_weights(TimePrompt.at(0, 8), g).data
        assert w[0] > 0.999
        assert w[0] == pytest.approx(np.exp(10) / (np.exp(10) + 4), rel=1e-6)

    def test_probability_vector_for_all_t(self):
        rng = np.random.default_rng(1)
        g = {"w": Tensor(rng.normal(size=(8, 4))), "b": Tensor(rng.normal(size=4))}
        for t in range(51):
            w = gate_weights(TimePrompt.at(t, 8), g).data
            assert (w >= 0).all() and abs(w.sum() - 1) < 1e-6

    def test_embedding_injective(self):
        emb = timestep_embedding(np.arange(51), 32)
        d = np.abs(emb[:, None, :] - emb[None, :, :]).sum(-1)
        assert (d + np.eye(51) > 1e-4).all()


class TestShallowMask:
    def test_no_decay(self, params):
        m = shallow_mask(params, 30, FineTuneConfig(a=0.0))
        assert all(v == 1.0 for n, v in m.items() if params.meta[n].group in ("backbone", "embedding"))

    def test_adapters_excluded(self, params):
        m = shallow_mask(params, 10, FineTuneConfig())
        assert all(m[n] == 0.0 for n in params.names("adapter") + params.names("gate"))

    def test_shallowest_is_one_and_monotone(self, params):
        m = shallow_mask(params, 25, FineTuneConfig(a=0.05))
        by_layer = {}
        for n in params.names("backbone"):
            by_layer[params.meta[n].layer_index] = m[n]
        assert by_layer[0] == 1.0
        vals = [by_layer[k] for k in sorted(by_layer)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == pytest.approx(np.exp(-0.05 * 25))

    def test_range(self, params):
        with pytest.raises(ContractError):
            shallow_mask(params, 51, FineTuneConfig())
