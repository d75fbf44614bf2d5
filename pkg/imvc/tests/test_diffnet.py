import numpy as np
import pytest
import torch
from torch.func import functional_call

from imvc.base import ConfigError, ContractError, DataError, DimensionError, NumericError
from imvc.diffnet import (
    MAGIC,
    OUTPUT_ACTIVATIONS,
    Mlp,
    MlpSpec,
    ParamStore,
    Tape,
    adam_step,
    backward,
    read_tensors,
    write_tensors,
)


def test_spec_rejects_bad_widths():
    with pytest.raises(ConfigError):
        MlpSpec((4,))
    with pytest.raises(ConfigError):
        MlpSpec((4, 0, 2))
    with pytest.raises(ConfigError):
        MlpSpec((4, 2), output_activation="tanh")


def test_forward_shapes_and_output_activations():
    x = torch.randn(5, 3, dtype=torch.float64)
    q = Mlp(MlpSpec((3, 4, 3), output_activation="softmax"))(x)
    assert q.shape == (5, 3)
    assert torch.allclose(q.sum(dim=1), torch.ones(5, dtype=torch.float64))
    e = Mlp(MlpSpec((3, 4, 1), output_activation="softplus"))(x)
    assert (e > 0).all()


def test_forward_rejects_wrong_width():
    net = Mlp(MlpSpec((3, 4, 2)))
    with pytest.raises(DimensionError, match="layer 0"):
        net(torch.randn(5, 4, dtype=torch.float64))


def test_biases_start_at_zero():
    net = Mlp(MlpSpec((3, 4, 2)))
    assert all(torch.count_nonzero(layer.bias) == 0 for layer in net.layers)


def test_backward_gives_zeros_for_unused_parameters():
    used, unused = Mlp(MlpSpec((3, 2))), Mlp(MlpSpec((3, 2)))
    store = ParamStore(used, unused)
    with Tape(store) as tape:
        loss = used(torch.randn(4, 3, dtype=torch.float64), tape).sum()
    grads = backward(tape, loss)
    assert len(grads) == len(store.parameters)
    assert all(torch.count_nonzero(g) == 0 for g in grads[2:])
    assert any(torch.count_nonzero(g) > 0 for g in grads[:2])
    assert tape.networks == [used]


def test_backward_contracts():
    net = Mlp(MlpSpec((3, 2)))
    store = ParamStore(net)
    with Tape(store) as tape:
        out = net(torch.randn(4, 3, dtype=torch.float64), tape)
    with pytest.raises(ContractError):
        backward(tape, out)
    with pytest.raises(NumericError):
        backward(tape, out.sum() * float("nan"))


def test_adam_first_step_moves_by_learning_rate():
    net = Mlp(MlpSpec((2, 1)))
    store = ParamStore(net)
    before = [p.detach().clone() for p in store.parameters]
    grads = [torch.full_like(p, 3.0) for p in store.parameters]
    adam_step(store, grads, lr=0.01)
    for b, p in zip(before, store.parameters):
        assert torch.allclose(b - p.detach(), torch.full_like(b, 0.01), atol=1e-9)
    assert store.step == 1


def test_adam_zero_gradient_leaves_parameters():
    net = Mlp(MlpSpec((2, 3, 1)))
    store = ParamStore(net)
    before = [p.detach().clone() for p in store.parameters]
    adam_step(store, [torch.zeros_like(p) for p in store.parameters], lr=0.1)
    assert all(torch.equal(b, p.detach()) for b, p in zip(before, store.parameters))


def test_adam_zero_gradient_after_momentum_leaves_parameters():
    store = ParamStore(Mlp(MlpSpec((2, 3, 1))))
    adam_step(store, [torch.ones_like(p) for p in store.parameters], lr=0.1)
    before = [p.detach().clone() for p in store.parameters]
    adam_step(store, [torch.zeros_like(p) for p in store.parameters], lr=0.1)
    assert all(torch.equal(b, p.detach()) for b, p in zip(before, store.parameters))
    assert store.step == 2


def test_adam_moves_only_entries_with_gradient():
    store = ParamStore(Mlp(MlpSpec((2, 3, 1))))
    adam_step(store, [torch.ones_like(p) for p in store.parameters], lr=0.1)
    before = [p.detach().clone() for p in store.parameters]
    grads = [torch.zeros_like(p) for p in store.parameters]
    grads[0][0, 0] = 1.0
    adam_step(store, grads, lr=0.1)
    changed = [b != p.detach() for b, p in zip(before, store.parameters)]
    assert changed[0][0, 0]
    assert int(sum(c.sum() for c in changed)) == 1


def test_adam_rejects_bad_arguments():
    store = ParamStore(Mlp(MlpSpec((2, 1))))
    grads = [torch.zeros_like(p) for p in store.parameters]
    with pytest.raises(ConfigError):
        adam_step(store, grads, lr=0.0)
    with pytest.raises(ContractError):
        adam_step(store, grads[:1], lr=0.1)
    with pytest.raises(ContractError):
        adam_step(store, [torch.zeros(7, dtype=torch.float64)] * len(grads), lr=0.1)


def test_forward_matches_hand_computation():
    net = Mlp(MlpSpec((2, 2, 1)))
    with torch.no_grad():
        net.layers[0].weight.copy_(torch.tensor([[1.0, -1.0], [0.5, 2.0]]))
        net.layers[0].bias.copy_(torch.tensor([0.0, -1.0]))
        net.layers[1].weight.copy_(torch.tensor([[2.0, -3.0]]))
        net.layers[1].bias.copy_(torch.tensor([0.5]))
    x = torch.tensor([[1.0, 2.0], [3.0, 1.0]], dtype=torch.float64)
    # hidden rows: relu([-1, 3.5]) = [0, 3.5] and relu([2, 2.5]) = [2, 2.5]
    expected = torch.tensor([[-10.0], [-3.0]], dtype=torch.float64)
    assert torch.allclose(net(x), expected)


def test_encoder_forward_matches_hand_computation():
    net = Mlp(MlpSpec((3, 2, 2)))
    with torch.no_grad():
        net.layers[0].weight.copy_(torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]]))
        net.layers[0].bias.zero_()
        net.layers[1].weight.copy_(torch.eye(2))
        net.layers[1].bias.copy_(torch.tensor([1.0, 0.0]))
    x = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    assert torch.allclose(net(x), torch.tensor([[5.0, 0.0]], dtype=torch.float64))


def test_zero_parameters_give_neutral_outputs():
    x = torch.randn(4, 3, dtype=torch.float64)
    nets = {
        act: Mlp(MlpSpec((3, 5, 2 if act != "softplus" else 1), output_activation=act))
        for act in ("identity", "softmax", "softplus")
    }
    for net in nets.values():
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
    assert torch.count_nonzero(nets["identity"](x)) == 0
    assert torch.allclose(nets["softmax"](x), torch.full((4, 2), 0.5, dtype=torch.float64))
    assert torch.allclose(nets["softplus"](x), torch.full((4, 1), np.log(2), dtype=torch.float64))


def test_softmax_is_uniform_on_ties_and_shift_invariant():
    softmax = OUTPUT_ACTIVATIONS["softmax"]
    zeros = torch.zeros(1, 2, dtype=torch.float64)
    assert torch.allclose(softmax(zeros), torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    z = torch.tensor([[1.0, -2.0, 0.5]], dtype=torch.float64)
    assert torch.allclose(softmax(z), softmax(z + 100.0))


def test_backward_of_constant_loss_is_zero():
    net = Mlp(MlpSpec((3, 2)))
    store = ParamStore(net)
    with Tape(store) as tape:
        net(torch.randn(4, 3, dtype=torch.float64), tape)
        loss = torch.tensor(1.5, dtype=torch.float64)
    assert all(torch.count_nonzero(g) == 0 for g in backward(tape, loss))


def test_backward_of_weight_sum_is_ones():
    net = Mlp(MlpSpec((3, 2)))
    store = ParamStore(net)
    with Tape(store) as tape:
        tape.record(net)
        loss = net.layers[0].weight.sum()
    weight_grad, bias_grad = backward(tape, loss)
    assert torch.equal(weight_grad, torch.ones(2, 3, dtype=torch.float64))
    assert torch.count_nonzero(bias_grad) == 0


def test_backward_rejects_gradient_from_unrecorded_network():
    recorded, stray = Mlp(MlpSpec((3, 2))), Mlp(MlpSpec((3, 2)))
    store = ParamStore(recorded, stray)
    x = torch.randn(4, 3, dtype=torch.float64)
    with Tape(store) as tape:
        loss = recorded(x, tape).sum() + stray(x).sum()
    with pytest.raises(ContractError, match="not recorded"):
        backward(tape, loss)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    net = Mlp(MlpSpec((3, 4, 2), output_activation="softmax"))
    # nonzero biases keep hidden units off the relu kink
    with torch.no_grad():
        for layer in net.layers:
            torch.nn.init.uniform_(layer.bias, -0.5, 0.5)
    x = torch.randn(4, 3, dtype=torch.float64)
    names = [name for name, _ in net.named_parameters()]
    inputs = tuple(p.detach().clone().requires_grad_(True) for p in net.parameters())

    def loss(*params):
        return functional_call(net, dict(zip(names, params)), (x,)).log().sum()

    assert torch.autograd.gradcheck(loss, inputs, eps=1e-4, atol=1e-5, rtol=1e-3)


def test_container_round_trip(tmp_path):
    path = tmp_path / "t.dhia"
    tensors = [torch.randn(3, 2, dtype=torch.float64), torch.arange(4, dtype=torch.float64)]
    write_tensors(path, tensors)
    read = read_tensors(path)
    assert read[0].shape == (3, 2) and read[1].shape == (1, 4)
    np.testing.assert_array_equal(read[0], tensors[0].numpy())
    np.testing.assert_array_equal(read[1].reshape(-1), tensors[1].numpy())


def test_container_rejects_corruption(tmp_path):
    path = tmp_path / "t.dhia"
    write_tensors(path, [torch.ones(2, 2, dtype=torch.float64)])
    data = path.read_bytes()
    assert data.startswith(MAGIC)

    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DataError, match="magic"):
        read_tensors(path)
    path.write_bytes(data[:-8])
    with pytest.raises(DataError, match="truncated"):
        read_tensors(path)
