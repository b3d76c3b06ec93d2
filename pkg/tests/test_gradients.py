import pytest
import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from bias_rescore.model import ModelConfig, MultiTaskLM, apply_lora, multitask_loss
from bias_rescore.tokenizer import SpecialToken, encode


CLASS_WEIGHTS = [0.33, 0.33, 0.33, 0.01]


def _soft_config(vocab_size):
    """d_model=8, float64-friendly config with soft Gumbel injection."""
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=8,
        n_layers=1,
        n_heads=2,
        d_ff=16,
        max_seq_len=32,
        dropout=0.0,
        gumbel_hard=False,
        seed=0,
    )


# Parameter names do not depend on the vocabulary size.
PARAM_GROUPS = [name for name, _ in MultiTaskLM(_soft_config(16)).named_parameters()]


@pytest.fixture
def soft_model(vocab):
    return MultiTaskLM(_soft_config(vocab.vocab_size)).double().train()


@pytest.fixture
def batch(vocab):
    ids = [vocab.special_id(SpecialToken.BOS)] + encode("call amy", vocab)
    sequence = ids + [vocab.special_id(SpecialToken.EOS)]
    token_targets = torch.tensor(sequence[1:])
    # Next-token classes: "amy" is PER, everything else NONE.
    class_targets = torch.tensor([3, 3, 3, 3, 3, 0, 0, 0, 3])
    return torch.tensor(ids), token_targets, class_targets


def _loss_of(model, names, batch):
    ids, token_targets, class_targets = batch

    def fn(*tensors):
        params = dict(model.named_parameters())
        params.update(zip(names, tensors))
        # Same Gumbel noise on every evaluation.
        generator = torch.Generator().manual_seed(0)
        out = functional_call(model, params, (ids,), {"generator": generator})
        return multitask_loss(out, token_targets, class_targets, 0.7, CLASS_WEIGHTS).total

    return fn


@pytest.mark.parametrize("group", PARAM_GROUPS)
def test_loss_gradients_match_finite_differences(soft_model, batch, group):
    param = dict(soft_model.named_parameters())[group]
    inputs = (param.detach().clone().requires_grad_(True),)
    assert gradcheck(_loss_of(soft_model, [group], batch), inputs, eps=1e-6, atol=1e-5, rtol=1e-3)


def test_adapter_gradients_match_finite_differences(soft_model, batch):
    apply_lora(soft_model, 2)
    soft_model.train()
    with torch.no_grad():
        for module in soft_model.modules():
            if hasattr(module, "lora_B"):
                module.lora_B.normal_(0, 0.1, generator=torch.Generator().manual_seed(1))
    names = ["blocks.0.attn.q_proj.lora_A", "blocks.0.attn.v_proj.lora_B"]
    params = dict(soft_model.named_parameters())
    inputs = tuple(params[n].detach().clone().requires_grad_(True) for n in names)
    assert gradcheck(_loss_of(soft_model, names, batch), inputs, eps=1e-6, atol=1e-5, rtol=1e-3)
