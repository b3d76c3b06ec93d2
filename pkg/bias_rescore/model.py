# stdlib
import hashlib
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Literal, NamedTuple, Sequence

# 3p
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

# project
from bias_rescore.prompting import Prompt
from bias_rescore.tokenizer import Vocab


log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
IGNORE_INDEX = -100
N_CLASSES = 4
EPS = 1e-20


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # Filled in from the vocab when training starts.
    vocab_size: int | None = None
    d_model: int = Field(default=128, gt=0)
    n_layers: int = Field(default=2, gt=0)
    n_heads: int = Field(default=4, gt=0)
    d_ff: int = Field(default=512, gt=0)
    max_seq_len: int = Field(default=512, gt=0)
    n_classes: Literal[4] = N_CLASSES
    gumbel_temperature: float = Field(default=1.0, gt=0)
    gumbel_hard: bool = True
    task_weight_alpha: float = Field(default=0.7, ge=0, le=1)
    lora_rank: int = Field(default=0, ge=0)
    dropout: float = Field(default=0.1, ge=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        return self


@dataclass
class ForwardOutput:
    token_logits: torch.Tensor
    class_logits: torch.Tensor
    backbone_hidden: torch.Tensor
    # One [batch, n_heads, T, T] tensor per layer when retained.
    attention_weights: list[torch.Tensor] = field(default_factory=list)


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    token: torch.Tensor
    klass: torch.Tensor


def sinusoidal_positions(max_len: int, d_model: int) -> torch.Tensor:
    position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div_term = torch.exp(
        torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model)
    )
    pe = torch.zeros(max_len, d_model)
    pe[:, 0::2] = torch.sin(position * div_term)
    pe[:, 1::2] = torch.cos(position * div_term)
    return pe


def gumbel_softmax(
    logits: torch.Tensor,
    temperature: float = 1.0,
    hard: bool = True,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Reparameterized sample from a Gumbel-Softmax over the last dim.

    With `hard`, the forward value is an exact one-hot at the argmax of the
    soft sample while gradients flow through the soft sample.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    u = torch.rand(
        logits.shape, generator=generator, dtype=logits.dtype, device=logits.device
    )
    gumbel_noise = -torch.log(-torch.log(u + EPS) + EPS)
    y = F.softmax((logits + gumbel_noise) / temperature, dim=-1)
    if not hard:
        return y
    index = y.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y).scatter_(-1, index, 1.0)
    # y - y.detach() is exactly zero, so the value stays one-hot.
    return y_hard + (y - y.detach())


class LoRALinear(nn.Module):
    """Frozen nn.Linear plus a trainable low-rank update B @ A."""

    def __init__(self, base: nn.Linear, rank: int, scaling: float = 1.0):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = scaling
        factory = {"dtype": base.weight.dtype, "device": base.weight.device}
        self.lora_A = nn.Parameter(torch.zeros(rank, base.in_features, **factory))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, **factory))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        for p in self.base.parameters():
            p.requires_grad = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_A.T) @ self.lora_B.T * self.scaling


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.d_head = config.d_model // config.n_heads
        self.q_proj: nn.Module = nn.Linear(config.d_model, config.d_model)
        self.k_proj = nn.Linear(config.d_model, config.d_model)
        self.v_proj: nn.Module = nn.Linear(config.d_model, config.d_model)
        self.out_proj = nn.Linear(config.d_model, config.d_model)
        self.attn_dropout = nn.Dropout(config.dropout)
        self.resid_dropout = nn.Dropout(config.dropout)
        mask = torch.tril(torch.ones(config.max_seq_len, config.max_seq_len, dtype=torch.bool))
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, C = x.shape
        q = self.q_proj(x).view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(x).view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(x).view(B, T, self.n_heads, self.d_head).transpose(1, 2)

        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~self.causal_mask[:T, :T], float("-inf"))
        weights = F.softmax(scores, dim=-1)

        out = self.attn_dropout(weights) @ v
        out = out.transpose(1, 2).contiguous().view(B, T, C)
        return self.resid_dropout(self.out_proj(out)), weights


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.ff = nn.Sequential(
            nn.Linear(config.d_model, config.d_ff),
            nn.GELU(),
            nn.Linear(config.d_ff, config.d_model),
            nn.Dropout(config.dropout),
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn_out, weights = self.attn(self.ln1(x))
        x = x + attn_out
        x = x + self.ff(self.ln2(x))
        return x, weights


class MultiTaskLM(nn.Module):
    """Decoder-only LM with a next-token head and a next-token class head.

    The class head reads the final backbone hidden state. A class embedding,
    selected by a Gumbel-Softmax sample in training and by argmax in eval
    mode, is added to that hidden state before the token head.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size is None:
            raise ValueError("ModelConfig.vocab_size must be set before building a model")
        if config.lora_rank:
            raise ValueError("build the base model with lora_rank=0, then call apply_lora")
        self.config = config
        d = config.d_model

        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.tok_emb = nn.Embedding(config.vocab_size, d)
            self.register_buffer(
                "pos_enc", sinusoidal_positions(config.max_seq_len, d), persistent=False
            )
            self.drop = nn.Dropout(config.dropout)
            self.blocks = nn.ModuleList([Block(config) for _ in range(config.n_layers)])
            self.ln_f = nn.LayerNorm(d)
            self.class_head = nn.Linear(d, config.n_classes)
            self.class_emb = nn.Embedding(config.n_classes, d)
            self.token_head = nn.Linear(d, config.vocab_size)
            self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    @property
    def has_adapters(self) -> bool:
        return any(isinstance(m, LoRALinear) for m in self.modules())

    def forward(
        self,
        ids: torch.Tensor,
        retain_attention: bool = False,
        generator: torch.Generator | None = None,
    ) -> ForwardOutput:
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids.unsqueeze(0)
        T = ids.shape[1]
        if T > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}"
            )

        x = self.drop(self.tok_emb(ids) + self.pos_enc[:T].to(self.tok_emb.weight.dtype))
        attention = []
        for block in self.blocks:
            x, weights = block(x)
            if retain_attention:
                attention.append(weights.detach())
        hidden = self.ln_f(x)

        class_logits = self.class_head(hidden)
        if self.training:
            class_weights = gumbel_softmax(
                class_logits,
                self.config.gumbel_temperature,
                hard=self.config.gumbel_hard,
                generator=generator,
            )
        else:
            class_weights = F.one_hot(
                class_logits.argmax(dim=-1), self.config.n_classes
            ).to(hidden.dtype)
        token_logits = self.token_head(hidden + class_weights @ self.class_emb.weight)

        if squeeze:
            return ForwardOutput(
                token_logits=token_logits[0],
                class_logits=class_logits[0],
                backbone_hidden=hidden[0],
                attention_weights=[w[0] for w in attention],
            )
        return ForwardOutput(
            token_logits=token_logits,
            class_logits=class_logits,
            backbone_hidden=hidden,
            attention_weights=attention,
        )


def multitask_loss(
    out: ForwardOutput,
    token_targets: torch.Tensor,
    class_targets: torch.Tensor,
    alpha: float,
    class_weights: Sequence[float],
) -> LossBreakdown:
    """alpha * L_token + (1 - alpha) * L_class; IGNORE_INDEX targets are skipped."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if token_targets.shape != out.token_logits.shape[:-1]:
        raise ValueError(
            f"token targets {tuple(token_targets.shape)} do not match logits "
            f"{tuple(out.token_logits.shape[:-1])}"
        )
    if class_targets.shape != out.class_logits.shape[:-1]:
        raise ValueError(
            f"class targets {tuple(class_targets.shape)} do not match logits "
            f"{tuple(out.class_logits.shape[:-1])}"
        )
    if len(class_weights) != out.class_logits.shape[-1]:
        raise ValueError(f"expected {out.class_logits.shape[-1]} class weights")

    vocab_size = out.token_logits.shape[-1]
    l_token = F.cross_entropy(
        out.token_logits.reshape(-1, vocab_size),
        token_targets.reshape(-1),
        ignore_index=IGNORE_INDEX,
    )
    weight = torch.tensor(class_weights, dtype=out.class_logits.dtype)
    l_class = F.cross_entropy(
        out.class_logits.reshape(-1, out.class_logits.shape[-1]),
        class_targets.reshape(-1),
        weight=weight,
        ignore_index=IGNORE_INDEX,
    )
    total = alpha * l_token + (1 - alpha) * l_class
    return LossBreakdown(total=total, token=l_token, klass=l_class)


def apply_lora(model: MultiTaskLM, rank: int) -> MultiTaskLM:
    """Freeze the model and wrap every attention query/value projection with LoRA."""
    if rank < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {rank}")
    if model.has_adapters:
        raise ValueError("LoRA adapters already applied")

    for p in model.parameters():
        p.requires_grad = False
    with torch.random.fork_rng():
        torch.manual_seed(model.config.seed + 1)
        for block in model.blocks:
            block.attn.q_proj = LoRALinear(block.attn.q_proj, rank)
            block.attn.v_proj = LoRALinear(block.attn.v_proj, rank)
    model.config = model.config.model_copy(update={"lora_rank": rank})
    log.info(
        f"Applied LoRA rank {rank}: {count_parameters(model, trainable_only=True)} "
        "trainable parameters"
    )
    return model


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(
        p.numel() for p in model.parameters() if p.requires_grad or not trainable_only
    )


@contextmanager
def eval_mode(model: nn.Module) -> Iterator[nn.Module]:
    was_training = model.training
    model.eval()
    try:
        with torch.inference_mode():
            yield model
    finally:
        model.train(was_training)


def token_log_probs(model: MultiTaskLM, prompt: Prompt) -> list[float]:
    """log P(token_j | tokens < j) for every token j of the input region."""
    ids = torch.tensor(prompt.ids, dtype=torch.long)
    start, end = prompt.input
    positions = torch.arange(start, end)
    with eval_mode(model):
        log_probs = F.log_softmax(model(ids).token_logits, dim=-1)
        return log_probs[positions - 1, ids[positions]].tolist()


def sentence_log_likelihood(model: MultiTaskLM, prompt: Prompt) -> float:
    return math.fsum(token_log_probs(model, prompt))


def state_checksum(state_dict: dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for key in sorted(state_dict):
        digest.update(key.encode())
        digest.update(state_dict[key].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class Checkpoint:
    model: MultiTaskLM
    vocab: Vocab
    step: int = 0
    epoch: int = 0
    optimizer_state: dict[str, Any] | None = None


def save_checkpoint(
    path: str | Path,
    model: MultiTaskLM,
    vocab: Vocab,
    step: int = 0,
    epoch: int = 0,
    optimizer_state: dict[str, Any] | None = None,
) -> str:
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    checksum = state_checksum(state)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": model.config.model_dump(),
            "vocab": vocab.to_json(),
            "state_dict": state,
            "step": step,
            "epoch": epoch,
            "optimizer_state": optimizer_state,
            "checksum": checksum,
        },
        path,
    )
    log.info(f"Saved checkpoint to {path} (step {step}, sha256 {checksum[:12]})")
    return checksum


def load_checkpoint(path: str | Path) -> Checkpoint:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")

    state = payload["state_dict"]
    if state_checksum(state) != payload["checksum"]:
        raise ValueError(f"checkpoint {path} failed its integrity check")

    config = ModelConfig.model_validate(payload["model_config"])
    model = MultiTaskLM(config.model_copy(update={"lora_rank": 0}))
    if config.lora_rank:
        apply_lora(model, config.lora_rank)

    expected = model.state_dict()
    for key, tensor in expected.items():
        if key not in state:
            raise ValueError(f"checkpoint is missing parameter {key}")
        if tuple(state[key].shape) != tuple(tensor.shape):
            raise ValueError(
                f"parameter {key} has shape {tuple(state[key].shape)}, "
                f"config expects {tuple(tensor.shape)}"
            )
    unexpected = sorted(set(state) - set(expected))
    if unexpected:
        raise ValueError(f"checkpoint has unexpected parameters: {unexpected}")
    model.load_state_dict(state)
    model.eval()

    return Checkpoint(
        model=model,
        vocab=Vocab.from_json(payload["vocab"]),
        step=payload.get("step", 0),
        epoch=payload.get("epoch", 0),
        optimizer_state=payload.get("optimizer_state"),
    )
