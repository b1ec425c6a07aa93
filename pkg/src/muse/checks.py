"""Gradient-check suite backing the gradcheck command.

Each case builds a deterministic scalar-valued function of one probe tensor;
grad_check compares its taped gradient against central differences.  Random
op inputs are scalarised through a fixed random projection so every output
entry influences the loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor, grad_check

__all__ = [
    "GradCase",
    "model_grad_cases",
    "nn_grad_cases",
    "op_grad_cases",
    "run_op_suite",
]


@dataclass
class GradCase:
    name: str
    # rng -> (f, probe): f is the scalar function, probe the tensor differentiated
    build: Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor]]


def _proj(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=shape)
    return lambda t: T.sum_all(T.mul_const(t, w))


def op_grad_cases() -> list[GradCase]:
    cases: list[GradCase] = []

    def case(name):
        def register(build):
            cases.append(GradCase(name, build))
            return build

        return register

    @case("add.lhs")
    def _(rng):
        b = Tensor(rng.normal(size=(3, 4)))
        p = _proj(rng, (3, 4))
        return lambda x: p(T.add(x, b)), Tensor(rng.normal(size=(3, 4)))

    @case("sub.rhs")
    def _(rng):
        a = Tensor(rng.normal(size=(3, 4)))
        p = _proj(rng, (3, 4))
        return lambda x: p(T.sub(a, x)), Tensor(rng.normal(size=(3, 4)))

    @case("mul.lhs")
    def _(rng):
        b = Tensor(rng.normal(size=(4, 3)))
        p = _proj(rng, (4, 3))
        return lambda x: p(T.mul(x, b)), Tensor(rng.normal(size=(4, 3)))

    @case("neg")
    def _(rng):
        p = _proj(rng, (2, 5))
        return lambda x: p(T.neg(x)), Tensor(rng.normal(size=(2, 5)))

    @case("scale")
    def _(rng):
        s = float(rng.normal())
        p = _proj(rng, (3, 3))
        return lambda x: p(T.scale(x, s)), Tensor(rng.normal(size=(3, 3)))

    @case("add_const")
    def _(rng):
        c = rng.normal(size=(3, 3))
        p = _proj(rng, (3, 3))
        return lambda x: p(T.add_const(x, c)), Tensor(rng.normal(size=(3, 3)))

    @case("mul_const")
    def _(rng):
        c = rng.normal(size=(3, 3))
        p = _proj(rng, (3, 3))
        return lambda x: p(T.mul_const(x, c)), Tensor(rng.normal(size=(3, 3)))

    @case("matmul.lhs")
    def _(rng):
        b = Tensor(rng.normal(size=(4, 5)))
        p = _proj(rng, (3, 5))
        return lambda x: p(T.matmul(x, b)), Tensor(rng.normal(size=(3, 4)))

    @case("matmul.rhs")
    def _(rng):
        a = Tensor(rng.normal(size=(3, 4)))
        p = _proj(rng, (3, 5))
        return lambda x: p(T.matmul(a, x)), Tensor(rng.normal(size=(4, 5)))

    @case("bmm.lhs")
    def _(rng):
        b = Tensor(rng.normal(size=(2, 4, 3)))
        p = _proj(rng, (2, 3, 3))
        return lambda x: p(T.bmm(x, b)), Tensor(rng.normal(size=(2, 3, 4)))

    @case("bmm.rhs")
    def _(rng):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        p = _proj(rng, (2, 3, 3))
        return lambda x: p(T.bmm(a, x)), Tensor(rng.normal(size=(2, 4, 3)))

    @case("transpose2")
    def _(rng):
        p = _proj(rng, (4, 3))
        return lambda x: p(T.transpose2(x)), Tensor(rng.normal(size=(3, 4)))

    @case("permute")
    def _(rng):
        p = _proj(rng, (3, 2, 4))
        return lambda x: p(T.permute(x, (1, 0, 2))), Tensor(rng.normal(size=(2, 3, 4)))

    @case("reshape")
    def _(rng):
        p = _proj(rng, (2, 6))
        return lambda x: p(T.reshape(x, (2, 6))), Tensor(rng.normal(size=(3, 4)))

    @case("take_rows")
    def _(rng):
        p = _proj(rng, (2, 3))
        return lambda x: p(T.take_rows(x, 1, 3)), Tensor(rng.normal(size=(5, 3)))

    @case("concat_rows.lhs")
    def _(rng):
        b = Tensor(rng.normal(size=(2, 3)))
        p = _proj(rng, (5, 3))
        return lambda x: p(T.concat_rows(x, b)), Tensor(rng.normal(size=(3, 3)))

    @case("concat_cols.rhs")
    def _(rng):
        a = Tensor(rng.normal(size=(3, 2)))
        p = _proj(rng, (3, 6))
        return lambda x: p(T.concat_cols(a, x)), Tensor(rng.normal(size=(3, 4)))

    @case("add_rowvec.mat")
    def _(rng):
        v = Tensor(rng.normal(size=4))
        p = _proj(rng, (3, 4))
        return lambda x: p(T.add_rowvec(x, v)), Tensor(rng.normal(size=(3, 4)))

    @case("add_rowvec.vec")
    def _(rng):
        m = Tensor(rng.normal(size=(3, 4)))
        p = _proj(rng, (3, 4))
        return lambda x: p(T.add_rowvec(m, x)), Tensor(rng.normal(size=4))

    @case("add_colvec.vec")
    def _(rng):
        m = Tensor(rng.normal(size=(3, 4)))
        p = _proj(rng, (3, 4))
        return lambda x: p(T.add_colvec(m, x)), Tensor(rng.normal(size=3))

    @case("add_to_rows.mat")
    def _(rng):
        v = Tensor(rng.normal(size=3))
        p = _proj(rng, (5, 3))
        return lambda x: p(T.add_to_rows(x, [1, 4], v)), Tensor(rng.normal(size=(5, 3)))

    @case("add_to_rows.vec")
    def _(rng):
        m = Tensor(rng.normal(size=(5, 3)))
        p = _proj(rng, (5, 3))
        return lambda x: p(T.add_to_rows(m, [0, 2], x)), Tensor(rng.normal(size=3))

    @case("mean_rows")
    def _(rng):
        p = _proj(rng, (4,))
        return lambda x: p(T.mean_rows(x)), Tensor(rng.normal(size=(5, 4)))

    @case("sum_all")
    def _(rng):
        return lambda x: T.sum_all(x), Tensor(rng.normal(size=(3, 4)))

    @case("mean_all")
    def _(rng):
        return lambda x: T.mean_all(x), Tensor(rng.normal(size=(3, 4)))

    @case("gelu")
    def _(rng):
        p = _proj(rng, (3, 4))
        return lambda x: p(T.gelu(x)), Tensor(rng.normal(size=(3, 4)))

    @case("softmax_rows.2d")
    def _(rng):
        p = _proj(rng, (3, 5))
        return lambda x: p(T.softmax_rows(x)), Tensor(rng.normal(size=(3, 5)))

    @case("softmax_rows.3d")
    def _(rng):
        p = _proj(rng, (2, 3, 4))
        return lambda x: p(T.softmax_rows(x)), Tensor(rng.normal(size=(2, 3, 4)))

    @case("logsumexp_axis0")
    def _(rng):
        p = _proj(rng, (1, 4))
        return lambda x: p(T.logsumexp_axis0(x)), Tensor(rng.normal(size=(5, 4)))

    @case("logsumexp_all")
    def _(rng):
        return lambda x: T.logsumexp_all(x), Tensor(rng.normal(size=(4, 4)))

    @case("layer_norm.x")
    def _(rng):
        g = Tensor(rng.normal(size=5))
        b = Tensor(rng.normal(size=5))
        p = _proj(rng, (3, 5))
        return lambda x: p(T.layer_norm(x, g, b)), Tensor(rng.normal(size=(3, 5)))

    @case("layer_norm.gamma")
    def _(rng):
        m = Tensor(rng.normal(size=(3, 5)))
        b = Tensor(rng.normal(size=5))
        p = _proj(rng, (3, 5))
        return lambda x: p(T.layer_norm(m, x, b)), Tensor(rng.normal(size=5))

    @case("layer_norm.beta")
    def _(rng):
        m = Tensor(rng.normal(size=(3, 5)))
        g = Tensor(rng.normal(size=5))
        p = _proj(rng, (3, 5))
        return lambda x: p(T.layer_norm(m, g, x)), Tensor(rng.normal(size=5))

    @case("cross_entropy_logits")
    def _(rng):
        targets = [int(t) for t in rng.integers(0, 4, size=5)]
        return (
            lambda x: T.cross_entropy_logits(x, targets),
            Tensor(rng.normal(size=(5, 4))),
        )

    @case("cross_entropy_logits.masked")
    def _(rng):
        targets = [int(t) for t in rng.integers(0, 4, size=5)]
        mask = [True, False, True, True, False]
        return (
            lambda x: T.cross_entropy_logits(x, targets, mask),
            Tensor(rng.normal(size=(5, 4))),
        )

    @case("embedding_lookup")
    def _(rng):
        ids = [int(t) for t in rng.integers(0, 6, size=4)] + [2, 2]
        p = _proj(rng, (6, 3))
        return lambda x: p(T.embedding_lookup(ids, x)), Tensor(rng.normal(size=(6, 3)))

    @case("gather_1d")
    def _(rng):
        p = _proj(rng, (4,))
        return lambda x: p(T.gather_1d(x, [0, 2, 2, 5])), Tensor(rng.normal(size=6))

    @case("gather_rows_cols")
    def _(rng):
        p = _proj(rng, (3,))
        return (
            lambda x: p(T.gather_rows_cols(x, [0, 1, 1], [2, 0, 0])),
            Tensor(rng.normal(size=(3, 4))),
        )

    return cases


def _attention_weights(rng: np.random.Generator, d: int, heads: int) -> nn.AttentionWeights:
    s = 1.0 / np.sqrt(d)
    return nn.AttentionWeights(
        query=Tensor(rng.normal(0, s, (d, d))),
        key=Tensor(rng.normal(0, s, (d, d))),
        value=Tensor(rng.normal(0, s, (d, d))),
        output=Tensor(rng.normal(0, s, (d, d))),
        heads=heads,
        ln_gamma=Tensor(np.ones(d) + 0.1 * rng.normal(size=d)),
        ln_beta=Tensor(0.1 * rng.normal(size=d)),
    )


def _ffn_weights(rng: np.random.Generator, d: int, hidden: int) -> nn.FfnWeights:
    return nn.FfnWeights(
        w1=Tensor(rng.normal(0, 1.0 / np.sqrt(d), (d, hidden))),
        w2=Tensor(rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, d))),
        ln_gamma=Tensor(np.ones(d) + 0.1 * rng.normal(size=d)),
        ln_beta=Tensor(0.1 * rng.normal(size=d)),
    )


def nn_grad_cases() -> list[GradCase]:
    """Composite sub-layer checks: attention and feed-forward blocks."""
    cases: list[GradCase] = []
    d, heads, n = 6, 2, 5

    def attention_wrt(attr):
        def build(rng):
            w = _attention_weights(rng, d, heads)
            x = Tensor(rng.normal(size=(n, d)))
            p = _proj(rng, (n, d))
            if attr == "x":
                probe = x

                def f(t):
                    return p(nn.multi_head_attention(t, w)[0])

            else:
                probe = getattr(w, attr)

                def f(t):
                    setattr(w, attr, t)
                    return p(nn.multi_head_attention(x, w)[0])

            return f, probe

        return build

    for attr in ("x", "query", "key", "value", "output", "ln_gamma", "ln_beta"):
        cases.append(GradCase(f"multi_head_attention.{attr}", attention_wrt(attr)))

    def ffn_wrt(attr):
        def build(rng):
            w = _ffn_weights(rng, d, 2 * d)
            x = Tensor(rng.normal(size=(n, d)))
            p = _proj(rng, (n, d))
            if attr == "x":
                probe = x

                def f(t):
                    return p(nn.ffn_block(t, w))

            else:
                probe = getattr(w, attr)

                def f(t):
                    setattr(w, attr, t)
                    return p(nn.ffn_block(x, w))

            return f, probe

        return build

    for attr in ("x", "w1", "w2", "ln_gamma", "ln_beta"):
        cases.append(GradCase(f"ffn_block.{attr}", ffn_wrt(attr)))
    return cases


def _swap_tensor(root, old, new) -> bool:
    """Replace the field holding `old` (by identity) anywhere in a dataclass
    tree; lists are searched element-wise.  Returns False if absent."""
    if dataclasses.is_dataclass(root) and not isinstance(root, type):
        for field in dataclasses.fields(root):
            value = getattr(root, field.name)
            if value is old:
                setattr(root, field.name, new)
                return True
            if _swap_tensor(value, old, new):
                return True
    elif isinstance(root, list):
        for index, value in enumerate(root):
            if value is old:
                root[index] = new
                return True
            if _swap_tensor(value, old, new):
                return True
    return False


# one name per distinct graph region: embeddings, encoder layer, projection,
# both noise MLPs, both decoders, cls rows, both exchange layers, fusion,
# and the task heads
_MODEL_CASE_PARAMS = {
    "mner": (
        "text.embed", "text.attn.query", "image.proj", "noise_image.w1",
        "caption.w2", "cls.text", "cross.1.attn.query", "cross.2.ffn.w1",
        "fuse.weight", "crf.emission_weight", "crf.transitions",
    ),
    "msa": (
        "text.pos", "noise_text.w1", "imagegen.w1", "cls.image",
        "cross.1.ffn.ln_gamma", "cross.2.attn.output", "fuse.bias",
        "head.weight", "head.bias",
    ),
}


def _micro_model(task: str, seed: int):
    from . import harness
    from .config import RunConfig
    from .data import SynthExample

    config = RunConfig(
        task=task, d=8, num_layers=2, heads=2, mu=1, eta=2, theta=0.25,
        dropout=0.0, head_dropout=0.0, noise_std=0.0,
        vocab_size=16, max_seq_len=8, qlevels=3, seed=seed,
    )
    model = harness.build_model(config)
    rng = np.random.default_rng(seed)
    tokens = [int(t) for t in rng.integers(0, 16, size=4)]
    image = rng.random((8, 8))
    if task == "mner":
        example = SynthExample(tokens=tokens, image=image, mner_labels=[1, 2, 0, 3])
    else:
        example = SynthExample(tokens=tokens, image=image, msa_label=1)
    return model, example


def model_grad_cases() -> list[GradCase]:
    """End-to-end checks: d=8, two layers, four tokens, every loss term live.

    Dropout and embedding noise are disabled so the training-mode loss is a
    deterministic function of each probed parameter.
    """
    from . import harness

    cases: list[GradCase] = []

    def model_case(task, name):
        def build(rng):
            model, example = _micro_model(task, int(rng.integers(1 << 30)))
            current = [model.named_parameters()[name]]

            def f(t):
                if not _swap_tensor(model, current[0], t):
                    raise KeyError(name)
                current[0] = t
                return harness.forward_example(model, example, training=True).loss

            return f, Tensor(current[0].data.copy())

        return build

    for task, names in _MODEL_CASE_PARAMS.items():
        for name in names:
            cases.append(GradCase(f"model.{task}.{name}", model_case(task, name)))
    return cases


def run_op_suite(
    cases: Iterable[GradCase] | None = None,
    seeds: Iterable[int] = range(20),
    h: float = 1e-3,
) -> dict[str, float]:
    """Max relative gradient error per case across seeds."""
    if cases is None:
        cases = op_grad_cases() + nn_grad_cases()
    errors: dict[str, float] = {}
    for c in cases:
        worst = 0.0
        for seed in seeds:
            f, probe = c.build(np.random.default_rng(seed))
            worst = max(worst, grad_check(f, probe, h))
        errors[c.name] = worst
    return errors
