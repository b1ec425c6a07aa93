"""Training and evaluation around the exchange model.

One training run is a single thread over per-example tapes: the batch
gradient is the mean of example gradients, applied with bias-corrected
Adam.  All randomness flows from three named streams keyed off the run
seed, so runs are bit-reproducible and exchange-window settings that
select nothing reproduce the no-exchange trajectory exactly.
"""

import csv
import dataclasses
import json
import os
import time
import warnings

import numpy as np

from muse import codec
from muse import crosstransformer as ct
from muse import data as D
from muse import heads
from muse import nn
from muse import tensor as T
from muse.config import RunConfig, config_from_dict, config_hash
from muse.tensor import ConfigError, ShapeError, Tape, Tensor, backward_pass

# stream tags: one per independent consumer of randomness
STREAM_INIT = 0xA
STREAM_SHUFFLE = 0xB
STREAM_NOISE = 0xD

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """Raised when training produces a non-finite loss."""


def stream_rng(seed, *tags):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *tags])))


# ---------------------------------------------------------------------------
# loss combination


@dataclasses.dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError("%s must be finite and non-negative, got %r" % (name, value))


def total_loss(l_task, l_it, l_ti, weights):
    """l_task + alpha*l_it + beta*l_ti as one taped scalar."""
    return T.add(
        T.add(l_task, T.mul_const(l_it, weights.alpha)),
        T.mul_const(l_ti, weights.beta),
    )


# ---------------------------------------------------------------------------
# model container


@dataclasses.dataclass
class MuseModel:
    config: RunConfig
    text_encoder: codec.TextEncoderParams
    image_encoder: codec.ImageEncoderParams
    noise_text: codec.NoiseMlpParams
    noise_image: codec.NoiseMlpParams
    caption: codec.CaptionDecoderParams
    imagegen: codec.ImageGenParams
    cls_text: Tensor
    cls_image: Tensor
    layers: list
    fuse_weight: Tensor
    fuse_bias: Tensor
    emission_weight: Tensor = None
    emission_bias: Tensor = None
    crf: heads.CrfParams = None
    classifier: heads.ClassifierParams = None

    def exchange_config(self):
        cfg = self.config
        return ct.ExchangeConfig(
            theta=cfg.theta, mu=cfg.mu, eta=cfg.eta,
            num_layers=cfg.num_layers, heads=cfg.heads, dim=cfg.d,
        )

    def named_parameters(self):
        """Deterministic name -> Tensor map; order fixes checkpoint offsets."""
        params = {
            "text.embed": self.text_encoder.embed,
            "text.pos": self.text_encoder.pos,
        }
        layer = self.text_encoder.layer
        params.update(_layer_params("text", layer))
        params.update({
            "image.proj": self.image_encoder.proj,
            "image.bias": self.image_encoder.bias,
            "image.pos": self.image_encoder.pos,
        })
        for tag, mlp in (("noise_text", self.noise_text), ("noise_image", self.noise_image)):
            params.update({
                "%s.w1" % tag: mlp.w1, "%s.b1" % tag: mlp.b1,
                "%s.w2" % tag: mlp.w2, "%s.b2" % tag: mlp.b2,
            })
        params.update({
            "caption.embed": self.caption.embed, "caption.bos": self.caption.bos,
            "caption.w1": self.caption.w1, "caption.b1": self.caption.b1,
            "caption.w2": self.caption.w2, "caption.b2": self.caption.b2,
            "imagegen.w1": self.imagegen.w1, "imagegen.b1": self.imagegen.b1,
            "imagegen.w2": self.imagegen.w2, "imagegen.b2": self.imagegen.b2,
            "cls.text": self.cls_text, "cls.image": self.cls_image,
        })
        for index, weights in enumerate(self.layers, start=1):
            params.update(_layer_params("cross.%d" % index, weights))
        params.update({"fuse.weight": self.fuse_weight, "fuse.bias": self.fuse_bias})
        if self.config.task == "mner":
            params.update({
                "crf.emission_weight": self.emission_weight,
                "crf.emission_bias": self.emission_bias,
                "crf.transitions": self.crf.transitions,
                "crf.start": self.crf.start,
                "crf.end": self.crf.end,
            })
        else:
            params.update({"head.weight": self.classifier.weight, "head.bias": self.classifier.bias})
        return params

    def zero_grads(self):
        for param in self.named_parameters().values():
            param.zero_grad()


def _layer_params(prefix, weights):
    return {
        "%s.attn.query" % prefix: weights.attn.query,
        "%s.attn.key" % prefix: weights.attn.key,
        "%s.attn.value" % prefix: weights.attn.value,
        "%s.attn.output" % prefix: weights.attn.output,
        "%s.attn.ln_gamma" % prefix: weights.attn.ln_gamma,
        "%s.attn.ln_beta" % prefix: weights.attn.ln_beta,
        "%s.ffn.w1" % prefix: weights.ffn.w1,
        "%s.ffn.w2" % prefix: weights.ffn.w2,
        "%s.ffn.ln_gamma" % prefix: weights.ffn.ln_gamma,
        "%s.ffn.ln_beta" % prefix: weights.ffn.ln_beta,
    }


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _make_layer(d, heads_count, hidden, rng, depth):
    # the projections feeding a residual sum are scaled by 1/sqrt(2*depth):
    # at default size the raw branches dwarf the residual path and are nearly
    # position-independent, so stacking them erases token identity before
    # training starts
    shrink = 1.0 / np.sqrt(2.0 * depth)
    attn = nn.AttentionWeights(
        query=nn.kaiming_init((d, d), d, rng),
        key=nn.kaiming_init((d, d), d, rng),
        value=nn.kaiming_init((d, d), d, rng),
        output=nn.kaiming_init((d, d), d, rng),
        heads=heads_count,
        ln_gamma=_ones(d),
        ln_beta=_zeros(d),
    )
    ffn = nn.FfnWeights(
        w1=nn.kaiming_init((d, hidden), d, rng),
        w2=nn.kaiming_init((hidden, d), hidden, rng),
        ln_gamma=_ones(d),
        ln_beta=_zeros(d),
    )
    attn.output.data *= shrink
    ffn.w2.data *= shrink
    return ct.LayerWeights(attn=attn, ffn=ffn)


def build_model(config):
    """Allocate and initialise every parameter; draw order is fixed."""
    config.validate()
    d, v = config.d, config.vocab_size
    hidden = 4 * d
    rng = stream_rng(config.seed, STREAM_INIT)

    depth = config.num_layers + 1
    text_encoder = codec.TextEncoderParams(
        embed=nn.kaiming_init((v, d), d, rng),
        pos=nn.kaiming_init((config.max_seq_len, d), d, rng),
        layer=_make_layer(d, config.heads, hidden, rng, depth),
    )
    image_encoder = codec.ImageEncoderParams(
        proj=nn.kaiming_init((codec.PATCH_DIM, d), codec.PATCH_DIM, rng),
        bias=_zeros(d),
        pos=nn.kaiming_init((codec.NUM_PATCHES, d), d, rng),
    )
    noise_text = _make_noise_mlp(d, rng)
    noise_image = _make_noise_mlp(d, rng)
    caption = codec.CaptionDecoderParams(
        embed=nn.kaiming_init((v, d), d, rng),
        bos=nn.kaiming_init((d,), d, rng),
        w1=nn.kaiming_init((d, d), d, rng),
        b1=_zeros(d),
        w2=nn.kaiming_init((d, v), d, rng),
        b2=_zeros(v),
    )
    imagegen = codec.ImageGenParams(
        w1=nn.kaiming_init((d, d), d, rng),
        b1=_zeros(d),
        w2=nn.kaiming_init((d, codec.GRID_SIZE ** 2 * config.qlevels), d, rng),
        b2=_zeros(codec.GRID_SIZE ** 2 * config.qlevels),
    )
    cls_text = nn.kaiming_init((d,), d, rng)
    cls_image = nn.kaiming_init((d,), d, rng)
    layers = [
        _make_layer(d, config.heads, hidden, rng, depth)
        for _ in range(config.num_layers)
    ]
    fuse_weight = nn.kaiming_init((2 * d, d), 2 * d, rng)
    fuse_bias = _zeros(d)

    model = MuseModel(
        config=config,
        text_encoder=text_encoder,
        image_encoder=image_encoder,
        noise_text=noise_text,
        noise_image=noise_image,
        caption=caption,
        imagegen=imagegen,
        cls_text=cls_text,
        cls_image=cls_image,
        layers=layers,
        fuse_weight=fuse_weight,
        fuse_bias=fuse_bias,
    )
    if config.task == "mner":
        scheme = D.mner_scheme()
        model.emission_weight = nn.kaiming_init((d, scheme.size), d, rng)
        model.emission_bias = _zeros(scheme.size)
        # zero potentials start the forward algorithm at the uniform prior
        model.crf = heads.CrfParams(
            transitions=_zeros((scheme.size, scheme.size)),
            start=_zeros(scheme.size),
            end=_zeros(scheme.size),
        )
    else:
        model.classifier = heads.ClassifierParams(
            weight=nn.kaiming_init((d, D.NUM_SENTIMENT_CLASSES), d, rng),
            bias=_zeros(D.NUM_SENTIMENT_CLASSES),
        )
    return model


def _make_noise_mlp(d, rng):
    return codec.NoiseMlpParams(
        w1=nn.kaiming_init((d, d), d, rng),
        b1=_zeros(d),
        w2=nn.kaiming_init((d, d), d, rng),
        b2=_zeros(d),
    )


# ---------------------------------------------------------------------------
# forward pass with variant gating


@dataclasses.dataclass
class ForwardResult:
    loss: Tensor
    l_task: Tensor
    l_it: Tensor
    l_ti: Tensor
    fused: Tensor
    emissions: Tensor = None
    logits: Tensor = None
    trace: ct.ExchangeTrace = None


def _single_stream(stream, layers, dropout_rate, training, rng):
    """Plain encoder stack for the unimodal variants: no exchange partner."""
    for weights in layers:
        stream, _ = nn.multi_head_attention(stream, weights.attn, dropout_rate, training, rng)
        stream = nn.ffn_block(stream, weights.ffn, dropout_rate, training, rng)
    return stream


def forward_example(model, example, training=False, rng=None, collect_trace=False):
    cfg = model.config
    variant = cfg.variant
    uses_text = variant != "only_image"
    uses_image = variant != "only_text"
    both = uses_text and uses_image
    # the two decoder losses each need one modality as input and the other
    # as target, so any unimodal variant drops both
    aux_it = training and both and variant not in ("task_only", "no_caption_loss")
    aux_ti = training and both and variant not in ("task_only", "no_generation_loss")
    noise_std = cfg.noise_std if cfg.noise_enabled else 0.0

    text_embeddings = image_embeddings = None
    if uses_text:
        text_embeddings = codec.encode_text(
            example.tokens, model.text_encoder, cfg.dropout, training, rng
        )
    if uses_image:
        image_embeddings = codec.encode_image(example.image, model.image_encoder)

    zero = Tensor(0.0)
    l_it = l_ti = zero
    if aux_it:
        noised = codec.inject_noise(image_embeddings, noise_std, model.noise_image, rng, training)
        _, l_it = codec.decode_text_captioning(noised, example.tokens, model.caption)
    if aux_ti:
        noised = codec.inject_noise(text_embeddings, noise_std, model.noise_text, rng, training)
        _, l_ti = codec.decode_image_generation(
            noised, example.image, model.imagegen, cfg.qlevels
        )

    trace = None
    if uses_text:
        text_stream = ct.prepend_cls(text_embeddings, model.cls_text)
    if uses_image:
        image_stream = ct.prepend_cls(image_embeddings, model.cls_image)
    if variant == "no_crosstransformer":
        text_out = text_stream
        image_out = image_stream
    elif both:
        text_out, image_out, trace = ct.cross_forward(
            text_stream, image_stream, model.layers, model.exchange_config(),
            cfg.dropout, training, rng, collect_maps=collect_trace,
        )
    elif uses_text:
        text_out = _single_stream(text_stream, model.layers, cfg.dropout, training, rng)
    else:
        image_out = _single_stream(image_stream, model.layers, cfg.dropout, training, rng)

    # fusion needs equal row counts: keep the cls row plus the first
    # text-length patch rows of the longer image stream
    if both:
        rows = text_out.shape[0]
        fused = ct.fuse_outputs(
            text_out, T.take_rows(image_out, 0, rows), model.fuse_weight, model.fuse_bias
        )
    elif uses_text:
        blank = Tensor(np.zeros((text_out.shape[0], cfg.d)))
        fused = ct.fuse_outputs(text_out, blank, model.fuse_weight, model.fuse_bias)
    else:
        blank = Tensor(np.zeros((image_out.shape[0], cfg.d)))
        fused = ct.fuse_outputs(blank, image_out, model.fuse_weight, model.fuse_bias)

    emissions = logits = None
    if cfg.task == "mner":
        token_rows = T.take_rows(fused, 1, 1 + len(example.tokens))
        dropped = nn.dropout_mask(token_rows, cfg.head_dropout, training, rng)
        emissions = T.add_rowvec(T.matmul(dropped, model.emission_weight), model.emission_bias)
        l_task = heads.crf_log_likelihood(emissions, example.mner_labels, model.crf)
    else:
        logits = heads.classify_sentiment(
            fused, model.classifier, cfg.head_dropout, training, rng
        )
        l_task = T.cross_entropy_logits(logits, [example.msa_label])

    loss = total_loss(l_task, l_it, l_ti, LossWeights(cfg.alpha, cfg.beta))
    return ForwardResult(
        loss=loss, l_task=l_task, l_it=l_it, l_ti=l_ti, fused=fused,
        emissions=emissions, logits=logits, trace=trace,
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclasses.dataclass
class AdamState:
    step: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)


def adam_step(named_params, state, lr, crf_lr=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam over all params that received a gradient."""
    state.step += 1
    step = state.step
    for name, param in named_params.items():
        grad = param.grad
        if grad is None:
            continue
        if grad.shape != param.data.shape:
            raise ShapeError(
                "gradient shape %r does not match %s shape %r"
                % (grad.shape, name, param.data.shape)
            )
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        else:
            v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        rate = crf_lr if crf_lr is not None and name.startswith("crf.") else lr
        param.data = param.data - rate * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# evaluation


def predict_example(model, example):
    """Deterministic prediction: dropout and noise off."""
    result = forward_example(model, example, training=False)
    if model.config.task == "mner":
        return heads.crf_viterbi_decode(result.emissions, model.crf)
    return int(np.argmax(result.logits.data[0]))


def evaluate_model(model, dataset):
    cfg = model.config
    if cfg.task == "mner":
        scheme = D.mner_scheme()
        preds, golds = [], []
        for example in dataset:
            preds.append(predict_example(model, example))
            golds.append(example.mner_labels)
        precision, recall, f1 = D.corpus_span_f1(preds, golds, scheme)
        return {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "trigger_type_accuracy": D.trigger_type_accuracy(preds, golds, scheme),
            "metric": f1,
        }
    hits = 0
    confusion = np.zeros((D.NUM_SENTIMENT_CLASSES, D.NUM_SENTIMENT_CLASSES), dtype=int)
    for example in dataset:
        pred = predict_example(model, example)
        confusion[example.msa_label, pred] += 1
        hits += pred == example.msa_label
    accuracy = hits / len(dataset)
    return {
        "accuracy": accuracy,
        "macro_f1": _macro_f1(confusion),
        "metric": accuracy,
    }


def _macro_f1(confusion):
    scores = []
    for klass in range(confusion.shape[0]):
        tp = confusion[klass, klass]
        predicted = confusion[:, klass].sum()
        golden = confusion[klass, :].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / golden if golden else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class EpochRow:
    epoch: int
    train_loss: float
    l_task: float
    l_it: float
    l_ti: float
    val_metric: float
    seconds: float


@dataclasses.dataclass
class TrainResult:
    model: MuseModel
    best_epoch: int
    best_val_metric: float
    test_metrics: dict
    log_rows: list
    checkpoint_path: str
    log_path: str


def _first_nonfinite(tape):
    for name, out, _inputs, _backward in tape.nodes:
        if not np.all(np.isfinite(out.data)):
            return name
    return None


def load_splits(data_dir, task):
    paths = {name: os.path.join(data_dir, "%s.jsonl" % name) for name in ("train", "val", "test")}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise ConfigError("data_dir is missing %s" % missing[0])
    return D.DatasetSplits(
        train=D.load_jsonl(paths["train"], task),
        val=D.load_jsonl(paths["val"], task),
        test=D.load_jsonl(paths["test"], task),
    )


def train(config, splits=None):
    """Full training run: returns final metrics, checkpoint, per-epoch log."""
    config.validate()
    if splits is None:
        splits = load_splits(config.data_dir, config.task)
    os.makedirs(config.out_dir, exist_ok=True)
    checkpoint_path = os.path.join(config.out_dir, "best.ckpt")
    log_path = os.path.join(config.out_dir, "log.csv")

    model = build_model(config)
    named = model.named_parameters()
    state = AdamState()
    noise_rng = stream_rng(config.seed, STREAM_NOISE)

    best_val = float("-inf")
    best_epoch = 0
    rows = []
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        shuffle_rng = stream_rng(config.seed, STREAM_SHUFFLE, epoch)
        batches = D.make_batches(splits.train, config.batch_size, shuffle_rng)
        sums = np.zeros(4)
        for batch in batches:
            for param in named.values():
                param.zero_grad()
            scale = 1.0 / len(batch)
            for example in batch:
                with Tape() as tape:
                    result = forward_example(model, example, training=True, rng=noise_rng)
                    scaled = T.mul_const(result.loss, scale)
                if not np.isfinite(result.loss.data):
                    culprit = _first_nonfinite(tape)
                    raise NonFiniteLossError(
                        "non-finite loss at epoch %d; first bad tape node: %s"
                        % (epoch, culprit)
                    )
                backward_pass(tape, scaled)
                sums += (
                    result.loss.item(), result.l_task.item(),
                    result.l_it.item(), result.l_ti.item(),
                )
            adam_step(named, state, config.lr, config.crf_lr)
        means = sums / len(splits.train)
        val_metrics = evaluate_model(model, splits.val)
        row = EpochRow(
            epoch=epoch,
            train_loss=means[0], l_task=means[1], l_it=means[2], l_ti=means[3],
            val_metric=val_metrics["metric"],
            seconds=time.perf_counter() - started,
        )
        rows.append(row)
        if row.val_metric > best_val:
            best_val = row.val_metric
            best_epoch = epoch
            save_checkpoint(model, checkpoint_path, rng_state=noise_rng.bit_generator.state)

    write_epoch_log(rows, log_path)
    best_model, _manifest = load_checkpoint(checkpoint_path)
    test_metrics = evaluate_model(best_model, splits.test)
    return TrainResult(
        model=model,
        best_epoch=best_epoch,
        best_val_metric=best_val,
        test_metrics=test_metrics,
        log_rows=rows,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
    )


def write_epoch_log(rows, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_loss", "l_task", "l_it", "l_ti", "val_metric", "seconds"])
        for row in rows:
            writer.writerow([
                row.epoch, row.train_loss, row.l_task, row.l_it, row.l_ti,
                row.val_metric, row.seconds,
            ])


# ---------------------------------------------------------------------------
# checkpointing


def _blob_path(path):
    return path + ".blob"


def save_checkpoint(model, path, rng_state=None):
    """JSON manifest at `path` plus raw little-endian float64 blob beside it."""
    entries = []
    chunks = []
    offset = 0
    for name, param in model.named_parameters().items():
        raw = np.ascontiguousarray(param.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(param.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tensors": entries,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "rng_state": _state_to_jsonable(rng_state),
    }
    with open(path, "w") as handle:
        json.dump(manifest, handle, indent=1)
        handle.write("\n")
    with open(_blob_path(path), "wb") as handle:
        handle.write(b"".join(chunks))
    return manifest


def load_checkpoint(path, config=None, force=False):
    """Rebuild the saved model; refuses architecture mismatches unless forced.

    Every manifest entry is validated against the blob before any parameter
    is assigned, so a bad file never yields a half-loaded model.
    """
    with open(path) as handle:
        manifest = json.load(handle)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            "unsupported checkpoint format_version %r" % (manifest.get("format_version"),)
        )
    stored = config_from_dict(manifest["config"])
    if config is not None and config_hash(config) != config_hash(stored):
        warnings.warn("checkpoint config hash does not match the requested config", stacklevel=2)
        if not force:
            raise ConfigError(
                "config hash mismatch: checkpoint %s vs requested %s (pass force to override)"
                % (config_hash(stored), config_hash(config))
            )
    with open(_blob_path(path), "rb") as handle:
        blob = handle.read()

    model = build_model(stored)
    named = model.named_parameters()
    entry_names = [entry["name"] for entry in manifest["tensors"]]
    if sorted(entry_names) != sorted(named):
        missing = sorted(set(named) - set(entry_names))
        extra = sorted(set(entry_names) - set(named))
        offender = (missing + extra)[0]
        raise ConfigError("checkpoint tensor list does not match model: %r" % offender)

    staged = {}
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if shape != named[name].shape:
            raise ConfigError(
                "checkpoint entry %r has shape %r, expected %r" % (name, shape, named[name].shape)
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * count
        if offset < 0 or end > len(blob):
            raise ConfigError(
                "checkpoint entry %r overflows the blob (bytes %d..%d of %d)"
                % (name, offset, end, len(blob))
            )
        staged[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
    for name, values in staged.items():
        # frombuffer views are read-only; parameters must stay writable
        named[name].data = values.copy()
    return model, manifest


def _state_to_jsonable(state):
    if state is None:
        return None
    if isinstance(state, dict):
        return {key: _state_to_jsonable(value) for key, value in state.items()}
    if isinstance(state, np.ndarray):
        return {"__array__": state.tolist(), "dtype": str(state.dtype)}
    if isinstance(state, (np.integer,)):
        return int(state)
    return state


def _state_from_jsonable(state):
    if isinstance(state, dict):
        if "__array__" in state:
            return np.array(state["__array__"], dtype=state["dtype"])
        return {key: _state_from_jsonable(value) for key, value in state.items()}
    return state


def restore_rng(manifest):
    """Generator whose bit stream continues from the saved state, if any."""
    state = _state_from_jsonable(manifest.get("rng_state"))
    if state is None:
        return None
    generator = np.random.Generator(np.random.Philox())
    generator.bit_generator.state = state
    return generator
